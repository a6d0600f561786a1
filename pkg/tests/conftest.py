import pytest

from qlogprov.collector import Activity, build_qqtree, collect
from qlogprov.events import EventClass, EventKind, EventMetadata, QueryEvent
from qlogprov.generator import gen_oltp, gen_running_example

FAR_FUTURE = 10**18


def ev(aid, seq, kind, text, ts=None, cls=EventClass.SP_STATEMENT, **meta):
    """Terse event constructor for hand-built activities."""
    kind = EventKind(kind) if isinstance(kind, str) else kind
    if kind is EventKind.COMPLETED:
        meta.setdefault("cpu_time_us", 1)
        meta.setdefault("duration_us", 1)
    return QueryEvent(aid, seq, kind, cls, seq * 10 if ts is None else ts, text, EventMetadata(**meta))


def nested_events(aid, spec, start_seq=0, ts0=0):
    """Events for a nested spec ``(text, [children])``; the root is a batch."""
    out = []
    seq = [start_seq]

    def visit(node, depth):
        text, kids = node
        cls = EventClass.SQL_BATCH if depth == 0 else EventClass.SP_STATEMENT
        out.append(ev(aid, seq[0], "started", text, ts=ts0 + seq[0] * 10, cls=cls, server_name="srv", database_name="db"))
        seq[0] += 1
        for k in kids:
            visit(k, depth + 1)
        out.append(ev(aid, seq[0], "completed", text, ts=ts0 + seq[0] * 10, cls=cls, server_name="srv", database_name="db"))
        seq[0] += 1

    visit(spec, 0)
    return out


def tree_of(aid, spec, ts0=0):
    return build_qqtree(Activity(aid, nested_events(aid, spec, ts0=ts0)))


@pytest.fixture(scope="session")
def running_v2():
    return gen_running_example(2)


@pytest.fixture(scope="session")
def running_v1():
    return gen_running_example(1)


@pytest.fixture(scope="session")
def small_oltp():
    return gen_oltp(transactions=40, clients=4, sp_count=5, loop_iters=4, stmts_per_tx=30, seed=7)


@pytest.fixture
def collected():
    def run(events):
        return collect(events, now=FAR_FUTURE)

    return run


def running_tree(version=2):
    """QQTree of the running example, built from its generated events."""
    from qlogprov.collector import build_trees

    [(_, tree)] = build_trees(collect(gen_running_example(version).events, now=FAR_FUTURE).activities)
    return tree


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
