import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FAR_FUTURE, ev, nested_events
from qlogprov.collector import (
    Activity,
    Checkpoint,
    build_qqtree,
    build_trees,
    collect,
    is_complete,
    load_checkpoint,
    save_checkpoint,
)
from qlogprov.errors import CorruptCheckpoint, MalformedActivity, SourceUnavailable
from qlogprov.events import EventClass, write_log
from qlogprov.generator import EXEC_CLEAN, INSERT_V2, running_example_tree

RUNNING_EXAMPLE_SHAPE = (
    "EXECUTE SyncNewSales 2",
    [
        ("IF EXISTS(SELECT * FROM INFORMATION_SCHEMA.TABLES WHERE TABLE_NAME='StagedSales') DELETE FROM TABLE StagedSales", []),
        ("BULK INSERT StagedSales FROM 'newSales.csv'", []),
        (EXEC_CLEAN, [(INSERT_V2, [])]),
    ],
)


def test_running_example_tree_shape(running_v2):
    res = collect(running_v2.events, now=FAR_FUTURE)
    [(activity, tree)] = build_trees(res.activities)
    assert activity.activity_id == "3"
    assert tree.shape() == RUNNING_EXAMPLE_SHAPE
    assert tree.shape() == running_example_tree(2).shape()
    assert [n.node_id for n in tree.nodes()] == ["0", "0.0", "0.1", "0.2", "0.2.0"]


def test_collect_groups_by_activity_and_orders_by_trigger_time():
    a = nested_events("a", ("EXECUTE p", [("SELECT 1", [])]), ts0=1000)
    b = nested_events("b", ("EXECUTE q", []), ts0=0)
    merged = sorted(a + b, key=lambda e: e.timestamp)
    res = collect(merged, now=FAR_FUTURE)
    assert [x.activity_id for x in res.activities] == ["b", "a"]
    assert res.events_read == len(merged)


def test_out_of_order_events_are_sorted_within_an_activity():
    evs = nested_events("a", ("EXECUTE p", [("SELECT 1", [])]))
    res = collect(list(reversed(evs)), now=FAR_FUTURE)
    assert [e.seq for e in res.activities[0].events] == [0, 1, 2, 3]


def test_incomplete_activity_deferred_then_stale():
    evs = nested_events("a", ("EXECUTE p", [("SELECT 1", [])]))[:-1]
    last = evs[-1].timestamp
    res = collect(evs, now=last + 10)
    assert res.deferred == ["a"] and not res.activities and not res.stale
    res = collect(evs, now=last + 10**12, staleness_us=1000)
    assert [s.activity_id for s in res.stale] == ["a"]


def test_checkpoint_exactly_once(tmp_path):
    evs = nested_events("a", ("EXECUTE p", []))
    path = tmp_path / "cp.json"
    first = collect(evs, now=FAR_FUTURE)
    save_checkpoint(first.checkpoint, path)
    assert len(first.activities) == 1
    second = collect(evs, load_checkpoint(path), now=FAR_FUTURE + 1)
    assert second.activities == []


def test_fingerprint_lets_a_late_activity_through():
    # An activity whose events straddle the previous run start is reprocessed
    # only if its content changed.
    evs = nested_events("a", ("EXECUTE p", []), ts0=100)
    cp = Checkpoint(last_run_start=105, processed=set())
    assert len(collect(evs, cp, now=FAR_FUTURE).activities) == 1
    cp = Checkpoint(105, {("a", Activity("a", evs).fingerprint)})
    assert collect(evs, cp, now=FAR_FUTURE).activities == []


def test_checkpoint_file_format_and_corruption(tmp_path):
    path = tmp_path / "cp.json"
    save_checkpoint(Checkpoint(7, {("x", "ff")}), path)
    assert json.loads(path.read_text()) == {"last_run_start": 7, "processed": [["x", "ff"]]}
    path.write_text('{"last_run_start": "soon"}')
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    path.write_text("{")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    assert load_checkpoint(tmp_path / "missing.json") == Checkpoint()


def test_missing_source():
    with pytest.raises(SourceUnavailable):
        collect("/nonexistent/log/dir", now=FAR_FUTURE)


def test_collect_from_directory(tmp_path, running_v2):
    write_log(running_v2.events, tmp_path, max_events_per_file=4)
    res = collect(str(tmp_path), now=FAR_FUTURE)
    assert len(res.activities) == 1 and res.bytes_read > 0


@pytest.mark.parametrize(
    "events, reason",
    [
        ([ev("a", 0, "completed", "x")], "starts with a completed event"),
        ([ev("a", 0, "started", "x"), ev("a", 1, "completed", "y")], "different query"),
        ([ev("a", 0, "started", "x"), ev("a", 1, "completed", "x", cls=EventClass.SQL_BATCH)], "does not match"),
        ([ev("a", 0, "started", "x")], "without completion"),
        (
            [ev("a", 0, "started", "x"), ev("a", 1, "completed", "x"), ev("a", 2, "started", "y"), ev("a", 3, "completed", "y")],
            "second root",
        ),
    ],
)
def test_malformed_activities(events, reason):
    with pytest.raises(MalformedActivity, match=reason):
        build_qqtree(Activity("a", events))


def test_build_trees_skips_malformed():
    good = Activity("g", nested_events("g", ("EXECUTE p", [])))
    bad = Activity("b", [ev("b", 0, "completed", "x")])
    errors = []
    out = build_trees([bad, good], on_error=errors.append)
    assert [a.activity_id for a, _ in out] == ["g"] and errors[0].activity_id == "b"


def test_is_complete():
    evs = nested_events("a", ("EXECUTE p", [("SELECT 1", [])]))
    assert is_complete(evs) is True
    assert is_complete(evs[:-1]) is False
    assert is_complete([ev("a", 0, "completed", "x")]) is None


def test_plan_payload_attaches_to_last_completed():
    from qlogprov.events import EventKind, EventMetadata, QueryEvent

    evs = nested_events("a", ("EXECUTE p", [("SELECT 1", [])]))
    plan = QueryEvent("a", 99, EventKind.PLAN, EventClass.SP_STATEMENT, evs[2].timestamp + 1, "", EventMetadata(), "PLAN")
    tree = build_qqtree(Activity("a", evs[:3] + [plan] + evs[3:]))
    assert tree.find("0.0").plan_payload == "PLAN"


def test_strict_subtree_mode_keeps_statements_flat():
    # Statement events that are not EXECUTEs never become parents in strict mode.
    evs = [
        ev("a", 0, "started", "EXECUTE p", cls=EventClass.SQL_BATCH),
        ev("a", 1, "started", "UPDATE t SET a = 1"),
        ev("a", 2, "started", "SELECT 1"),
        ev("a", 3, "completed", "SELECT 1"),
        ev("a", 4, "completed", "UPDATE t SET a = 1"),
        ev("a", 5, "completed", "EXECUTE p", cls=EventClass.SQL_BATCH),
    ]
    loose = build_qqtree(Activity("a", evs))
    strict = build_qqtree(Activity("a", evs), strict_subtree=True)
    assert len(loose.root.children) == 1 and len(strict.root.children) == 2


def tree_specs(depth=4):
    leaf = st.tuples(st.sampled_from(["SELECT 1", "UPDATE t SET a = 1", "SET @x = 1"]), st.just([]))
    return st.recursive(
        leaf,
        lambda kids: st.tuples(st.sampled_from(["EXECUTE p", "EXECUTE q"]), st.lists(kids, max_size=4)),
        max_leaves=25,
    )


def _normalize(spec):
    text, kids = spec
    return (text, [_normalize(k) for k in kids])


@settings(max_examples=100, deadline=None)
@given(tree_specs())
def test_events_to_tree_round_trip(spec):
    tree = build_qqtree(Activity("a", nested_events("a", spec)))
    assert tree.shape() == _normalize(spec)
    # Every node id is its index path and every child points at its parent.
    for node in tree.nodes():
        for i, c in enumerate(node.children):
            assert c.parent is node and c.node_id == f"{node.node_id}.{i}"
