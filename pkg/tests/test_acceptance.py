"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The heavy workloads (a 10^6-event OLTP log and its 10^5-event sibling) are
generated once per session. Timing tests run sequentially in one process,
so nothing else should be running on the machine while they do.
"""
import gc
import random
import re
import tempfile
import time
from collections import defaultdict

import pytest

from conftest import FAR_FUTURE, tree_of
from qlogprov.analysis import RelationRef, StatementProvenance
from qlogprov.collector import build_trees, collect
from qlogprov.config import default_config
from qlogprov.estimators import ProvenanceGraphExtractor, make_filter_pipeline
from qlogprov.events import serialize_event
from qlogprov.filters import FilterConfig, RetentionStats, drop_aggregation_levels, drop_events_retention
from qlogprov.generator import (
    gen_oltp,
    gen_plan_variant,
    gen_running_example,
    graph_signature,
    iter_oltp,
    log_bytes,
    running_example_tree,
    sales_catalog,
    tpcc_catalog,
    write_log_file,
)
from qlogprov.graph import EntityType, make_guid, qualified_name
from qlogprov.mock_sink import MockCatalog
from qlogprov.pipeline import run_extract
from qlogprov.runtime import extract_runtime
from qlogprov.stitcher import stitch
from qlogprov.uploader import compile_graph, partition_batches, upload

pytestmark = pytest.mark.acceptance

RESULTS = []  # picked up by the terminal summary hook in conftest

# criterion-4 workload
C4_TX, C4_CLIENTS, C4_SP, C4_LOOPS, C4_STMTS = 4000, 16, 5, 8, 125


def report(n, ok, detail):
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    RESULTS.append(line)
    return ok


def _profile(K, k, **kw):
    cfg = default_config()
    cfg.filters.sp_runs_admitted = K
    cfg.filters.loop_iters_admitted = k
    for name, value in kw.items():
        setattr(cfg.filters, name, value)
    return cfg


def _names(qns):
    return {qn.rsplit("/", 1)[-1] for qn in qns}


@pytest.fixture(scope="module")
def logs(tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance")
    big, small = d / "big.ndjson", d / "small.ndjson"
    write_log_file(iter_oltp(C4_TX, C4_CLIENTS, C4_SP, C4_LOOPS, C4_STMTS, seed=0), big)
    write_log_file(iter_oltp(C4_TX // 10, C4_CLIENTS, C4_SP, C4_LOOPS, C4_STMTS, seed=0), small)
    return {"big": str(big), "small": str(small)}


@pytest.fixture(scope="module")
def grid(logs):
    """Criterion-4 measurements, shared with criteria 5 and 10."""
    out = {"sizes": {}, "times": {}}
    t_start = time.perf_counter()
    for K, k in ((1, 1), (256, 8)):
        gc.collect()
        t0 = time.perf_counter()
        res = run_extract(_profile(K, k), source=logs["big"], catalog=tpcc_catalog(), now=FAR_FUTURE, write_report=False)
        out["times"][(K, k)] = time.perf_counter() - t0
        out["sizes"][(K, k)] = res.graph.size()
        out.setdefault("reports", {})[(K, k)] = res.report
        if (K, k) == (1, 1):
            out["graph_1_1"] = res.graph
        del res
    gc.collect()

    raw = build_trees(collect(logs["big"], now=FAR_FUTURE).activities)
    out["raw"] = raw
    cache = {}

    def extract(cfg):
        kept = make_filter_pipeline(cfg.filters, copy=True).fit_transform(raw)
        g = ProvenanceGraphExtractor(catalog=tpcc_catalog(), cache=cache).fit_transform(kept)
        return kept, g

    for K in (1, 16, 256):
        for k in (1, 2, 8):
            if (K, k) in out["sizes"]:
                continue
            t0 = time.perf_counter()
            _, g = extract(_profile(K, k))
            out["times"][(K, k)] = time.perf_counter() - t0
            out["sizes"][(K, k)] = g.size()
            del g
            gc.collect()
    out["elapsed"] = time.perf_counter() - t_start
    out["extract"] = extract
    return out


# -- 1 -----------------------------------------------------------------------------------------


def test_c1_running_example_fidelity():
    gen = gen_running_example(2)
    t0 = time.perf_counter()
    res = run_extract(default_config(), source=gen.events, catalog=sales_catalog(), now=FAR_FUTURE,
                      write_report=False, keep_trees=True)
    elapsed = time.perf_counter() - t0
    [(_, tree)] = res.trees
    shape_ok = tree.shape() == running_example_tree(2).shape()
    run_qn = qualified_name(EntityType.STORED_PROCEDURE_RUN, tree.activity_id, "0", "dbo.SyncNewSales")
    run_guid = make_guid(EntityType.STORED_PROCEDURE_RUN, run_qn)
    g = res.graph
    ins = _names(g.inputs_of(run_guid)) if run_guid in g.entities else set()
    outs = _names(g.outputs_of(run_guid)) if run_guid in g.entities else set()
    ok = (shape_ok and ins == {"newSales.csv", "StagedSales"} and outs == {"StagedSales", "SalesHistory"}
          and elapsed < 1.0)
    report(1, ok, f"tree shape {'matches' if shape_ok else 'differs'}; SyncNewSales run in={sorted(ins)} "
                  f"out={sorted(outs)}; {elapsed:.3f}s (< 1 s)")
    assert ok


# -- 2 -----------------------------------------------------------------------------------------


def _tree_build_time(path):
    gc.collect()
    t0 = time.perf_counter()
    res = collect(path, now=FAR_FUTURE)
    trees = build_trees(res.activities)
    elapsed = time.perf_counter() - t0
    return elapsed, res.events_read, len(trees)


def test_c2_qqtree_linearity(logs):
    t_small, n_small, _ = _tree_build_time(logs["small"])
    t_big, n_big, trees = _tree_build_time(logs["big"])
    ratio = t_big / t_small
    ok = ratio <= 12 and t_big < 60 and n_big >= 10 ** 6 - 10 ** 5
    report(2, ok, f"{n_small} events {t_small:.2f}s, {n_big} events {t_big:.2f}s; ratio {ratio:.2f} (<= 12), "
                  f"big run < 60 s")
    assert ok


# -- 3 -----------------------------------------------------------------------------------------

TABLES = [RelationRef("dbo", f"T{i}") for i in range(8)]


def _random_spec(rng, depth=0):
    if depth >= 5 or (depth and rng.random() < 0.35):
        return ("SELECT 1", [])
    return (f"EXECUTE p{depth}", [_random_spec(rng, depth + 1) for _ in range(rng.randint(1, 5))])


def _random_prov(rng, node_id):
    ins = frozenset(rng.sample(TABLES, rng.randint(0, 3)))
    outs = frozenset(rng.sample(TABLES, rng.randint(0, 2)))
    return StatementProvenance(node_id, ins, outs)


def _descendant_union(node, prov):
    ins, outs = set(), set()
    for n in node.iter_preorder():
        p = prov.get(n.node_id)
        if p is not None:
            ins |= {r.name for r in p.inputs}
            outs |= {r.name for r in p.outputs}
    return ins, outs


def test_c3_aggregation_oracle():
    rng = random.Random(2024)
    trees = mismatches = nodes = 0
    max_depth = max_fanout = 0
    while trees < 1000:
        tree = tree_of(f"a{trees}", _random_spec(rng))
        trees += 1
        all_nodes = tree.nodes()
        nodes += len(all_nodes)
        max_fanout = max(max_fanout, max(len(n.children) for n in all_nodes))
        max_depth = max(max_depth, max(n.node_id.count(".") for n in all_nodes))
        prov = {n.node_id: _random_prov(rng, n.node_id) for n in all_nodes if not n.children}
        rt = extract_runtime(tree)
        g = stitch(rt, prov, tree)
        for n in all_nodes:
            want = _descendant_union(n, prov)
            run_guid = rt.node_map[n.node_id][1]
            got = (_names(g.inputs_of(run_guid)), _names(g.outputs_of(run_guid)))
            mismatches += got != want
    ok = mismatches == 0 and max_depth <= 6 and max_fanout <= 5
    report(3, ok, f"{trees} random trees, {nodes} nodes (depth <= {max_depth + 1}, fanout <= {max_fanout}); "
                  f"{mismatches} mismatches")
    assert ok


# -- 4 -----------------------------------------------------------------------------------------


def test_c4_noise_reduction_grid(grid):
    sizes, times = grid["sizes"], grid["times"]
    size_ratio = sizes[(256, 8)] / sizes[(1, 1)]
    time_ratio = times[(256, 8)] / times[(1, 1)]
    Ks, ks = (1, 16, 256), (1, 2, 8)
    monotone = all(sizes[(a, k)] <= sizes[(b, k)] for k in ks for a, b in zip(Ks, Ks[1:])) and all(
        sizes[(K, a)] <= sizes[(K, b)] for K in Ks for a, b in zip(ks, ks[1:]))
    for K in Ks:
        print("  K=%-3d " % K + "  ".join(f"k={k}: |G|={sizes[(K, k)]:>7d} {times[(K, k)]:6.1f}s" for k in ks))
    ok = size_ratio >= 100 and time_ratio >= 5 and monotone and grid["elapsed"] < 600
    report(4, ok, f"size ratio {size_ratio:.0f}x (>= 100), e2e time ratio {time_ratio:.1f}x (>= 5), grid "
                  f"{'monotone' if monotone else 'NOT monotone'}, {grid['elapsed']:.0f}s (< 600 s)")
    assert ok


# -- 5 -----------------------------------------------------------------------------------------


def test_c5_drop_levels(grid):
    full = grid["graph_1_1"]
    proc_only = drop_aggregation_levels(full.copy(), {"procedure"})
    reduction = 1 - proc_only.size() / full.size()
    ok = 0.70 <= reduction <= 0.90
    report(5, ok, f"procedure-only |V|+|E| {proc_only.size()} vs full {full.size()}: "
                  f"{reduction:.1%} reduction (80% +- 10)")
    assert ok


# -- 6 -----------------------------------------------------------------------------------------

C6_TX = 200


@pytest.fixture(scope="module")
def text_and_plan_logs():
    gen = gen_oltp(transactions=C6_TX, clients=C4_CLIENTS, sp_count=C4_SP, loop_iters=C4_LOOPS,
                   stmts_per_tx=C4_STMTS, seed=1)
    return gen.events, gen_plan_variant(gen.events, 9)


def _timed_extract_from_file(events, cfg):
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/events.ndjson"
        size = write_log_file(events, path)
        gc.collect()
        t0 = time.perf_counter()
        res = run_extract(cfg, source=path, catalog=tpcc_catalog(), now=FAR_FUTURE, write_report=False)
        return time.perf_counter() - t0, size, res


def test_c6_text_vs_plan(text_and_plan_logs):
    text, plan = text_and_plan_logs
    best_text = best_plan = None
    for _ in range(2):
        tt, text_bytes, rt = _timed_extract_from_file(text, default_config())
        tp, plan_bytes, rp = _timed_extract_from_file(plan, default_config())
        best_text = tt if best_text is None else min(best_text, tt)
        best_plan = tp if best_plan is None else min(best_plan, tp)
    byte_ratio = plan_bytes / text_bytes
    slowdown = best_plan / best_text
    same = graph_signature(rt.graph) == graph_signature(rp.graph)
    ok = byte_ratio >= 8 and slowdown >= 1.5 and same
    report(6, ok, f"plan log {byte_ratio:.1f}x the bytes (>= 8); extraction {best_plan:.2f}s vs {best_text:.2f}s = "
                  f"{slowdown:.2f}x slower (>= 1.5); graphs {'equal' if same else 'differ'}")
    assert ok


# -- 7 -----------------------------------------------------------------------------------------


def _byte_rate(events):
    span = events[-1].timestamp - events[0].timestamp
    return log_bytes(events) / (span / 1e6)


def _survivors(events, buffer, rate):
    st = RetentionStats()
    kept = list(drop_events_retention(events, buffer, rate, stats=st))
    return kept, st.drop_fraction


def _graph_sig(events):
    cfg = default_config()
    cfg.filters = FilterConfig.unfiltered()
    g = run_extract(cfg, source=events, catalog=tpcc_catalog(), now=FAR_FUTURE, write_report=False).graph
    names, edges, _ = graph_signature(g)
    return names | edges


def _loss(full, part):
    return 1 - len(full & part) / len(full)


def test_c7_drop_events(text_and_plan_logs):
    text, plan = text_and_plan_logs
    rate = 1.25 * _byte_rate(text)
    # A buffer that cannot hold the largest event is not a real configuration, so the
    # geometric ladder starts at the first power of two above the largest event.
    largest = max(len(serialize_event(e)) + 1 for e in plan)
    buffer = 1 << largest.bit_length()
    while True:
        kept_text, text_drop = _survivors(text, buffer, rate)
        if text_drop < 0.05:
            break
        buffer *= 2
    kept_plan, plan_drop = _survivors(plan, buffer, rate)
    full_sig = _graph_sig(text)
    text_loss = _loss(full_sig, _graph_sig(kept_text))
    plan_loss = _loss(full_sig, _graph_sig(kept_plan))
    ok = text_drop < 0.05 and text_loss <= 0.05 and plan_loss >= 0.40
    report(7, ok, f"buffer {buffer} B, drain {rate / 1e3:.0f} kB/s: text loses {text_drop:.1%} events and "
                  f"{text_loss:.1%} of the graph (<= 5%); plan variant loses {plan_drop:.1%} events and "
                  f"{plan_loss:.1%} of the graph (>= 40%)")
    assert ok


# -- 8 -----------------------------------------------------------------------------------------


def test_c8_exactly_once_and_idempotent_upload(tmp_path):
    gen = gen_oltp(transactions=30, clients=4, sp_count=5, loop_iters=3, stmts_per_tx=40, seed=5)
    path = tmp_path / "events.ndjson"
    write_log_file(gen.events, path)
    cfg = default_config()
    cfg.source.checkpoint = str(tmp_path / "checkpoint.json")
    cfg.filters = FilterConfig.unfiltered()
    first = run_extract(cfg, source=str(path), catalog=tpcc_catalog(), write_report=False)
    second = run_extract(cfg, source=str(path), catalog=tpcc_catalog(), write_report=False)
    n1 = first.report["counts"]["activities_extracted"]
    n2 = second.report["counts"]["activities_extracted"]
    batches = partition_batches(compile_graph(first.graph), 50)
    with MockCatalog() as cat:
        upload(cat.endpoint, batches, sleep=lambda s: None)
        once = cat.snapshot()
        upload(cat.endpoint, batches, sleep=lambda s: None)
        twice = cat.snapshot()
    ok = n1 == 30 and n2 == 0 and once == twice and len(once[0]) > 0
    report(8, ok, f"runs extracted {n1} then {n2} activities; two uploads of {len(batches)} batches leave "
                  f"{len(twice[0])} entities / {len(twice[1])} relationships {'unchanged' if once == twice else 'CHANGED'}")
    assert ok


# -- 9 -----------------------------------------------------------------------------------------


def test_c9_stitcher_share():
    gen = gen_oltp(transactions=200, clients=C4_CLIENTS, sp_count=35, loop_iters=C4_LOOPS,
                   stmts_per_tx=C4_STMTS, nest_depth=6, seed=3)
    gc.collect()
    t0 = time.perf_counter()
    res = run_extract(_profile(None, None), source=gen.events, catalog=tpcc_catalog(), now=FAR_FUTURE,
                      write_report=False)
    total = time.perf_counter() - t0
    st = res.report["stages"]["Stitcher"]
    share = st / total
    ok = share <= 0.10
    report(9, ok, f"stitcher {st:.2f}s of {total:.2f}s end to end = {share:.1%} (<= 10%) over "
                  f"{res.report['counts']['activities_extracted']} activities")
    assert ok


# -- 10 ----------------------------------------------------------------------------------------

_EXEC_RE = re.compile(r"^\s*EXEC(?:UTE)?\s+(?:\w+\.)?(\w+)", re.IGNORECASE)


def _latest_executions(raw, K):
    """Independent oracle: (activity, node, procedure) of the latest K runs of every procedure."""
    runs = defaultdict(list)
    for _, tree in raw:
        for node in tree.root.iter_preorder():
            m = _EXEC_RE.match(node.query_text)
            if m:
                runs[m.group(1)].append((node.start_key, tree.activity_id, node.node_id, m.group(1)))
    latest = []
    for entries in runs.values():
        entries.sort()
        latest.extend(e[1:] for e in entries[-K:])
    return runs.keys(), latest


def test_c10_last_k_soundness(grid):
    details, ok = [], True
    for K in (1, 16):
        procs, latest = _latest_executions(grid["raw"], K)
        _, g = grid["extract"](_profile(K, None))
        missing = [
            (aid, nid) for aid, nid, proc in latest
            if make_guid(EntityType.STORED_PROCEDURE_RUN,
                         qualified_name(EntityType.STORED_PROCEDURE_RUN, aid, nid, f"dbo.{proc}")) not in g.entities
        ]
        ok &= not missing and len(latest) >= len(procs)
        details.append(f"K={K}: {len(latest) - len(missing)}/{len(latest)} latest runs of {len(procs)} procedures present")
        del g
    gen = gen_oltp(transactions=1707, clients=C4_CLIENTS, sp_count=1, loop_iters=2, stmts_per_tx=20, seed=0)
    raw = build_trees(collect(gen.events, now=FAR_FUTURE).activities)
    admitted = make_filter_pipeline(_profile(1, None).filters).fit_transform(raw)
    ok &= len(raw) == 1707 and len(admitted) == 1
    details.append(f"{len(admitted)} of {len(raw)} new_order runs admitted with K=1")
    report(10, ok, "; ".join(details))
    assert ok
