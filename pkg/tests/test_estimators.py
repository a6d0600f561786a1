import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import FAR_FUTURE, tree_of
from qlogprov.collector import build_trees, collect
from qlogprov.errors import ConfigError
from qlogprov.estimators import (
    ActivityFilter,
    LastKRunsAdmitter,
    LoopCompressor,
    ProvenanceGraphExtractor,
    QueryRouter,
    check_activity_batch,
    check_binding_mode,
    check_positive_or_none,
    make_filter_pipeline,
)
from qlogprov.filters import FilterConfig
from qlogprov.generator import gen_running_example, sales_catalog


def _batch(repeats=3):
    return build_trees(collect(gen_running_example(2, repeats).events, now=FAR_FUTURE).activities)


def test_params_round_trip_and_clone():
    est = ProvenanceGraphExtractor(binding_mode="best_effort", emit_levels=["procedure"])
    params = est.get_params()
    assert params["binding_mode"] == "best_effort" and params["emit_levels"] == ["procedure"]
    c = clone(est)
    assert c is not est and c.get_params() == params
    pipe = make_filter_pipeline(FilterConfig(loop_iters_admitted=3, sp_runs_admitted=None))
    assert pipe.get_params()["loops__k"] == 3 and pipe.get_params()["last_k__K"] is None
    pipe.set_params(loops__k=2)
    assert pipe.named_steps["loops"].k == 2


def test_validation_helpers():
    tree = tree_of("a", ("SELECT 1", []))
    assert check_activity_batch([tree]) == [(None, tree)]
    with pytest.raises(TypeError):
        check_activity_batch([1, 2])
    assert check_positive_or_none(None, "K") is None and check_positive_or_none(3, "K") == 3
    for bad in (0, -1, 1.5, True):
        with pytest.raises((ConfigError, ValueError, TypeError)):
            check_positive_or_none(bad, "K")
    assert check_binding_mode("pre_bound").value == "pre_bound"
    with pytest.raises((ConfigError, ValueError)):
        check_binding_mode("psychic")


def test_fit_validates_params():
    with pytest.raises((ConfigError, ValueError)):
        LoopCompressor(k=0).fit([])
    with pytest.raises((ConfigError, ValueError)):
        LastKRunsAdmitter(K=-2).fit([])


def test_pipeline_steps_compose():
    batch = _batch()
    routed = QueryRouter().fit_transform(batch)
    assert all("route" in t.root.annotations for _, t in routed)
    kept = ActivityFilter(FilterConfig()).fit_transform(routed)
    assert len(kept) == 3
    assert len(LastKRunsAdmitter(K=1).fit_transform(kept)) == 1
    assert len(LastKRunsAdmitter(K=None).fit_transform(kept)) == 3


def test_loop_compressor_copy_flag():
    tree = tree_of("a", ("EXECUTE p", [(f"UPDATE t SET a = {i}", []) for i in range(5)]))
    LoopCompressor(k=1).fit_transform([tree])
    assert len(tree.root.children) == 5
    LoopCompressor(k=1, copy=False).fit_transform([tree])
    assert len(tree.root.children) == 1


def test_extractor_fit_transform_and_state():
    est = ProvenanceGraphExtractor(catalog=sales_catalog())
    with pytest.raises(NotFittedError):
        est.transform(_batch(1))
    g = est.fit_transform(_batch(2))
    assert est.n_activities_ == 2 and not est.errors_ and len(g) > 0
    assert set(est.timings_) == {"RInfo", "ProvEx", "Stitcher"}
    more = est.transform(_batch(1))
    assert len(more) > 0


def test_extractor_records_per_activity_errors():
    bad = tree_of("x", ("SELECT 1", []))
    bad.root.completed_event = None
    est = ProvenanceGraphExtractor(catalog=sales_catalog()).fit(_batch(1) + [(None, bad)])
    assert est.n_activities_ == 1 and len(est.errors_) == 1


def test_extractor_rejects_wrong_catalog_type():
    with pytest.raises(TypeError):
        ProvenanceGraphExtractor(catalog={"T": ["a"]}).fit([])
