import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlogprov.config import (
    RunConfig,
    config_from_dict,
    config_to_dict,
    default_config,
    dumps_config,
    load_config,
    loads_config,
    save_config,
)
from qlogprov.errors import ConfigError
from qlogprov.filters import FilterConfig


def test_defaults_are_the_production_profile():
    cfg = default_config()
    f = cfg.filters
    assert f.loop_iters_admitted == 1 and f.sp_runs_admitted == 1 and f.use_builtin_patterns
    assert f.emit_levels == {"statement", "batch", "procedure"}
    assert cfg.binding.mode == "state_based" and cfg.uploader.batch_size == 100


def test_dump_load_round_trip_with_unbounded_values(tmp_path):
    cfg = default_config()
    cfg.filters.loop_iters_admitted = None
    cfg.filters.sp_runs_admitted = 16
    cfg.filters.patterns = [{"kind": "regex", "pattern": "^x", "route": "runtime_only"}]
    cfg.filters.metadata_predicates = ["client_app_name = 'SSMS'"]
    cfg.source.path = "/logs"
    text = dumps_config(cfg)
    assert 'loop_iters_admitted = "all"' in text
    again = loads_config(text)
    assert config_to_dict(again) == config_to_dict(cfg)
    path = tmp_path / "c.toml"
    save_config(cfg, path)
    assert config_to_dict(load_config(str(path), env={})) == config_to_dict(cfg)


def test_env_overrides_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[filters]\nsp_runs_admitted = 4\n[uploader]\nbatch_size = 10\n')
    env = {
        "QLOGPROV_FILTERS_SP_RUNS_ADMITTED": "all",
        "QLOGPROV_FILTERS_EMIT_LEVELS": "procedure, batch",
        "QLOGPROV_UPLOADER_BATCH_SIZE": "25",
        "QLOGPROV_SOURCE_VALIDATE": "false",
        "UNRELATED": "1",
    }
    cfg = load_config(str(path), env=env)
    assert cfg.filters.sp_runs_admitted is None
    assert cfg.filters.emit_levels == {"procedure", "batch"}
    assert cfg.uploader.batch_size == 25 and cfg.source.validate is False


@pytest.mark.parametrize(
    "doc",
    [
        {"nonsense": {}},
        {"source": {"pathh": "x"}},
        {"uploader": {"batch_size": 0}},
        {"uploader": {"batch_size": "many"}},
        {"binding": {"mode": "psychic"}},
        {"uploader": {"target_format": "yaml"}},
        {"filters": {"loop_iters_admitted": 0}},
        {"filters": {"emit_levels": ["statement", "galaxy"]}},
    ],
)
def test_bad_configs_are_rejected(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_missing_and_invalid_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.toml"), env={})
    bad = tmp_path / "bad.toml"
    bad.write_text("[source\n")
    with pytest.raises(ConfigError):
        load_config(str(bad), env={})


bounded = st.one_of(st.none(), st.integers(1, 10**6))


@settings(max_examples=60, deadline=None)
@given(bounded, bounded, st.booleans(), st.sets(st.sampled_from(["statement", "batch", "procedure"]), min_size=1),
       st.integers(1, 1000))
def test_config_serialization_is_a_fixed_point(k, K, keep, levels, batch):
    cfg = RunConfig(filters=FilterConfig(loop_iters_admitted=k, sp_runs_admitted=K, keep_context=keep, emit_levels=levels))
    cfg.uploader.batch_size = batch
    text = dumps_config(cfg)
    assert dumps_config(loads_config(text)) == text


def test_strict_subtree_switch_reaches_the_pipeline():
    from conftest import FAR_FUTURE, nested_events
    from qlogprov.pipeline import run_extract

    # An INSERT whose trigger runs an UPDATE: nested under the lenient rule, a sibling under the strict one.
    events = nested_events("t", ("EXECUTE p", [("INSERT INTO A (x) VALUES (1)", [("UPDATE B SET x = 1", [])])]))
    shapes = []
    for text in ("", "[source]\nfig6_strict_subtree = true\n"):
        cfg = loads_config(text)
        run = run_extract(cfg, source=events, now=FAR_FUTURE, write_report=False, keep_trees=True)
        [(_, tree)] = run.trees
        shapes.append([len(c.children) for c in tree.root.children])
    assert shapes == [[1], [0, 0]]
