import json

import pytest
from click.testing import CliRunner

from qlogprov import __version__
from qlogprov.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def _generate(runner, tmp_path, *extra):
    out = tmp_path / "log"
    res = runner.invoke(main, ["generate", "--kind", "running-example", "--out", str(out), "--repeats", "2", *extra])
    assert res.exit_code == 0, res.output
    return out


def test_version(runner):
    res = runner.invoke(main, ["--version"])
    assert res.exit_code == 0 and __version__ in res.output


def test_generate_extract_validate_report(runner, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = _generate(runner, tmp_path)
    assert (out / "truth.json").exists() and (out / "catalog.json").exists()
    graph = tmp_path / "graph.json"
    cp = tmp_path / "cp.json"
    args = ["extract", "--source", str(out), "--state", str(out / "catalog.json"), "--checkpoint", str(cp),
            "--sp-runs", "all", "--output", str(graph)]
    res = runner.invoke(main, args)
    assert res.exit_code == 0, res.output
    assert "extracted 2 activities" in res.output

    res = runner.invoke(main, ["validate", str(graph)])
    assert res.exit_code == 0 and res.output.startswith("valid:")

    res = runner.invoke(main, ["report", "--report", str(tmp_path / "last_run.json"), "--json"])
    doc = json.loads(res.output)
    assert doc["counts"]["activities_extracted"] == 2 and "ProvEx" in doc["stages"]

    # The checkpoint makes a second run a no-op.
    res = runner.invoke(main, args)
    assert res.exit_code == 0 and "extracted 0 activities" in res.output


def test_extract_uploads_to_directory_sink(runner, tmp_path):
    out = _generate(runner, tmp_path)
    sink = tmp_path / "sink"
    res = runner.invoke(main, ["extract", "--source", str(out), "--state", str(out / "catalog.json"),
                               "--sink", str(sink), "--batch-size", "10", "--report", str(tmp_path / "r.json")])
    assert res.exit_code == 0, res.output
    assert len(list(sink.glob("batch-*.json"))) > 1
    res = runner.invoke(main, ["validate", str(sink)])
    assert res.exit_code == 0, res.output


def test_validate_rejects_broken_graph(runner, tmp_path):
    bad = tmp_path / "g.json"
    bad.write_text(json.dumps([{"guid": "r1", "typeName": "input", "end1": {"guid": "a"}, "end2": {"guid": "b"}}]))
    res = runner.invoke(main, ["validate", str(bad)])
    assert res.exit_code == 1
    bad.write_text("{nope")
    assert runner.invoke(main, ["validate", str(bad)]).exit_code == 1


def test_usage_errors(runner, tmp_path):
    assert runner.invoke(main, ["extract", "--config", str(tmp_path / "missing.toml")]).exit_code == 2
    assert runner.invoke(main, ["extract"]).exit_code == 2
    assert runner.invoke(main, ["extract", "--source", "x", "--loop-iters", "0"]).exit_code == 2
    assert runner.invoke(main, ["extract", "--source", "x", "--emit-levels", "galaxy"]).exit_code == 2
    assert runner.invoke(main, ["generate", "--out", str(tmp_path / "o"), "--plan-factor", "0"]).exit_code == 2


def test_missing_source_is_a_run_error(runner, tmp_path):
    res = runner.invoke(main, ["extract", "--source", str(tmp_path / "nowhere"), "--report", str(tmp_path / "r.json")])
    assert res.exit_code == 2 and "SourceUnavailable" in res.output


def test_print_config_reflects_overrides(runner):
    res = runner.invoke(main, ["extract", "--print-config", "--loop-iters", "all", "--sp-runs", "16"])
    assert res.exit_code == 0
    assert 'loop_iters_admitted = "all"' in res.output and "sp_runs_admitted = 16" in res.output


def test_generate_oltp_with_plans(runner, tmp_path):
    out = tmp_path / "oltp"
    res = runner.invoke(main, ["generate", "--out", str(out), "--transactions", "3", "--stmts-per-tx", "20",
                               "--loop-iters", "2", "--plan-factor", "9"])
    assert res.exit_code == 0, res.output
    text = "".join(p.read_text() for p in out.glob("*.ndjson"))
    assert '"kind": "plan"' in text or '"kind":"plan"' in text
