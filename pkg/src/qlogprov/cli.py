"""Command line: ``qlogprov extract | generate | validate | report``."""
from __future__ import annotations

import json
import logging
import os
import sys

import click

from . import __version__
from .catalog import save_catalog
from .config import UNBOUNDED, default_config, dumps_config, load_config
from .errors import ConfigError, CorruptCheckpoint, ProvenanceError, SinkUnavailable, SourceUnavailable
from .events import write_log
from .filters import drop_events_retention
from .generator import (
    DEFAULT_PLAN_FACTOR,
    gen_plan_variant,
    gen_running_example,
    iter_oltp,
    save_ground_truth,
)
from .pipeline import default_report_path, format_report, load_report, run_extract
from .uploader import compile_graph, graph_from_atlas

logger = logging.getLogger(__name__)


def _bounded(value, name):
    if value is None:
        return None
    if value.lower() in (UNBOUNDED, "inf", "none"):
        return None
    try:
        n = int(value)
    except ValueError:
        raise click.BadParameter(f"expected a positive integer or {UNBOUNDED!r}", param_hint=name) from None
    if n < 1:
        raise click.BadParameter("must be >= 1", param_hint=name)
    return n


@click.group()
@click.version_option(__version__, prog_name="qlogprov")
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose):
    """Coarse-grained provenance from SQL query event logs."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# -- extract -------------------------------------------------------------------------------


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML run configuration.")
@click.option("--source", help="Log directory or NDJSON file (overrides [source] path).")
@click.option("--checkpoint", help="Collector checkpoint file.")
@click.option("--state", help="Catalog snapshot file (read at start, updated at the end).")
@click.option("--sink", help="Upload target: directory or http(s) endpoint.")
@click.option("--batch-size", type=int, help="Documents per upload batch.")
@click.option("--target-format", type=click.Choice(["atlas_json", "openlineage_json"]))
@click.option("--binding-mode", type=click.Choice(["pre_bound", "state_based", "best_effort"]))
@click.option("--loop-iters", help="k: loop iterations kept ('all' keeps every one).")
@click.option("--sp-runs", help="K: latest executions admitted per query ('all' admits every one).")
@click.option("--emit-levels", help="Comma list of statement,batch,procedure.")
@click.option("--no-builtin-patterns", is_flag=True, help="Do not load the shipped uninteresting-query patterns.")
@click.option("--report", "report_path", help="Where to write the run report JSON.")
@click.option("--output", type=click.Path(dir_okay=False), help="Also write the graph as atlas_json documents here.")
@click.option("--print-config", is_flag=True, help="Print the effective configuration and exit.")
@click.pass_context
def extract(ctx, config_path, source, checkpoint, state, sink, batch_size, target_format, binding_mode, loop_iters,
            sp_runs, emit_levels, no_builtin_patterns, report_path, output, print_config):
    """Run one extraction over the new events of a log."""
    if config_path and not os.path.exists(config_path):
        raise click.UsageError(f"config file {config_path} not found", ctx=ctx)
    try:
        cfg = load_config(config_path)
        if source:
            cfg.source.path = source
        if checkpoint:
            cfg.source.checkpoint = checkpoint
        if report_path:
            cfg.source.report = report_path
        if state:
            cfg.binding.state = state
        if binding_mode:
            cfg.binding.mode = binding_mode
        if sink:
            cfg.uploader.sink = sink
        if batch_size is not None:
            cfg.uploader.batch_size = batch_size
        if target_format:
            cfg.uploader.target_format = target_format
        f = cfg.filters
        if loop_iters is not None:
            f.loop_iters_admitted = _bounded(loop_iters, "--loop-iters")
        if sp_runs is not None:
            f.sp_runs_admitted = _bounded(sp_runs, "--sp-runs")
        if emit_levels:
            f.emit_levels = frozenset(x.strip() for x in emit_levels.split(",") if x.strip())
        if no_builtin_patterns:
            f.use_builtin_patterns = False
        f.__post_init__()
        cfg.validate()
    except ConfigError as exc:
        raise click.UsageError(str(exc), ctx=ctx) from None
    if print_config:
        click.echo(dumps_config(cfg), nl=False)
        return
    if not cfg.source.path:
        raise click.UsageError("no log source: pass --source or set [source] path", ctx=ctx)
    try:
        result = run_extract(cfg)
    except (ConfigError, CorruptCheckpoint, SourceUnavailable, SinkUnavailable) as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(2)
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            json.dump(compile_graph(result.graph, "atlas_json"), fh, sort_keys=True, separators=(",", ":"))
    c = result.report["counts"]
    g = result.report["graph"]
    click.echo(
        f"extracted {c['activities_extracted']} activities "
        f"({c['activities_filtered']} filtered, {c['activities_errored']} errored): "
        f"{g['entities']} entities, {g['relationships']} relationships "
        f"in {result.report['total_s']:.2f} s"
    )


# -- generate ------------------------------------------------------------------------------


@main.command()
@click.option("--kind", type=click.Choice(["running-example", "oltp"]), default="oltp", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Directory for the NDJSON log.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--version", "example_version", type=click.IntRange(1, 2), default=2, show_default=True,
              help="Running example: procedure branch.")
@click.option("--repeats", type=click.IntRange(1), default=1, show_default=True, help="Running example: activities.")
@click.option("--transactions", type=click.IntRange(1), default=100, show_default=True)
@click.option("--clients", type=click.IntRange(1), default=16, show_default=True)
@click.option("--sp-count", type=click.IntRange(1), default=5, show_default=True)
@click.option("--loop-iters", type=click.IntRange(1), default=16, show_default=True)
@click.option("--stmts-per-tx", type=click.IntRange(1), default=125, show_default=True)
@click.option("--nest-depth", type=click.IntRange(1), default=2, show_default=True)
@click.option("--plan-factor", type=float, default=None,
              help=f"Emit the plan-carrying variant with this byte factor (e.g. {DEFAULT_PLAN_FACTOR:g}).")
@click.option("--drop-events-buffer", type=click.IntRange(1), default=None, help="Simulated event buffer, bytes.")
@click.option("--drain-rate", type=float, default=1e6, show_default=True, help="Buffer drain rate, bytes/s.")
@click.option("--max-events-per-file", type=click.IntRange(1), default=None)
@click.option("--truth", type=click.Path(dir_okay=False), help="Ground-truth sidecar JSON (default <out>/truth.json).")
@click.pass_context
def generate(ctx, kind, out_dir, seed, example_version, repeats, transactions, clients, sp_count, loop_iters,
             stmts_per_tx, nest_depth, plan_factor, drop_events_buffer, drain_rate, max_events_per_file, truth):
    """Write a synthetic event log plus its ground truth and catalog snapshot."""
    if plan_factor is not None and plan_factor <= 0:
        raise click.BadParameter("must be > 0", param_hint="--plan-factor")
    if drain_rate <= 0:
        raise click.BadParameter("must be > 0", param_hint="--drain-rate")
    holder = {}
    if kind == "running-example":
        log = gen_running_example(example_version, repeats, seed=seed)
        events = log.events
        holder["gt"] = log.ground_truth
    else:
        events = iter_oltp(transactions, clients, sp_count, loop_iters, stmts_per_tx, nest_depth=nest_depth,
                           seed=seed, ground_truth=holder)
    if plan_factor is not None:
        events = gen_plan_variant(events, plan_factor, seed=seed)
    if drop_events_buffer is not None:
        events = drop_events_retention(events, drop_events_buffer, drain_rate)
    paths = write_log(events, out_dir, max_events_per_file=max_events_per_file)
    gt = holder["gt"]
    save_ground_truth(gt, truth or os.path.join(out_dir, "truth.json"))
    save_catalog(gt.catalog, os.path.join(out_dir, "catalog.json"))
    click.echo(f"wrote {len(paths)} log file(s), {len(gt.activities)} activities, to {out_dir}")


# -- validate / report ----------------------------------------------------------------------


@main.command()
@click.argument("graph_path", type=click.Path(exists=True))
def validate(graph_path):
    """Check a graph written by ``extract --output`` (or a directory of upload batches)."""
    docs = []
    if os.path.isdir(graph_path):
        names = sorted((n for n in os.listdir(graph_path) if n.startswith("batch-") and n.endswith(".json")),
                       key=lambda n: int(n[6:-5]))
        for name in names:
            with open(os.path.join(graph_path, name), encoding="utf-8") as fh:
                body = json.load(fh)
            docs.extend(body.get("entities", []))
            docs.extend(body.get("relationships", []))
    else:
        with open(graph_path, encoding="utf-8") as fh:
            try:
                docs = json.load(fh)
            except ValueError as exc:
                click.echo(f"error: not JSON: {exc}", err=True)
                sys.exit(1)
    try:
        g = graph_from_atlas(docs)
    except ProvenanceError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    problems = g.validate()
    if problems:
        for p in problems[:20]:
            click.echo(p, err=True)
        click.echo(f"invalid: {len(problems)} problem(s)", err=True)
        sys.exit(1)
    click.echo(f"valid: {len(g.entities)} entities, {len(g.relationships)} relationships")


@main.command()
@click.option("--report", "report_path", type=click.Path(dir_okay=False), help="Report file (default ./last_run.json).")
@click.option("--json", "as_json", is_flag=True, help="Print the raw JSON.")
def report(report_path, as_json):
    """Pretty-print the last run report."""
    path = report_path or default_report_path(default_config())
    if not os.path.exists(path):
        click.echo(f"error: no run report at {path}", err=True)
        sys.exit(1)
    doc = load_report(path)
    click.echo(json.dumps(doc, indent=2, sort_keys=True) if as_json else format_report(doc))


if __name__ == "__main__":
    main()
