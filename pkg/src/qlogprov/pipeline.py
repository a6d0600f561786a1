"""One extraction run: collect, build trees, filter, extract, stitch, upload, checkpoint."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional

from .catalog import CatalogState, load_catalog, save_catalog
from .collector import Checkpoint, atomic_write_json, build_trees, collect, load_checkpoint, save_checkpoint
from .events import gc_paused
from .config import RunConfig
from .errors import ConfigError
from .estimators import ProvenanceGraphExtractor, make_filter_pipeline
from .graph import ProvenanceGraph
from .uploader import compile_graph, partition_batches, upload

logger = logging.getLogger(__name__)

STAGES = ("LgRead", "LgPars", "QQT", "Filters", "RInfo", "ProvEx", "Stitcher", "Upload", "Checkpoint")
REPORT_NAME = "last_run.json"


@dataclass
class RunResult:
    report: dict
    graph: ProvenanceGraph
    catalog: CatalogState
    trees: list = field(default_factory=list)  # (Activity, QQTree) pairs that reached extraction


def default_report_path(cfg: RunConfig) -> str:
    if cfg.source.report:
        return cfg.source.report
    base = os.path.dirname(cfg.source.checkpoint) if cfg.source.checkpoint else ""
    return os.path.join(base or ".", REPORT_NAME)


def run_extract(cfg: RunConfig, *, source=None, hooks=None, now: Optional[int] = None, cache=None,
                catalog: Optional[CatalogState] = None, write_report=True, keep_trees=False) -> RunResult:
    """Run the whole pipeline once and return the graph and the run report.

    ``source`` overrides ``cfg.source.path`` (a path or an in-memory event
    list); ``catalog`` overrides the snapshot at ``cfg.binding.state``.

    Raises:
        ConfigError, CorruptCheckpoint, SourceUnavailable, SinkUnavailable:
            run-level failures. Per-activity problems only end up in the report.
    """
    wall0 = time.perf_counter()
    cfg.validate()
    src = source if source is not None else cfg.source.path
    if src is None or src == "":
        raise ConfigError("no log source given ([source] path or --source)")
    stages = dict.fromkeys(STAGES, 0.0)
    if hooks is not None:
        hooks.freeze()

    t0 = time.perf_counter()
    cp = load_checkpoint(cfg.source.checkpoint) if cfg.source.checkpoint else Checkpoint()
    if catalog is None:
        catalog = load_catalog(cfg.binding.state) if cfg.binding.state and os.path.exists(cfg.binding.state) else CatalogState()
    stages["Checkpoint"] += time.perf_counter() - t0

    res = collect(src, cp, now, staleness_us=int(cfg.source.staleness_hours * 3_600_000_000),
                  validate=cfg.source.validate, hooks=hooks)
    for k, v in res.timings.items():
        stages[k] += v

    t0 = time.perf_counter()
    activities = res.activities
    if hooks is not None:
        activities = hooks.filter_items("collector.activity", activities)
    errors = [(exc.activity_id, f"MalformedActivity: {exc}") for exc in res.stale]
    batch = build_trees(activities, strict_subtree=cfg.source.fig6_strict_subtree, on_error=lambda exc: errors.append((exc.activity_id, f"MalformedActivity: {exc}")))
    if hooks is not None:
        batch = hooks.filter_items("collector.qqtree", batch)
        batch = hooks.fire("collector", "end", batch)
    stages["QQT"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    with gc_paused():
        kept = make_filter_pipeline(cfg.filters, copy=False).fit_transform(batch)
    stages["Filters"] += time.perf_counter() - t0

    extractor = ProvenanceGraphExtractor(
        catalog=catalog,
        binding_mode=cfg.binding.mode,
        include_control_columns=cfg.binding.include_control_columns,
        emit_levels=cfg.filters.emit_levels,
        cache=cache,
        hooks=hooks,
    )
    graph = extractor.fit_transform(kept)
    for k, v in extractor.timings_.items():
        stages[k] += v
    errors.extend(extractor.errors_)

    t0 = time.perf_counter()
    upload_report = None
    if hooks is not None:
        graph = hooks.fire("uploader", "start", graph)
    if cfg.uploader.sink:
        up = cfg.uploader
        docs = compile_graph(graph, up.target_format)
        batches = partition_batches(docs, up.batch_size)
        rep = upload(up.sink, batches, checkpoint_path=up.checkpoint or None, max_attempts=up.max_attempts,
                     base_delay=up.base_delay, factor=up.backoff_factor, hooks=hooks)
        if hooks is not None:
            rep = hooks.fire("uploader", "end", rep)
        upload_report = rep.to_json()
        # Batch ids restart with every run, so a finished run must not leave its ids behind.
        if up.checkpoint and os.path.exists(up.checkpoint):
            os.remove(up.checkpoint)
    stages["Upload"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    if cfg.source.checkpoint:
        save_checkpoint(res.checkpoint, cfg.source.checkpoint)
    if cfg.binding.state:
        save_catalog(extractor.catalog_, cfg.binding.state)
    stages["Checkpoint"] += time.perf_counter() - t0

    total = time.perf_counter() - wall0
    report = {
        "stages": {k: round(v, 6) for k, v in stages.items()},
        "total_s": round(total, 6),
        "stage_sum_s": round(sum(stages.values()), 6),
        "counts": {
            "events_read": res.events_read,
            "bytes_read": res.bytes_read,
            "activities_collected": len(res.activities),
            "activities_deferred": len(res.deferred),
            "activities_filtered": len(batch) - len(kept),
            "activities_errored": len(errors),
            "activities_extracted": extractor.n_activities_,
        },
        "graph": {"entities": len(graph.entities), "relationships": len(graph.relationships), "size": graph.size()},
        "upload": upload_report,
        "errors": [{"activity_id": a, "message": m} for a, m in errors[:100]],
    }
    if write_report:
        path = default_report_path(cfg)
        atomic_write_json(path, report)
        report["report_path"] = path
    return RunResult(report, graph, extractor.catalog_, kept if keep_trees else [])


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def format_report(report: dict) -> str:
    lines = []
    total = report.get("total_s", 0.0) or 0.0
    lines.append(f"total wall time: {total:.3f} s (stages sum {report.get('stage_sum_s', 0.0):.3f} s)")
    for name, secs in report.get("stages", {}).items():
        share = 100.0 * secs / total if total else 0.0
        lines.append(f"  {name:<10} {secs:9.3f} s  {share:5.1f}%")
    lines.append("counts:")
    for name, value in report.get("counts", {}).items():
        lines.append(f"  {name:<22} {value}")
    g = report.get("graph", {})
    lines.append(f"graph: {g.get('entities', 0)} entities, {g.get('relationships', 0)} relationships")
    up = report.get("upload")
    if up:
        lines.append(f"upload: {len(up['delivered'])} delivered, {len(up['skipped'])} skipped, {len(up['failed'])} failed")
    errs = report.get("errors") or []
    if errs:
        lines.append(f"errors ({len(errs)} shown):")
        for e in errs[:10]:
            lines.append(f"  {e['activity_id']}: {e['message']}")
    return "\n".join(lines)
