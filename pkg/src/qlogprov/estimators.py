"""Filters and the graph extractor as scikit-learn style estimators.

Each step takes a batch: a list of ``(Activity, QQTree)`` pairs in trigger
order (``activity`` may be ``None`` when only trees are at hand). The
filtering steps are stateless transformers; :class:`ProvenanceGraphExtractor`
learns the catalog state and produces a :class:`ProvenanceGraph`.

    >>> pipe = make_filter_pipeline(FilterConfig())
    >>> kept = pipe.fit_transform(batch)
    >>> graph = ProvenanceGraphExtractor(catalog=state).fit(kept).graph_
"""
from __future__ import annotations

import logging
import time

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from .analysis import BindingMode
from .catalog import CatalogState
from .collector import Activity, QQTree
from .errors import ConfigError, ProvenanceError
from .filters import (
    FilterConfig,
    QueryPattern,
    _builtin,
    admit_last_k_runs,
    drop_aggregation_levels,
    filter_activity,
    loop_compress,
    route_tree,
)
from .graph import ALL_LEVELS, ProvenanceGraph, merge_into
from .provenance import extract_provenance, generate_script
from .runtime import extract_runtime
from .stitcher import aggregate_across_runs, stitch

logger = logging.getLogger(__name__)


# -- validation helpers ------------------------------------------------------------------------


def check_activity_batch(X) -> list:
    """Normalize ``X`` to a list of ``(Activity | None, QQTree)`` pairs.

    Accepts such pairs or bare QQTrees. Raises TypeError on anything else.
    """
    if isinstance(X, QQTree):
        X = [X]
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"expected a batch of (Activity, QQTree) pairs, got {type(X).__name__}") from None
    out = []
    for i, item in enumerate(items):
        if isinstance(item, QQTree):
            out.append((None, item))
            continue
        if not (isinstance(item, tuple) and len(item) == 2):
            raise TypeError(f"batch item {i} is {type(item).__name__}, not an (Activity, QQTree) pair")
        activity, tree = item
        if not isinstance(tree, QQTree) or (activity is not None and not isinstance(activity, Activity)):
            raise TypeError(f"batch item {i} is not an (Activity, QQTree) pair")
        out.append((activity, tree))
    return out


def check_positive_or_none(value, name):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{name} must be a positive integer or None, got {value!r}")
    return value


def check_binding_mode(mode) -> BindingMode:
    if isinstance(mode, BindingMode):
        return mode
    try:
        return BindingMode(str(mode).lower())
    except ValueError:
        raise ConfigError(f"unknown binding mode {mode!r}; expected one of {[m.value for m in BindingMode]}") from None


def check_is_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


# -- filtering steps ---------------------------------------------------------------------------


class _Stateless(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        check_activity_batch(X)
        self._validate_params()
        return self

    def _validate_params(self):
        pass


class QueryRouter(_Stateless):
    """Route every node to full / runtime_only / drop and cut dropped subtrees.

    Activities whose root is dropped leave the batch.
    """

    def __init__(self, patterns=None, use_builtin_patterns=True):
        self.patterns = patterns
        self.use_builtin_patterns = use_builtin_patterns

    def _validate_params(self):
        pats = [p if isinstance(p, QueryPattern) else QueryPattern(**p) for p in (self.patterns or ())]
        if self.use_builtin_patterns:
            pats += _builtin()
        self.patterns_ = pats

    def transform(self, X):
        if not hasattr(self, "patterns_"):
            self._validate_params()
        cache = {}
        out = []
        for activity, tree in check_activity_batch(X):
            routed = route_tree(tree, self.patterns_, cache)
            if routed is not None:
                out.append((activity, routed))
        return out


class ActivityFilter(_Stateless):
    """Drop activities with no interesting node or matching a metadata predicate."""

    def __init__(self, config=None):
        self.config = config

    def transform(self, X):
        cfg = self.config if self.config is not None else FilterConfig()
        return [(a, t) for a, t in check_activity_batch(X) if filter_activity(t, a, cfg)]


class LoopCompressor(_Stateless):
    """Keep the last ``k`` iterations of every loop (``k=None`` keeps all).

    With ``copy=False`` the input trees are compressed in place, which is
    what the extraction pipeline does with the trees it has just built.
    """

    def __init__(self, k=1, copy=True):
        self.k = k
        self.copy = copy

    def _validate_params(self):
        check_positive_or_none(self.k, "k")

    def transform(self, X):
        self._validate_params()
        batch = check_activity_batch(X)
        if self.k is None:
            return batch
        return [(a, loop_compress(t, self.k, copy=self.copy)) for a, t in batch]


class LastKRunsAdmitter(_Stateless):
    """Admit activities holding one of the last ``K`` executions of some interesting query.

    Both passes run over the batch given to ``transform``, so the step is
    stateless and ``fit`` only checks parameters.
    """

    def __init__(self, K=1, keep_context=False):
        self.K = K
        self.keep_context = keep_context

    def _validate_params(self):
        check_positive_or_none(self.K, "K")

    def transform(self, X):
        K = check_positive_or_none(self.K, "K")
        cfg = FilterConfig(keep_context=self.keep_context)
        return admit_last_k_runs(check_activity_batch(X), K, cfg)


def make_filter_pipeline(cfg: FilterConfig, *, copy=True) -> Pipeline:
    """Routing, activity filters, loop compression, then last-K admission.

    Routing always annotates the given trees; ``copy=False`` also lets loop
    compression work in place.
    """
    return Pipeline(
        [
            ("route", QueryRouter(cfg.patterns, cfg.use_builtin_patterns)),
            ("activities", ActivityFilter(cfg)),
            ("loops", LoopCompressor(cfg.loop_iters_admitted, copy=copy)),
            ("last_k", LastKRunsAdmitter(cfg.sp_runs_admitted, cfg.keep_context)),
        ]
    )


# -- extraction ------------------------------------------------------------------------------------


class ProvenanceGraphExtractor(BaseEstimator):
    """Runtime + statement provenance + stitching over a batch of trees.

    ``fit`` folds the catalog through the batch in order and sets ``graph_``,
    ``catalog_`` (state after the batch), ``errors_`` (per-activity
    diagnostics) and ``timings_`` (RInfo / ProvEx / Stitcher seconds).
    ``transform`` extracts further batches starting from ``catalog_``.
    Per-activity failures are recorded and skipped, never raised.
    """

    def __init__(self, catalog=None, binding_mode="state_based", include_control_columns=False,
                 emit_levels=None, aggregate_runs=True, cache=None, hooks=None):
        self.catalog = catalog
        self.binding_mode = binding_mode
        self.include_control_columns = include_control_columns
        self.emit_levels = emit_levels
        self.aggregate_runs = aggregate_runs
        self.cache = cache
        self.hooks = hooks

    def fit(self, X, y=None):
        state = self.catalog if self.catalog is not None else CatalogState()
        if not isinstance(state, CatalogState):
            raise TypeError("catalog must be a CatalogState")
        self.catalog_ = state
        self.errors_ = []
        self.timings_ = {"RInfo": 0.0, "ProvEx": 0.0, "Stitcher": 0.0}
        self.n_activities_ = 0
        self.graph_ = self._extract(X)
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).graph_

    def transform(self, X):
        check_is_fitted(self, "catalog_")
        return self._extract(X)

    def _extract(self, X):
        batch = check_activity_batch(X)
        mode = check_binding_mode(self.binding_mode)
        levels = frozenset(self.emit_levels) if self.emit_levels is not None else ALL_LEVELS
        hooks = self.hooks
        t = self.timings_
        graph = ProvenanceGraph()
        for _, tree in batch:
            try:
                t0 = time.perf_counter()
                rt = extract_runtime(tree, hooks=hooks)
                if hooks is not None:
                    rt = hooks.fire("runtime", "end", rt)
                t1 = time.perf_counter()
                script = generate_script(tree)
                if hooks is not None:
                    script = hooks.fire("provenance", "start", script)
                prov, state = extract_provenance(script, self.catalog_, mode,
                                                 include_control_columns=self.include_control_columns, cache=self.cache)
                if hooks is not None:
                    prov = {nid: p for nid, p in prov.items() if hooks.fire_item("provenance", p) is not None}
                    prov = hooks.fire("provenance", "end", prov)
                t2 = time.perf_counter()
                # The per-activity runtime extract and stitched graph are not kept, so skip the copies.
                g = stitch(rt, prov, tree, hooks=hooks, in_place=True)
                merge_into(graph, g, copy=False)
                t3 = time.perf_counter()
            except ProvenanceError as exc:
                logger.warning("activity %s: %s", tree.activity_id, exc)
                self.errors_.append((tree.activity_id, f"{type(exc).__name__}: {exc}"))
                continue
            self.catalog_ = state
            self.n_activities_ += 1
            t["RInfo"] += t1 - t0
            t["ProvEx"] += t2 - t1
            t["Stitcher"] += t3 - t2
        t0 = time.perf_counter()
        if self.aggregate_runs:
            graph = aggregate_across_runs(graph, copy=False)
        if levels != ALL_LEVELS:
            graph = drop_aggregation_levels(graph, levels)
        t["Stitcher"] += time.perf_counter() - t0
        return graph
