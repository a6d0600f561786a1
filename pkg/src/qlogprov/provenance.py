"""Per-activity SQL script generation and statement-level provenance extraction."""
from __future__ import annotations

import bisect
import logging
import re
from dataclasses import dataclass, field
from typing import Optional

from .analysis import (
    BindingMode,
    Confidence,
    StatementAnalyzer,
    StatementProvenance,
    apply_ddl,
    statement_kind,
)
from .catalog import CatalogState

logger = logging.getLogger(__name__)

ROUTE_FULL = "full"
ROUTE_RUNTIME_ONLY = "runtime_only"
ROUTE_DROP = "drop"


@dataclass(frozen=True, slots=True)
class ScriptStatement:
    node_id: str
    query_text: str
    span: tuple  # (start, end) offsets into SqlScript.text
    analyze: bool = True  # False for containers and runtime-only nodes
    bindings: Optional[dict] = None


@dataclass
class SqlScript:
    statements: list = field(default_factory=list)
    text: str = ""

    def __len__(self):
        return len(self.statements)

    def __iter__(self):
        return iter(self.statements)

    @property
    def node_ids(self):
        return [s.node_id for s in self.statements]

    def locate(self, offset: int) -> Optional[str]:
        """node_id of the statement covering character ``offset``."""
        starts = [s.span[0] for s in self.statements]
        i = bisect.bisect_right(starts, offset) - 1
        if i >= 0:
            st = self.statements[i]
            if st.span[0] <= offset < st.span[1]:
                return st.node_id
        return None


def _is_container(node) -> bool:
    # A batch or EXECUTE with child events: the children carry the statements.
    return bool(node.children)


def generate_script(tree) -> SqlScript:
    """Concatenate node texts in DFS pre-order, remembering where each one lives."""
    statements = []
    parts = []
    pos = 0
    for node in tree.root.iter_preorder():
        text = node.query_text
        if not text:
            continue
        if parts:
            parts.append("\n")
            pos += 1
        start = pos
        parts.append(text)
        pos += len(text)
        route = node.annotations.get("route", ROUTE_FULL)
        bindings = node.started_event.extras.get("bindings") if node.started_event.extras else None
        analyze = route == ROUTE_FULL and not _is_container(node)
        statements.append(ScriptStatement(node.node_id, text, (start, pos), analyze, bindings))
    return SqlScript(statements, "".join(parts))


_BATCH_SPLIT_RE = re.compile(r"'(?:[^']|'')*'|;|\n\s*GO\s*(?:\n|$)", re.IGNORECASE)


def split_batch(text: str) -> list:
    """Split a batch on top-level ``;`` and ``GO`` separators (string literals respected)."""
    pieces = []
    last = 0
    for m in _BATCH_SPLIT_RE.finditer(text):
        if m.group(0).startswith("'"):
            continue
        pieces.append(text[last : m.start()])
        last = m.end()
    pieces.append(text[last:])
    return [p.strip() for p in pieces if p.strip()]


def _union(node_id, results):
    if len(results) == 1:
        p = results[0]
        return StatementProvenance(node_id, p.inputs, p.outputs, p.column_map, p.confidence, p.statement_kind, p.diagnostics)
    inputs, outputs, cmap, diags = set(), set(), {}, []
    confidence = Confidence.EXACT
    for p in results:
        inputs |= p.inputs
        outputs |= p.outputs
        for k, v in p.column_map.items():
            cmap[k] = cmap.get(k, frozenset()) | v
        diags.extend(p.diagnostics)
        if p.confidence is Confidence.SUGGESTED:
            confidence = Confidence.SUGGESTED
    return StatementProvenance(node_id, frozenset(inputs), frozenset(outputs), cmap, confidence, "batch", tuple(diags))


def _ddl_first(text: str) -> bool:
    # CREATE and SELECT INTO are analyzed against the catalog they produce,
    # so a recreated table gets its new generation; everything else sees the
    # catalog as it was before the statement.
    kind = statement_kind(text)
    if kind == "ddl":
        return not re.match(r"\s*DROP\b", text, re.IGNORECASE)
    return kind == "select"


def extract_provenance(
    script: SqlScript,
    catalog: Optional[CatalogState] = None,
    mode: BindingMode = BindingMode.STATE_BASED,
    *,
    include_control_columns: bool = False,
    cache: Optional[dict] = None,
):
    """Fold DDL replay and statement analysis over ``script`` in order.

    Returns ``(provenance_by_node_id, catalog_after)``. Nodes flagged as
    containers or runtime-only are still replayed for DDL but get no entry.

    ``cache`` (optional dict) memoizes analysis results keyed by statement
    text, catalog identity and mode. It is off by default; callers that
    re-extract the same activities under several filter settings can share
    one.
    """
    state = catalog if catalog is not None else CatalogState()
    out = {}
    for st in script.statements:
        texts = split_batch(st.query_text) if st.analyze and st.query_text.count(";") else [st.query_text]
        results = []
        for text in texts:
            ddl_first = _ddl_first(text)
            if ddl_first:
                state = _replay(state, text)
            if st.analyze:
                results.append(_analyze(text, state, mode, st, include_control_columns, cache))
            if not ddl_first:
                state = _replay(state, text)
        if st.analyze and results:
            out[st.node_id] = _union(st.node_id, results)
    return out, state


def _replay(state, text):
    diags = []
    new_state = apply_ddl(state, text, diagnostics=diags)
    if diags:
        logger.debug("catalog replay: %s", diags[0])
    return new_state


def _analyze(text, state, mode, st, include_control, cache):
    if cache is None or st.bindings:
        analyzer = StatementAnalyzer(state, mode, bindings=st.bindings, include_control_columns=include_control)
        return analyzer(text, st.node_id)
    key = (text, id(state), mode, include_control)
    hit = cache.get(key)
    if hit is None or hit[0] is not state:
        analyzer = StatementAnalyzer(state, mode, include_control_columns=include_control)
        hit = (state, analyzer(text, ""))
        cache[key] = hit
    p = hit[1]
    return StatementProvenance(st.node_id, p.inputs, p.outputs, p.column_map, p.confidence, p.statement_kind, p.diagnostics)


def extract_tree_provenance(tree, catalog=None, mode=BindingMode.STATE_BASED, **kwargs):
    """Convenience wrapper: ``generate_script`` then ``extract_provenance``."""
    return extract_provenance(generate_script(tree), catalog, mode, **kwargs)
