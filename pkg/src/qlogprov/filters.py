"""Noise reduction over events, activities, QQTrees and graphs.

Functions here are plain transformations; :mod:`qlogprov.estimators` wraps
the stateful ones (last-K admission, query routing) as fit/transform objects
and :mod:`qlogprov.pipeline` installs them at their hook points.
"""
from __future__ import annotations

import ast
import functools
import logging
import re
from collections import defaultdict, deque
from operator import eq
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .analysis import accesses_datasets, procedure_name, statement_kind
from .collector import QQTree, QQTreeNode
from .errors import ConfigError
from .events import METADATA_COUNTERS, METADATA_STRINGS, EventKind, serialize_event
from .graph import ALL_LEVELS, LEVEL_TYPES, EntityType, ProvenanceGraph, RelationshipType, normalize_query_text, text_identity
from .provenance import ROUTE_DROP, ROUTE_FULL, ROUTE_RUNTIME_ONLY

logger = logging.getLogger(__name__)

ROUTES = (ROUTE_DROP, ROUTE_RUNTIME_ONLY, ROUTE_FULL)
PATTERN_KINDS = ("type", "syntax_template", "regex", "no_dataset_access")
MAX_LOOP_PERIOD = 32


# -- query patterns ---------------------------------------------------------------


def template_to_regex(template: str) -> str:
    """Translate a syntax template into an anchored regex.

    ``...`` matches any text, ``*`` matches one token, whitespace matches any
    run of whitespace, everything else is literal (case-insensitive).
    """
    out = []
    i = 0
    while i < len(template):
        if template.startswith("...", i):
            out.append(".*?")
            i += 3
        elif template[i] == "*":
            out.append(r"[^\s()]+")
            i += 1
        elif template[i].isspace():
            while i < len(template) and template[i].isspace():
                i += 1
            out.append(r"\s*" if out and out[-1] in (r"\(", r"\)") else r"\s+")
        else:
            out.append(re.escape(template[i]))
            i += 1
    return r"^\s*" + "".join(out) + r"\s*;?\s*$"


_LEADING_WORD = re.compile(r"\s*([A-Za-z_]+)")


@dataclass(frozen=True)
class QueryPattern:
    kind: str
    pattern: str = ""
    route: str = ROUTE_DROP
    group: str = ""

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ConfigError(f"unknown pattern kind {self.kind!r}")
        if self.route not in (ROUTE_DROP, ROUTE_RUNTIME_ONLY):
            raise ConfigError(f"pattern route must be drop or runtime_only, not {self.route!r}")
        if self.kind in ("regex", "syntax_template"):
            try:
                self.compiled()
            except re.error as exc:
                raise ConfigError(f"bad pattern {self.pattern!r}: {exc}") from None

    def compiled(self):
        rx = _REGEX_CACHE.get((self.kind, self.pattern))
        if rx is None:
            source = template_to_regex(self.pattern) if self.kind == "syntax_template" else self.pattern
            rx = re.compile(source, re.IGNORECASE | re.DOTALL)
            _REGEX_CACHE[(self.kind, self.pattern)] = rx
        return rx

    def matches(self, text: str) -> bool:
        if self.kind == "regex":
            return self.compiled().search(text) is not None
        if self.kind == "syntax_template":
            return self.compiled().match(text) is not None
        if self.kind == "type":
            want = self.pattern.casefold()
            if statement_kind(text) == want:
                return True
            m = _LEADING_WORD.match(text)
            return m is not None and m.group(1).casefold() == want
        return not accesses_datasets(text)

    def to_dict(self):
        d = {"kind": self.kind, "pattern": self.pattern, "route": self.route}
        if self.group:
            d["group"] = self.group
        return d


_REGEX_CACHE = {}


def load_builtin_patterns() -> list:
    data = resources.files("qlogprov").joinpath("data/builtin_patterns.toml").read_text(encoding="utf-8")
    doc = tomllib.loads(data)
    return [QueryPattern(p["kind"], p.get("pattern", ""), p.get("route", ROUTE_DROP), p.get("group", "")) for p in doc["pattern"]]


# -- metadata predicates ------------------------------------------------------------

_PRED_FIELDS = frozenset(METADATA_STRINGS + METADATA_COUNTERS) | {"query_text", "kind", "class", "ts"}
_SQL_TOKENS = re.compile(r"'(?:[^']|'')*'|<>|!=|<=|>=|=|\bAND\b|\bOR\b|\bNOT\b|\bIN\b", re.IGNORECASE)
_CMP = {
    ast.Eq: lambda a, b: a == b,
    ast.NotEq: lambda a, b: a != b,
    ast.Lt: lambda a, b: a < b,
    ast.LtE: lambda a, b: a <= b,
    ast.Gt: lambda a, b: a > b,
    ast.GtE: lambda a, b: a >= b,
    ast.In: lambda a, b: a in b,
    ast.NotIn: lambda a, b: a not in b,
}


def _sql_to_python(expr: str) -> str:
    def repl(m):
        tok = m.group(0)
        up = tok.upper()
        if tok.startswith("'"):
            return repr(tok[1:-1].replace("''", "'"))
        return {"=": "==", "<>": "!=", "AND": " and ", "OR": " or ", "NOT": " not ", "IN": " in "}.get(up, tok)

    return _SQL_TOKENS.sub(repl, expr)


class _Evaluator:
    def __init__(self, tree):
        self.tree = tree
        self._check(tree.body)

    def _check(self, node):
        if isinstance(node, ast.BoolOp) and isinstance(node.op, (ast.And, ast.Or)):
            for v in node.values:
                self._check(v)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
            self._check(node.operand)
        elif isinstance(node, ast.Compare):
            if not all(type(op) in _CMP for op in node.ops):
                raise ConfigError("unsupported comparison in metadata predicate")
            for v in [node.left, *node.comparators]:
                self._check(v)
        elif isinstance(node, ast.Name):
            if node.id not in _PRED_FIELDS:
                raise ConfigError(f"unknown metadata field {node.id!r}")
        elif isinstance(node, (ast.Tuple, ast.List)):
            for v in node.elts:
                self._check(v)
        elif not isinstance(node, ast.Constant):
            raise ConfigError(f"unsupported syntax in metadata predicate: {type(node).__name__}")

    def __call__(self, values: dict) -> bool:
        return bool(self._eval(self.tree.body, values))

    def _eval(self, node, values):
        if isinstance(node, ast.BoolOp):
            if isinstance(node.op, ast.And):
                return all(self._eval(v, values) for v in node.values)
            return any(self._eval(v, values) for v in node.values)
        if isinstance(node, ast.UnaryOp):
            return not self._eval(node.operand, values)
        if isinstance(node, ast.Compare):
            left = self._eval(node.left, values)
            for op, right_node in zip(node.ops, node.comparators):
                right = self._eval(right_node, values)
                if left is None or right is None:
                    return False
                try:
                    if not _CMP[type(op)](left, right):
                        return False
                except TypeError:
                    return False
                left = right
            return True
        if isinstance(node, ast.Name):
            return values.get(node.id)
        if isinstance(node, (ast.Tuple, ast.List)):
            return tuple(self._eval(v, values) for v in node.elts)
        return node.value


@dataclass(frozen=True)
class MetadataPredicate:
    """Boolean condition over event metadata that, when it holds, drops the activity.

    ``expression`` uses SQL-ish syntax (``=``, ``<>``, ``AND``, ``OR``,
    ``NOT``, ``IN``). With ``scope="any"`` the activity is dropped when some
    selected event satisfies it; with ``scope="all"`` when every selected
    event does. ``events`` selects all events or only completed ones.
    """

    expression: str
    scope: str = "any"
    events: str = "all"

    def __post_init__(self):
        if self.scope not in ("any", "all"):
            raise ConfigError(f"predicate scope must be any or all, not {self.scope!r}")
        if self.events not in ("all", "completed"):
            raise ConfigError(f"predicate events must be all or completed, not {self.events!r}")
        self.evaluator()

    def evaluator(self):
        ev = _PRED_CACHE.get(self.expression)
        if ev is None:
            try:
                tree = ast.parse(_sql_to_python(self.expression).strip(), mode="eval")
            except SyntaxError as exc:
                raise ConfigError(f"cannot parse predicate {self.expression!r}: {exc.msg}") from None
            ev = _Evaluator(tree)
            _PRED_CACHE[self.expression] = ev
        return ev

    def holds(self, events) -> bool:
        ev = self.evaluator()
        selected = [e for e in events if self.events == "all" or e.kind is EventKind.COMPLETED]
        if not selected:
            return False
        results = (ev(_event_values(e)) for e in selected)
        return any(results) if self.scope == "any" else all(results)

    def to_dict(self):
        return {"expression": self.expression, "scope": self.scope, "events": self.events}


_PRED_CACHE = {}


def _event_values(e):
    m = e.metadata
    values = {k: getattr(m, k) for k in METADATA_STRINGS + METADATA_COUNTERS}
    values.update(query_text=e.query_text, kind=e.kind.value, ts=e.timestamp)
    values["class"] = e.event_class.value
    return values


# -- configuration ------------------------------------------------------------------------


@dataclass
class FilterConfig:
    loop_iters_admitted: Optional[int] = 1  # k; None = keep every iteration
    sp_runs_admitted: Optional[int] = 1  # K; None = admit every run
    patterns: list = field(default_factory=list)
    use_builtin_patterns: bool = True
    metadata_predicates: list = field(default_factory=list)
    required_statement_kinds: list = field(default_factory=list)
    keep_context: bool = False
    emit_levels: frozenset = ALL_LEVELS
    drop_events_buffer: Optional[int] = None

    def __post_init__(self):
        for name in ("loop_iters_admitted", "sp_runs_admitted"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ConfigError(f"{name} must be >= 1 or unbounded, got {value!r}")
        self.emit_levels = frozenset(self.emit_levels)
        if not self.emit_levels:
            raise ConfigError("emit_levels must not be empty")
        unknown = self.emit_levels - ALL_LEVELS
        if unknown:
            raise ConfigError(f"unknown aggregation level(s) {sorted(unknown)}")
        self.patterns = [p if isinstance(p, QueryPattern) else QueryPattern(**p) for p in self.patterns]
        self.metadata_predicates = [
            p if isinstance(p, MetadataPredicate) else (MetadataPredicate(p) if isinstance(p, str) else MetadataPredicate(**p))
            for p in self.metadata_predicates
        ]
        if self.drop_events_buffer is not None and self.drop_events_buffer < 1:
            raise ConfigError("drop_events_buffer must be >= 1")

    @classmethod
    def unfiltered(cls):
        """Everything admitted, no patterns: the lossless reference profile."""
        return cls(loop_iters_admitted=None, sp_runs_admitted=None, use_builtin_patterns=False)

    def all_patterns(self):
        if self.use_builtin_patterns:
            return list(self.patterns) + _builtin()
        return list(self.patterns)


_BUILTIN = []


def _builtin():
    if not _BUILTIN:
        _BUILTIN.extend(load_builtin_patterns())
    return _BUILTIN


# -- routing -----------------------------------------------------------------------------


def route_query(stmt: str, patterns) -> str:
    for p in patterns:
        if p.matches(stmt):
            return p.route
    return ROUTE_FULL


def is_interesting_query(stmt: str, cfg: FilterConfig):
    """``(interesting, route)`` for one statement; the first matching pattern decides."""
    route = route_query(stmt, cfg.all_patterns())
    return route == ROUTE_FULL, route


def route_tree(tree: QQTree, patterns, cache=None) -> Optional[QQTree]:
    """Annotate every node with its route and cut ``drop`` subtrees. Returns None if the root is dropped."""
    if cache is None:
        cache = {}
    nodes = list(tree.root.iter_preorder())
    for node in nodes:
        text = node.query_text
        route = cache.get(text)
        if route is None:
            route = route_query(text, patterns)
            cache[text] = route
        node.annotations["route"] = route
    if tree.root.annotations["route"] == ROUTE_DROP:
        return None
    for node in nodes:
        if node.children and any(c.annotations["route"] == ROUTE_DROP for c in node.children):
            node.children = [c for c in node.children if c.annotations["route"] != ROUTE_DROP]
    return tree


def filter_activity(tree: QQTree, activity, cfg: FilterConfig) -> bool:
    """True to keep the activity.

    Dropped when no node is routed ``full``, when a metadata predicate holds,
    or when required statement kinds are configured and none occurs.
    """
    nodes = list(tree.root.iter_preorder())
    routes = [n.annotations.get("route") for n in nodes]
    if any(r is None for r in routes):
        patterns = cfg.all_patterns()
        routes = [r if r is not None else route_query(n.query_text, patterns) for n, r in zip(nodes, routes)]
    if ROUTE_FULL not in routes:
        return False
    events = activity.events if activity is not None else [e for n in nodes for e in (n.started_event, n.completed_event) if e]
    for pred in cfg.metadata_predicates:
        if pred.holds(events):
            return False
    if cfg.required_statement_kinds:
        wanted = {k.casefold() for k in cfg.required_statement_kinds}
        if not any(statement_kind(n.query_text) in wanted for n in nodes):
            return False
    return True


# -- loop compression ---------------------------------------------------------------------

_LITERAL_RE = re.compile(r"'(?:[^']|'')*'|\b\d+(?:\.\d+)?\b")


@functools.lru_cache(maxsize=1 << 16)
def loop_key(text: str) -> str:
    """Normalized query text with literals masked; iterations of one loop share it."""
    return normalize_query_text(_LITERAL_RE.sub("?", text))


_RUN_RE = re.compile(rb"\x01+")


def _best_cycle(keys, k, max_period):
    """(start, period, reps) of the repetition with the largest coverage and reps > k, or None."""
    n = len(keys)
    if len(set(keys)) == n:
        return None
    best = None
    for p in range(1, min(max_period, n // 2) + 1):
        # Runs of keys[i] == keys[i + p]; a run of c matches starting at i is
        # a repetition of period p covering c + p elements.
        mask = bytes(map(eq, keys, keys[p:]))
        for m in _RUN_RE.finditer(mask):
            i, c = m.start(), m.end() - m.start()
            reps = (c + p) // p
            if reps > k:
                cand = (reps * p, -p, -i)
                if best is None or cand > best[0]:
                    best = (cand, i, p, reps)
    if best is None:
        return None
    return best[1], best[2], best[3]


def compress_sequence(keys, k, max_period=MAX_LOOP_PERIOD):
    """Indices to keep and the per-index iteration count after loop compression.

    Repeats until no cycle with more than ``k`` repetitions remains, so the
    result is a fixpoint and compressing it again changes nothing.
    """
    idx = list(range(len(keys)))
    counts = {}
    cur = list(keys)
    while True:
        found = _best_cycle(cur, k, max_period)
        if found is None:
            break
        start, p, reps = found
        drop_upto = start + (reps - k) * p
        kept_idx = idx[drop_upto : start + reps * p]
        for j in kept_idx:
            counts[j] = max(counts.get(j, 1), reps)
        idx = idx[:start] + kept_idx + idx[start + reps * p :]
        cur = cur[:start] + cur[drop_upto : start + reps * p] + cur[start + reps * p :]
    return idx, counts


def _clone(node, parent=None):
    copy = QQTreeNode(node.started_event, parent, node.node_id)
    copy.completed_event = node.completed_event
    copy.plan_payload = node.plan_payload
    copy.annotations = dict(node.annotations)
    return copy


def clone_tree(tree: QQTree) -> QQTree:
    root = _clone(tree.root)
    stack = [(tree.root, root)]
    while stack:
        src, dst = stack.pop()
        for c in src.children:
            cc = _clone(c, dst)
            dst.children.append(cc)
            stack.append((c, cc))
    return QQTree(tree.activity_id, root)


def loop_compress(tree: QQTree, k: Optional[int], *, copy=True, max_period=MAX_LOOP_PERIOD) -> QQTree:
    """Keep only the last ``k`` iterations of every detected loop among siblings."""
    if k is None:
        return tree
    if k < 1:
        raise ValueError("k must be >= 1")
    t = clone_tree(tree) if copy else tree
    for node in t.root.iter_preorder():
        kids = node.children
        if len(kids) < 2:
            continue
        keys = [loop_key(c.query_text) for c in kids]
        keep, counts = compress_sequence(keys, k, max_period)
        if len(keep) == len(kids):
            continue
        new_kids = []
        for i in keep:
            c = kids[i]
            if i in counts:
                c.annotations["compressed_iterations"] = max(c.annotations.get("compressed_iterations", 1), counts[i])
            new_kids.append(c)
        node.children = new_kids
    return t


# -- last-K admission -------------------------------------------------------------------------


def executions(tree: QQTree):
    """(identity, node) pairs for the interesting executions in ``tree``.

    Each EXECUTE of a stored procedure is one execution of that procedure.
    A tree without any EXECUTE counts as one execution of its root query.
    """
    out = []
    for node in tree.root.iter_preorder():
        if node.annotations.get("route") == ROUTE_DROP:
            continue
        proc = procedure_name(node.query_text)
        if proc is not None:
            out.append((f"proc:{proc[0]}.{proc[1]}".casefold(), node))
    if not out:
        out.append((f"query:{text_identity(tree.root.query_text)}", tree.root))
    return out


def _tie_key(tree, node):
    return (node.started_event.timestamp, node.started_event.seq)


def last_k_index(batch, K, *, execs=None):
    """Pass 1: per identity, the keys of its last ``K`` executions in the batch.

    ``execs`` may hold ``executions(tree)`` for every batch entry, in order.
    """
    if execs is None:
        execs = [executions(tree) for _, tree in batch]
    per_identity = defaultdict(list)
    for pos, ((_, tree), tree_execs) in enumerate(zip(batch, execs)):
        for identity, node in tree_execs:
            per_identity[identity].append((_tie_key(tree, node), pos, node.node_id))
    latest = {}
    for identity, runs in per_identity.items():
        runs.sort()
        latest[identity] = {(pos, nid) for _, pos, nid in runs[-K:]}
    return latest


def admit_last_k_runs(batch, K: Optional[int], cfg: Optional[FilterConfig] = None, *, index=None):
    """Keep activities holding one of the last ``K`` executions of some interesting query.

    With ``keep_context`` false, stale executions inside kept activities are
    pruned (never the root).
    """
    if K is None:
        return list(batch)
    batch = list(batch)
    keep_context = cfg.keep_context if cfg is not None else False
    all_execs = [executions(tree) for _, tree in batch]
    latest = index if index is not None else last_k_index(batch, K, execs=all_execs)
    fresh = set()
    for keys in latest.values():
        fresh |= keys
    out = []
    for pos, ((activity, tree), execs) in enumerate(zip(batch, all_execs)):
        if not any((pos, node.node_id) in fresh for _, node in execs):
            continue
        if not keep_context:
            stale = {node.node_id for _, node in execs if (pos, node.node_id) not in fresh and node is not tree.root}
            if stale:
                tree = clone_tree(tree)
                for node in tree.root.iter_preorder():
                    if node.children:
                        node.children = [c for c in node.children if c.node_id not in stale]
        out.append((activity, tree))
    return out


# -- aggregation levels -----------------------------------------------------------------------


def drop_aggregation_levels(g: ProvenanceGraph, levels) -> ProvenanceGraph:
    """Remove run/static entities of levels not in ``levels``.

    SpawnedBy links of retained runs are re-pointed to their nearest retained
    ancestor; datasets, columns and connections no longer referenced by any
    retained process are removed too.
    """
    levels = frozenset(levels)
    unknown = levels - ALL_LEVELS
    if unknown:
        raise ConfigError(f"unknown aggregation level(s) {sorted(unknown)}")
    if levels == ALL_LEVELS:
        return g.copy()
    excluded = set()
    for level in ALL_LEVELS - levels:
        excluded |= LEVEL_TYPES[level]
    drop = {guid for guid, e in g.entities.items() if e.type in excluded}
    parent = {a: b for t, a, b in g.relationships if t is RelationshipType.SPAWNED_BY}

    out = ProvenanceGraph()
    for guid, e in g.entities.items():
        if guid not in drop:
            out.add_entity(e.copy())
    for t, a, b in g.relationships:
        if a in drop or b in drop:
            continue
        if t is RelationshipType.SPAWNED_BY:
            continue
        out.relationships.add((t, a, b))
    for child, par in parent.items():
        if child in drop:
            continue
        seen = set()
        while par is not None and par in drop and par not in seen:
            seen.add(par)
            par = parent.get(par)
        if par is not None:
            out.relationships.add((RelationshipType.SPAWNED_BY, child, par))
    _prune_orphans(out)
    return out


def _prune_orphans(g: ProvenanceGraph):
    used_rel = set()
    used_conn = set()
    for t, a, b in g.relationships:
        if t is RelationshipType.INPUT:
            used_rel.add(a)
        elif t is RelationshipType.OUTPUT:
            used_rel.add(b)
        elif t is RelationshipType.CONNECTION_OF:
            used_conn.add(b)
    used_cols = set()
    for e in g.entities.values():
        if e.column_mapping:
            for out_col, in_cols in e.column_mapping.items():
                used_cols.add(out_col)
                used_cols.update(in_cols)
    orphans = []
    for guid, e in g.entities.items():
        if e.type.is_relation and guid not in used_rel:
            orphans.append(guid)
        elif e.type is EntityType.COLUMN and e.qualified_name not in used_cols:
            orphans.append(guid)
        elif e.type is EntityType.CLIENT_CONNECTION and guid not in used_conn:
            orphans.append(guid)
    if orphans:
        g.remove_entities(orphans)


# -- event dropping (generator side) ----------------------------------------------------------


@dataclass
class RetentionStats:
    offered: int = 0
    dropped: int = 0
    offered_bytes: int = 0
    dropped_bytes: int = 0

    @property
    def drop_fraction(self):
        return self.dropped / self.offered if self.offered else 0.0


def drop_events_retention(events, buffer_size: int, drain_bytes_per_sec: float, *, stats: Optional[RetentionStats] = None):
    """Simulate a bounded in-server event buffer that drops its oldest events on overflow.

    Events enter at their timestamps with their serialized size; the buffer
    drains to storage at ``drain_bytes_per_sec``. Yields surviving events in
    order.
    """
    if buffer_size < 1:
        raise ValueError("buffer_size must be >= 1")
    if drain_bytes_per_sec <= 0:
        raise ValueError("drain rate must be positive")
    st = stats if stats is not None else RetentionStats()
    buf = deque()
    level = 0
    credit = 0.0
    last_ts = None
    for e in events:
        size = len(serialize_event(e).encode("utf-8")) + 1
        st.offered += 1
        st.offered_bytes += size
        if last_ts is not None and e.timestamp > last_ts:
            credit += (e.timestamp - last_ts) * drain_bytes_per_sec / 1e6
        last_ts = e.timestamp if last_ts is None else max(last_ts, e.timestamp)
        while buf and buf[0][1] <= credit:
            ev, sz = buf.popleft()
            credit -= sz
            level -= sz
            yield ev
        if not buf:
            credit = min(credit, float(buffer_size))
        if size > buffer_size:
            st.dropped += 1
            st.dropped_bytes += size
            continue
        while level + size > buffer_size:
            _, sz = buf.popleft()
            level -= sz
            st.dropped += 1
            st.dropped_bytes += sz
        buf.append((e, size))
        level += size
    while buf:
        yield buf.popleft()[0]
