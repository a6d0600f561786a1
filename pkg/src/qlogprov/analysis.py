"""Static analysis of single T-SQL statements into relation- and column-level lineage.

Parsing is delegated to sqlglot (tsql dialect). Everything after the parse
tree is local: control-flow stripping, name binding against a
:class:`~qlogprov.catalog.CatalogState`, scope resolution, view expansion
and the per-statement-kind input/output rules.
"""
from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Optional

import sqlglot
from sqlglot import exp
from sqlglot.errors import ParseError, TokenError

from .catalog import DEFAULT_SCHEMA, CatalogObject, CatalogState, object_key
from .graph import text_identity

logger = logging.getLogger(__name__)

MAX_EXPANSION_DEPTH = 16
OUTPUT_SCHEMA = "$output"


class BindingMode(enum.Enum):
    PRE_BOUND = "pre_bound"
    STATE_BASED = "state_based"
    BEST_EFFORT = "best_effort"


class Confidence(enum.Enum):
    EXACT = "exact"
    SUGGESTED = "suggested"


@dataclass(frozen=True, slots=True)
class RelationRef:
    schema: str
    name: str
    kind: str = "table"  # table | view | external | output
    generation: int = 1

    @property
    def key(self):
        return object_key(self.schema, self.name) if self.kind != "external" else f"file:{self.name}"

    def __str__(self):
        base = self.name if self.kind == "external" else f"{self.schema}.{self.name}"
        return base if self.generation <= 1 else f"{base}@{self.generation}"


@dataclass(frozen=True, slots=True)
class ColumnRef:
    relation: RelationRef
    column: str

    def __str__(self):
        return f"{self.relation}.{self.column}"


@dataclass
class StatementProvenance:
    node_id: str
    inputs: frozenset = frozenset()
    outputs: frozenset = frozenset()
    column_map: dict = field(default_factory=dict)  # ColumnRef -> frozenset[ColumnRef]
    confidence: Confidence = Confidence.EXACT
    statement_kind: str = ""
    diagnostics: tuple = ()

    @property
    def is_empty(self):
        return not self.inputs and not self.outputs

    def relation_names(self):
        """``({input names}, {output names})`` ignoring generations; used for comparisons."""
        return ({f"{r.schema}.{r.name}" if r.kind != "external" else r.name for r in self.inputs},
                {f"{r.schema}.{r.name}" if r.kind != "external" else r.name for r in self.outputs})


# -- text preparation -----------------------------------------------------------

_STATEMENT_STARTERS = frozenset(
    """INSERT UPDATE DELETE SELECT MERGE BULK EXEC EXECUTE CREATE DROP ALTER SET TRUNCATE
    BEGIN RETURN PRINT DECLARE WITH IF WHILE RAISERROR THROW BREAK CONTINUE COMMIT ROLLBACK""".split()
)
_NOOP_STARTERS = frozenset(
    """SET DECLARE PRINT RETURN USE GO COMMIT ROLLBACK SAVE RAISERROR THROW WAITFOR BREAK CONTINUE
    OPEN CLOSE FETCH DEALLOCATE GRANT REVOKE DENY""".split()
)
_WORD_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_BEGIN_BLOCK_RE = re.compile(r"^BEGIN(\s+TRY)?\b(?!\s+(TRAN|TRANSACTION|DISTRIBUTED)\b)", re.IGNORECASE)
_END_BLOCK_RE = re.compile(r"\bEND(\s+TRY)?\s*;?\s*$", re.IGNORECASE)
_FROM_TABLE_RE = re.compile(r"\bFROM\s+TABLE\s+", re.IGNORECASE)
_DELETE_FROM_FROM_RE = re.compile(r"^DELETE\s+FROM\s+((?:\[[^\]]+\]|[\w#@$]+)(?:\.(?:\[[^\]]+\]|[\w#@$]+))*)\s+FROM\b", re.IGNORECASE)
_NAME = r"((?:\[[^\]]+\]|[\w#@$]+)(?:\s*\.\s*(?:\[[^\]]+\]|[\w#@$]+)){0,3})"
_BULK_RE = re.compile(r"^BULK\s+INSERT\s+" + _NAME + r"\s+FROM\s+'((?:[^']|'')*)'", re.IGNORECASE | re.DOTALL)
_CREATE_PROC_RE = re.compile(
    r"^(?:CREATE|ALTER|CREATE\s+OR\s+ALTER)\s+(PROC|PROCEDURE|FUNCTION|TRIGGER)\s+" + _NAME, re.IGNORECASE
)
_CREATE_VIEW_RE = re.compile(
    r"^(?:CREATE|ALTER|CREATE\s+OR\s+ALTER)\s+VIEW\s+" + _NAME + r"\s*(\([^)]*\))?\s+AS\s+(.*)$",
    re.IGNORECASE | re.DOTALL,
)
_EXEC_RE = re.compile(r"^EXEC(?:UTE)?\s+(?:@[\w]+\s*=\s*)?" + _NAME, re.IGNORECASE)
_EXEC_DYNAMIC_RE = re.compile(r"^EXEC(?:UTE)?\s*\(", re.IGNORECASE)
_TRUNCATE_RE = re.compile(r"^TRUNCATE\s+TABLE\s+" + _NAME, re.IGNORECASE)
_SELECT_INTO_RE = re.compile(r"^(WITH\b.*?\)\s*)?SELECT\b.*\bINTO\b", re.IGNORECASE | re.DOTALL)


def strip_comments(text: str) -> str:
    if "--" not in text and "/*" not in text:
        return text
    out = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "'":
            j = i + 1
            while j < n:
                if text[j] == "'":
                    if j + 1 < n and text[j + 1] == "'":
                        j += 2
                        continue
                    break
                j += 1
            out.append(text[i : j + 1])
            i = j + 1
        elif text.startswith("--", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
            out.append(" ")
        elif text.startswith("/*", i):
            j = text.find("*/", i + 2)
            i = n if j < 0 else j + 2
            out.append(" ")
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _split_condition(text: str) -> str:
    """Return what follows an IF/WHILE condition (``text`` starts right after the keyword)."""
    depth = 0
    i, n = 0, len(text)
    seen_token = False
    while i < n:
        ch = text[i]
        if ch == "'":
            j = i + 1
            while j < n and not (text[j] == "'" and (j + 1 >= n or text[j + 1] != "'")):
                j += 2 if text[j] == "'" else 1
            i = j + 1
            seen_token = True
            continue
        if ch == "[":
            j = text.find("]", i)
            i = n if j < 0 else j + 1
            seen_token = True
            continue
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif depth == 0 and (ch.isalpha() or ch == "_") and (i == 0 or not (text[i - 1].isalnum() or text[i - 1] in "_@#$")):
            m = _WORD_RE.match(text, i)
            word = m.group(0).upper()
            if seen_token and word in _STATEMENT_STARTERS and word not in ("SET",) or (seen_token and word == "SET"):
                return text[i:]
            i = m.end()
            seen_token = True
            continue
        if not ch.isspace():
            seen_token = True
        i += 1
    return ""


def _cut_else(text: str) -> str:
    depth = 0
    for m in re.finditer(r"'(?:[^']|'')*'|\[[^\]]*\]|[()]|\bELSE\b", text, re.IGNORECASE):
        tok = m.group(0)
        if tok == "(":
            depth += 1
        elif tok == ")":
            depth -= 1
        elif depth == 0 and tok.upper() == "ELSE":
            return text[: m.start()].rstrip()
    return text


def prepare_statement(text: str) -> str:
    """Strip comments and IF/WHILE/BEGIN wrappers; normalize a few T-SQL spellings."""
    s = strip_comments(text).strip()
    for _ in range(MAX_EXPANSION_DEPTH):
        s = s.strip().rstrip(";").strip()
        head = _WORD_RE.match(s)
        word = head.group(0).upper() if head else ""
        if word in ("IF", "WHILE"):
            s = _cut_else(_split_condition(s[head.end() :]))
            continue
        if word == "BEGIN" and _BEGIN_BLOCK_RE.match(s):
            body = _BEGIN_BLOCK_RE.sub("", s, count=1)
            s = _END_BLOCK_RE.sub("", body, count=1)
            continue
        break
    s = _FROM_TABLE_RE.sub("FROM ", s)
    s = _DELETE_FROM_FROM_RE.sub(r"DELETE \1 FROM", s)
    return s


def _split_name(raw: str):
    parts = [p.strip().strip("[]") for p in re.split(r"\s*\.\s*", raw.strip())]
    name = parts[-1]
    schema = parts[-2] if len(parts) >= 2 and parts[-2] else None
    return schema, name


def statement_kind(text: str) -> str:
    """Coarse statement type used by filters and routing (cheap, no parse)."""
    s = prepare_statement(text)
    if not s:
        return "control"
    head = _WORD_RE.match(s)
    if head is None:
        return "other"
    word = head.group(0).upper()
    if word in ("CREATE", "ALTER", "DROP", "TRUNCATE"):
        return "ddl"
    if word in ("EXEC", "EXECUTE"):
        return "exec"
    if word == "BULK":
        return "bulk_insert"
    if word == "BEGIN":
        return "noop"
    if word in _NOOP_STARTERS:
        return "noop" if word != "SET" else "set"
    if word == "WITH":
        m = re.search(r"\)\s*(SELECT|INSERT|UPDATE|DELETE|MERGE)\b", s, re.IGNORECASE)
        return m.group(1).lower() if m else "select"
    return word.lower()


_NO_DATASET_KINDS = frozenset({"control", "noop", "set", "exec"})


def accesses_datasets(text: str) -> bool:
    """Heuristic check whether a statement can read or write a table.

    Statement kinds that never touch datasets (SET without a subquery,
    DECLARE, control-only text, ...) return False, as do SELECTs with no FROM
    or INTO clause.
    """
    kind = statement_kind(text)
    if kind in _NO_DATASET_KINDS:
        if kind in ("set", "noop") and re.search(r"\bFROM\b", text, re.IGNORECASE):
            return True
        return False
    if kind == "select":
        return bool(re.search(r"\b(FROM|INTO)\b", text, re.IGNORECASE))
    return True


def procedure_name(text: str):
    """``(schema, name)`` of the procedure invoked by an EXECUTE statement, else None."""
    s = strip_comments(text).strip()
    if _EXEC_DYNAMIC_RE.match(s):
        return None
    m = _EXEC_RE.match(s)
    if not m:
        return None
    schema, name = _split_name(m.group(1))
    if name.startswith("@"):
        return None
    return (schema or DEFAULT_SCHEMA, name)


# -- binding ----------------------------------------------------------------------


def _binding_objects(bindings):
    out = {}
    for raw_name, spec in (bindings or {}).items():
        schema, name = _split_name(raw_name)
        cols = spec.get("columns", ()) if isinstance(spec, dict) else spec
        kind = spec.get("kind", "table") if isinstance(spec, dict) else "table"
        gen = int(spec.get("generation", 1)) if isinstance(spec, dict) else 1
        obj = CatalogObject(schema or DEFAULT_SCHEMA, name, kind, gen, tuple((c, "") for c in cols))
        out[obj.key] = obj
    return out


class Binder:
    """Resolves object names according to the binding mode chain
    (pre-bound annotations, then catalog state, then nothing)."""

    def __init__(self, catalog: Optional[CatalogState], mode: BindingMode, bindings=None):
        self.catalog = catalog
        self.mode = mode
        self.bindings = _binding_objects(bindings) if mode is BindingMode.PRE_BOUND else {}

    def lookup(self, schema, name) -> Optional[CatalogObject]:
        if self.bindings:
            obj = self.bindings.get(object_key(schema, name))
            if obj is not None:
                return obj
        if self.mode is BindingMode.BEST_EFFORT or self.catalog is None:
            return None
        return self.catalog.lookup(schema, name)

    def generation_for(self, schema, name) -> int:
        obj = self.lookup(schema, name)
        if obj is not None:
            return obj.generation
        if self.catalog is not None and self.mode is not BindingMode.BEST_EFFORT:
            rec = self.catalog.record(schema, name)
            if rec is not None:
                return rec.generation
        return 1


# -- scope model -----------------------------------------------------------------


class _Source:
    __slots__ = ("alias", "relation", "columns", "derived", "relations")

    def __init__(self, alias, relation=None, columns=None, derived=None, relations=()):
        self.alias = alias
        self.relation = relation  # RelationRef or None for derived tables
        self.columns = columns  # list of names when known
        self.derived = derived  # _SelectResult for derived tables / views
        self.relations = set(relations)

    def known_columns(self):
        if self.derived is not None:
            return [n for n, _ in self.derived.columns if n] if self.derived.complete else None
        return self.columns

    def has_column(self, name):
        cols = self.known_columns()
        return cols is not None and any(c.casefold() == name.casefold() for c in cols)

    def resolve(self, name):
        """Lineage of column ``name`` of this source, or None when unknown."""
        if self.derived is not None:
            for n, refs in self.derived.columns:
                if n and n.casefold() == name.casefold():
                    return set(refs)
            return None
        if self.columns is not None:
            for c in self.columns:
                if c.casefold() == name.casefold():
                    return {ColumnRef(self.relation, c)}
            return None
        return {ColumnRef(self.relation, name)}


@dataclass
class _SelectResult:
    columns: list = field(default_factory=list)  # [(name | None, set[ColumnRef])]
    relations: set = field(default_factory=set)
    control: set = field(default_factory=set)
    complete: bool = True
    assigns_variables: bool = False

    def all_refs(self):
        out = set()
        for _, refs in self.columns:
            out |= refs
        return out


def _arg(node, name):
    value = node.args.get(name + "_")
    if value is None:
        value = node.args.get(name)
    return value


def _joins_of(node):
    """Joins of a statement, wherever the parser hung them."""
    joins = list(node.args.get("joins") or ())
    frm = _arg(node, "from")
    if frm is not None and frm.this is not None:
        joins.extend(frm.this.args.get("joins") or ())
    return joins


def _table_name(table: exp.Table):
    ident = table.this
    name = ident.name if isinstance(ident, exp.Identifier) else table.name
    if isinstance(ident, exp.Identifier) and ident.args.get("temporary"):
        name = "#" + name
    schema = table.db or None
    return schema, name


class _Analyzer:
    def __init__(self, binder: Binder, include_control=False, depth=0):
        self.binder = binder
        self.include_control = include_control
        self.depth = depth
        self.unresolved = False
        self.diagnostics = []
        self.scopes = []  # stack of lists of _Source, for correlated references

    def note(self, message):
        self.unresolved = True
        self.diagnostics.append(message)

    # relations --------------------------------------------------------------
    def bind_relation(self, schema, name):
        obj = self.binder.lookup(schema, name)
        if obj is None:
            gen = self.binder.generation_for(schema, name)
            return RelationRef(schema or DEFAULT_SCHEMA, name, "table", gen), None
        kind = "view" if obj.kind == "view" else "table"
        return RelationRef(obj.schema, obj.name, kind, obj.generation), obj

    def table_source(self, table: exp.Table, ctes):
        schema, name = _table_name(table)
        alias = table.alias_or_name
        if schema is None and name.casefold() in ctes:
            return _Source(alias, derived=ctes[name.casefold()], relations=ctes[name.casefold()].relations)
        rel, obj = self.bind_relation(schema, name)
        if obj is None:
            return _Source(alias, rel, None, relations={rel})
        if obj.kind == "view":
            derived = self.expand_view(obj)
            if derived is not None:
                return _Source(alias, rel, None, derived, relations={rel} | derived.relations)
            return _Source(alias, rel, obj.column_names or None, relations={rel})
        return _Source(alias, rel, obj.column_names or None, relations={rel})

    def expand_view(self, obj: CatalogObject):
        if self.depth + 1 > MAX_EXPANSION_DEPTH or not obj.definition_text:
            self.note(f"view {obj.schema}.{obj.name} not expanded (depth or missing definition)")
            return None
        m = _CREATE_VIEW_RE.match(prepare_statement(obj.definition_text))
        body = m.group(3) if m else obj.definition_text
        try:
            tree = sqlglot.parse_one(body, read="tsql")
        except (ParseError, TokenError):
            self.note(f"view {obj.schema}.{obj.name} definition does not parse")
            return None
        sub = _Analyzer(self.binder, self.include_control, self.depth + 1)
        res = sub.select(tree, {})
        self.unresolved |= sub.unresolved
        self.diagnostics.extend(sub.diagnostics)
        if m and m.group(2):
            names = [c.strip().strip("[]") for c in m.group(2).strip("()").split(",")]
            res.columns = [(n, refs) for n, (_, refs) in zip(names, res.columns)]
        return res

    def sources_of(self, node, ctes):
        sources = []
        frm = _arg(node, "from")
        items = []
        if frm is not None:
            items.append(frm.this)
            items.extend(frm.expressions or ())
        for join in _joins_of(node):
            items.append(join.this)
        for item in items:
            sources.append(self.source_for(item, ctes))
        return sources

    def source_for(self, item, ctes):
        if isinstance(item, exp.Table):
            return self.table_source(item, ctes)
        if isinstance(item, exp.Subquery):
            derived = self.select(item.this, ctes)
            return _Source(item.alias_or_name, derived=derived, relations=derived.relations)
        self.note(f"unsupported source {type(item).__name__}")
        return _Source(getattr(item, "alias_or_name", ""), None, None, relations=())

    # columns ----------------------------------------------------------------
    def resolve_column(self, col: exp.Column, sources):
        name = col.name
        qual = col.table
        scopes = [sources] + list(reversed(self.scopes))
        if qual:
            q = qual.casefold()
            for scope in scopes:
                for s in scope:
                    if s.alias and s.alias.casefold() == q:
                        refs = s.resolve(name)
                        if refs is None:
                            self.note(f"column {qual}.{name} not found")
                            return set()
                        return refs
            self.note(f"unknown qualifier {qual}")
            return set()
        for scope in scopes:
            hits = [s for s in scope if s.has_column(name)]
            if len(hits) == 1:
                return hits[0].resolve(name)
            if len(hits) > 1:
                self.note(f"ambiguous column {name}")
                out = set()
                for s in hits:
                    out |= s.resolve(name) or set()
                return out
        unknown = [s for s in sources if s.known_columns() is None]
        if len(unknown) == 1 and len(sources) == 1:
            return unknown[0].resolve(name) or set()
        if unknown:
            # Attribute to every source whose schema is unknown.
            self.note(f"column {name} could belong to {len(unknown)} sources")
            out = set()
            for s in unknown:
                if s.relation is not None and s.derived is None:
                    out.add(ColumnRef(s.relation, name))
            return out
        if name.startswith("@"):
            return set()
        self.note(f"column {name} not found in any source")
        return set()

    def refs_in(self, node, sources, ctes, relations: set):
        """Column references inside an expression; nested queries are analyzed in their own scope."""
        out = set()
        stack = [node]
        while stack:
            n = stack.pop()
            if isinstance(n, exp.Column):
                if isinstance(n.this, exp.Star):
                    continue
                out |= self.resolve_column(n, sources)
                continue
            if isinstance(n, (exp.Subquery, exp.Select, exp.Union, exp.Intersect, exp.Except)):
                inner = n.this if isinstance(n, exp.Subquery) else n
                self.scopes.append(sources)
                try:
                    res = self.select(inner, ctes)
                finally:
                    self.scopes.pop()
                relations |= res.relations
                out |= res.all_refs()
                continue
            stack.extend(n.iter_expressions())
        return out

    # queries ----------------------------------------------------------------
    def with_ctes(self, node, ctes):
        with_ = _arg(node, "with")
        if with_ is None:
            return ctes
        ctes = dict(ctes)
        for cte in with_.expressions:
            res = self.select(cte.this, ctes)
            names = [c.name for c in (cte.args.get("alias").columns if cte.args.get("alias") else [])]
            if names:
                res.columns = [(n, refs) for n, (_, refs) in zip(names, res.columns)]
            ctes[cte.alias_or_name.casefold()] = res
        return ctes

    def select(self, node, ctes) -> _SelectResult:
        if isinstance(node, exp.Subquery):
            node = node.this
        if isinstance(node, (exp.Union, exp.Intersect, exp.Except)):
            ctes = self.with_ctes(node, ctes)
            left = self.select(node.this, ctes)
            right = self.select(node.expression, ctes)
            cols = []
            for i, (name, refs) in enumerate(left.columns):
                other = right.columns[i][1] if i < len(right.columns) else set()
                cols.append((name, refs | other))
            return _SelectResult(
                cols,
                left.relations | right.relations,
                left.control | right.control,
                left.complete and right.complete and len(left.columns) == len(right.columns),
            )
        if not isinstance(node, exp.Select):
            if isinstance(node, exp.Values):
                return self.values(node, [], ctes)
            self.note(f"unsupported query expression {type(node).__name__}")
            return _SelectResult(complete=False)

        ctes = self.with_ctes(node, ctes)
        sources = self.sources_of(node, ctes)
        result = _SelectResult()
        for s in sources:
            result.relations |= s.relations

        control_nodes = [j.args.get("on") for j in _joins_of(node)]
        control_nodes += [node.args.get(k) for k in ("where", "group", "having", "qualify")]
        for cn in control_nodes:
            if cn is not None:
                result.control |= self.refs_in(cn, sources, ctes, result.relations)

        by_alias = {s.alias.casefold(): s for s in sources if s.alias}
        for i, e in enumerate(node.expressions):
            if isinstance(e, exp.Star):
                self.expand_star(sources, result)
                continue
            if isinstance(e, exp.Column) and isinstance(e.this, exp.Star):
                src = by_alias.get((e.table or "").casefold())
                if src is None:
                    self.note(f"unknown qualifier {e.table}.*")
                    result.complete = False
                else:
                    self.expand_star([src], result)
                continue
            if isinstance(e, exp.EQ) and isinstance(e.this, (exp.Parameter, exp.Var)):
                result.assigns_variables = True
                result.control |= self.refs_in(e.expression, sources, ctes, result.relations)
                continue
            if isinstance(e, (exp.Alias, exp.Column)):
                name = e.alias_or_name
            else:
                name = None
            refs = self.refs_in(e, sources, ctes, result.relations)
            result.columns.append((name, refs))
        return result

    def expand_star(self, sources, result):
        for s in sources:
            cols = s.known_columns()
            if cols is None:
                self.note(f"cannot expand * over {s.alias or 'source'} (schema unknown)")
                result.complete = False
                continue
            for c in cols:
                result.columns.append((c, s.resolve(c) or set()))

    def values(self, node: exp.Values, sources, ctes):
        result = _SelectResult()
        rows = node.expressions
        if not rows:
            return result
        width = len(rows[0].expressions) if isinstance(rows[0], exp.Tuple) else 1
        cols = [set() for _ in range(width)]
        for row in rows:
            items = row.expressions if isinstance(row, exp.Tuple) else [row]
            for i, item in enumerate(items[:width]):
                cols[i] |= self.refs_in(item, sources, ctes, result.relations)
        result.columns = [(None, c) for c in cols]
        return result


# -- statement analysis ----------------------------------------------------------------


def _column_map(pairs):
    out = {}
    for out_col, refs in pairs:
        if refs:
            prev = out.get(out_col)
            out[out_col] = frozenset(refs) if prev is None else prev | frozenset(refs)
    return out


def _canonical(cols, name):
    if cols:
        for c in cols:
            if c.casefold() == name.casefold():
                return c
    return name


class StatementAnalyzer:
    """Callable object bundling the per-statement rules; see :func:`analyze_statement`."""

    def __init__(self, catalog, mode=BindingMode.STATE_BASED, *, bindings=None, include_control_columns=False):
        self.binder = Binder(catalog, mode, bindings)
        self.include_control = include_control_columns

    def __call__(self, stmt: str, node_id: str = "") -> StatementProvenance:
        s = prepare_statement(stmt)
        kind = statement_kind(stmt)
        an = _Analyzer(self.binder, self.include_control)
        try:
            inputs, outputs, cmap = self._dispatch(s, kind, stmt, an)
        except (ParseError, TokenError) as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            return StatementProvenance(node_id, confidence=Confidence.SUGGESTED, statement_kind=kind,
                                       diagnostics=(f"unsupported syntax: {msg}",))
        except _Unsupported as exc:
            return StatementProvenance(node_id, confidence=Confidence.SUGGESTED, statement_kind=kind,
                                       diagnostics=(f"unsupported syntax: {exc}",))
        # A relation whose columns feed an output is read by the statement.
        inputs = set(inputs)
        outputs = set(outputs)
        for refs in cmap.values():
            for ref in refs:
                inputs.add(ref.relation)
        for out_col in cmap:
            outputs.add(out_col.relation)
        confidence = Confidence.SUGGESTED if an.unresolved else Confidence.EXACT
        return StatementProvenance(node_id, frozenset(inputs), frozenset(outputs), cmap, confidence, kind,
                                   tuple(an.diagnostics))

    # ------------------------------------------------------------------
    def _dispatch(self, s, kind, original, an):
        if not s or kind in ("control", "noop"):
            return set(), set(), {}
        if kind == "set":
            if re.search(r"\bSELECT\b", s, re.IGNORECASE):
                rels = set()
                tree = sqlglot.parse_one(s, read="tsql")
                an.refs_in(tree, [], {}, rels)
                return rels, set(), {}
            return set(), set(), {}
        if kind == "exec":
            if procedure_name(s) is None:
                an.diagnostics.append("dynamic SQL in EXECUTE is not analyzed")
            return set(), set(), {}
        if kind == "bulk_insert":
            m = _BULK_RE.match(s)
            if not m:
                raise _Unsupported("BULK INSERT form")
            schema, name = _split_name(m.group(1))
            target, _ = an.bind_relation(schema, name)
            path = m.group(2).replace("''", "'")
            return {RelationRef("", path, "external")}, {target}, {}
        if kind == "ddl":
            return self._ddl(s, an)
        tree = sqlglot.parse_one(s, read="tsql")
        return self._dml(tree, s, an)

    def _ddl(self, s, an):
        m = _CREATE_PROC_RE.match(s)
        if m:
            return set(), set(), {}
        m = _CREATE_VIEW_RE.match(s)
        if m:
            schema, name = _split_name(m.group(1))
            rel = RelationRef(schema or DEFAULT_SCHEMA, name, "view", self.binder.generation_for(schema, name))
            res = an.select(sqlglot.parse_one(m.group(3), read="tsql"), {})
            names = [c.strip().strip("[]") for c in m.group(2).strip("()").split(",")] if m.group(2) else None
            pairs = []
            for i, (n, refs) in enumerate(res.columns):
                out_name = names[i] if names and i < len(names) else n
                if out_name:
                    pairs.append((ColumnRef(rel, out_name), refs | (res.control if self.include_control else set())))
            return set(res.relations), {rel}, _column_map(pairs)
        m = _TRUNCATE_RE.match(s)
        if m:
            schema, name = _split_name(m.group(1))
            rel, _ = an.bind_relation(schema, name)
            return set(), {rel}, {}
        tree = sqlglot.parse_one(s, read="tsql")
        if isinstance(tree, exp.Create):
            kind = (tree.args.get("kind") or "").upper()
            target = tree.this.this if isinstance(tree.this, exp.Schema) else tree.this
            if kind == "TABLE" and isinstance(target, exp.Table):
                schema, name = _table_name(target)
                rel = RelationRef(schema or DEFAULT_SCHEMA, name, "table", self.binder.generation_for(schema, name))
                query = tree.expression
                if query is not None:
                    res = an.select(query, {})
                    pairs = [(ColumnRef(rel, n), refs) for n, refs in res.columns if n]
                    return set(res.relations), {rel}, _column_map(pairs)
                return set(), {rel}, {}
            return set(), set(), {}
        if isinstance(tree, (exp.Drop, exp.Alter)):
            return set(), set(), {}
        raise _Unsupported(f"DDL {type(tree).__name__}")

    def _dml(self, tree, s, an):
        if isinstance(tree, exp.Insert):
            return self._insert(tree, an)
        if isinstance(tree, exp.Update):
            return self._update(tree, an)
        if isinstance(tree, exp.Delete):
            return self._delete(tree, an)
        if isinstance(tree, exp.Merge):
            return self._merge(tree, an)
        if isinstance(tree, (exp.Select, exp.Union, exp.Intersect, exp.Except)):
            return self._select(tree, s, an)
        if isinstance(tree, exp.Create):
            return self._ddl(s, an)
        if isinstance(tree, (exp.Command, exp.Set, exp.Transaction, exp.Commit, exp.Rollback, exp.Use)):
            return set(), set(), {}
        raise _Unsupported(type(tree).__name__)

    def _target(self, node, an):
        target = node.this if isinstance(node, exp.Schema) else node
        explicit = None
        if isinstance(node, exp.Schema):
            explicit = [c.name for c in node.expressions]
        if not isinstance(target, exp.Table):
            raise _Unsupported(f"target {type(target).__name__}")
        schema, name = _table_name(target)
        rel, obj = an.bind_relation(schema, name)
        catalog_cols = obj.column_names if obj is not None and obj.columns else None
        return rel, explicit, catalog_cols

    def _insert(self, tree: exp.Insert, an):
        rel, explicit, catalog_cols = self._target(tree.this, an)
        ctes = an.with_ctes(tree, {})
        query = tree.expression
        if isinstance(query, exp.Values):
            res = an.values(query, [], ctes)
        elif query is None:
            return set(), {rel}, {}
        else:
            res = an.select(query, ctes)
        target_cols = explicit or catalog_cols
        extra = res.control if self.include_control else set()
        if explicit:
            target_cols = [_canonical(catalog_cols, c) for c in explicit]
        pairs = []
        if res.complete and target_cols is not None and len(target_cols) == len(res.columns):
            for col, (_, refs) in zip(target_cols, res.columns):
                pairs.append((ColumnRef(rel, col), refs | extra if refs else refs))
        elif res.complete and target_cols is None:
            an.note("target columns unknown; mapping by select-list names")
            for n, refs in res.columns:
                if n:
                    pairs.append((ColumnRef(rel, n), refs | extra if refs else refs))
        else:
            an.note("select list does not line up with target columns; all inputs affect all outputs")
            everything = res.all_refs() | extra
            for col in target_cols or ():
                pairs.append((ColumnRef(rel, col), everything))
        return set(res.relations), {rel}, _column_map(pairs)

    def _select(self, tree, s, an):
        res = an.select(tree, {})
        into = tree.args.get("into") if isinstance(tree, exp.Select) else None
        extra = res.control if self.include_control else set()
        if into is not None and isinstance(into.this, exp.Table):
            schema, name = _table_name(into.this)
            gen = self.binder.generation_for(schema, name)
            rel = RelationRef(schema or DEFAULT_SCHEMA, name, "table", gen)
            pairs = [(ColumnRef(rel, n), refs | extra if refs else refs) for n, refs in res.columns if n]
            if not res.complete:
                an.note("SELECT INTO over an unexpanded *")
            return set(res.relations), {rel}, _column_map(pairs)
        if not res.relations or (res.assigns_variables and not res.columns):
            return set(res.relations), set(), {}
        rel = RelationRef(OUTPUT_SCHEMA, text_identity(s), "output", 1)
        pairs = []
        for i, (n, refs) in enumerate(res.columns):
            pairs.append((ColumnRef(rel, n or f"col{i + 1}"), refs | extra if refs else refs))
        return set(res.relations), {rel}, _column_map(pairs)

    def _update(self, tree: exp.Update, an):
        target = tree.this
        if not isinstance(target, exp.Table):
            raise _Unsupported("UPDATE target")
        frm = _arg(tree, "from")
        sources = an.sources_of(tree, {}) if frm is not None else []
        relations = set()
        for src in sources:
            relations |= src.relations
        t_schema, t_name = _table_name(target)
        tsrc = None
        for src in sources:
            if t_schema is None and src.alias and src.alias.casefold() == t_name.casefold():
                tsrc = src
                break
        if tsrc is None or tsrc.relation is None:
            rel, obj = an.bind_relation(t_schema, t_name)
            tsrc = _Source(target.alias_or_name, rel, obj.column_names if obj is not None and obj.columns else None)
            scope = sources + [tsrc]
        else:
            scope = sources
        rel = tsrc.relation
        control = set()
        for key in ("where",):
            if tree.args.get(key) is not None:
                control |= an.refs_in(tree.args[key], scope, {}, relations)
        for j in _joins_of(tree):
            if j.args.get("on") is not None:
                control |= an.refs_in(j.args["on"], scope, {}, relations)
        extra = control if self.include_control else set()
        pairs = []
        for assignment in tree.expressions:
            if not isinstance(assignment, exp.EQ):
                continue
            left = assignment.this
            if not isinstance(left, exp.Column):
                continue
            refs = an.refs_in(assignment.expression, scope, {}, relations)
            pairs.append((ColumnRef(rel, _canonical(tsrc.columns, left.name)), refs | extra if refs else refs))
        return relations, {rel}, _column_map(pairs)

    def _delete(self, tree: exp.Delete, an):
        target = tree.this
        if not isinstance(target, exp.Table):
            raise _Unsupported("DELETE target")
        sources = []
        tables = tree.args.get("tables")
        if tables:
            # DELETE t FROM t JOIN s ...: ``this`` is the FROM clause, ``tables`` the targets.
            sources.append(an.source_for(target, {}))
            for join in target.args.get("joins") or ():
                sources.append(an.source_for(join.this, {}))
            target = tables[0]
        using = tree.args.get("using")
        if using:
            for item in using if isinstance(using, list) else [using]:
                sources.append(an.source_for(item, {}))
        relations = set()
        for src in sources:
            relations |= src.relations
        t_schema, t_name = _table_name(target)
        rel = None
        for src in sources:
            if t_schema is None and src.alias and src.alias.casefold() == t_name.casefold() and src.relation is not None:
                rel = src.relation
        if rel is None:
            rel, _ = an.bind_relation(t_schema, t_name)
        scope = sources or [_Source(target.alias_or_name, rel, None)]
        if tables:
            for join in tree.this.args.get("joins") or ():
                if join.args.get("on") is not None:
                    an.refs_in(join.args["on"], scope, {}, relations)
        where = tree.args.get("where")
        if where is not None:
            an.refs_in(where, scope, {}, relations)
        return relations, {rel}, {}

    def _merge(self, tree: exp.Merge, an):
        target = tree.this
        if not isinstance(target, exp.Table):
            raise _Unsupported("MERGE target")
        t_schema, t_name = _table_name(target)
        rel, obj = an.bind_relation(t_schema, t_name)
        tsrc = _Source(target.alias_or_name, rel, obj.column_names if obj is not None and obj.columns else None)
        src = an.source_for(tree.args.get("using"), {})
        scope = [tsrc, src]
        relations = set(src.relations) | {rel}
        control = an.refs_in(tree.args["on"], scope, {}, relations) if tree.args.get("on") is not None else set()
        extra = control if self.include_control else set()
        pairs = []
        whens = tree.args.get("whens")
        for when in (whens.expressions if whens is not None else []):
            then = when.args.get("then")
            if isinstance(then, exp.Update):
                for assignment in then.expressions:
                    if isinstance(assignment, exp.EQ) and isinstance(assignment.this, exp.Column):
                        refs = an.refs_in(assignment.expression, scope, {}, relations)
                        pairs.append((ColumnRef(rel, _canonical(tsrc.columns, assignment.this.name)), refs | extra if refs else refs))
            elif isinstance(then, exp.Insert):
                cols = [c.name for c in then.this.expressions] if isinstance(then.this, exp.Tuple) else (tsrc.columns or [])
                vals = then.expression.expressions if isinstance(then.expression, exp.Tuple) else []
                for c, v in zip(cols, vals):
                    refs = an.refs_in(v, scope, {}, relations)
                    pairs.append((ColumnRef(rel, _canonical(tsrc.columns, c)), refs | extra if refs else refs))
        return relations, {rel}, _column_map(pairs)


class _Unsupported(Exception):
    pass


def analyze_statement(stmt: str, catalog: Optional[CatalogState] = None, mode: BindingMode = BindingMode.STATE_BASED,
                      *, node_id: str = "", bindings=None, include_control_columns=False) -> StatementProvenance:
    """Inputs, outputs and column mapping of one statement.

    Never raises for bad SQL: unsupported text yields empty sets, confidence
    ``SUGGESTED`` and a diagnostic.
    """
    analyzer = StatementAnalyzer(catalog, mode, bindings=bindings, include_control_columns=include_control_columns)
    return analyzer(stmt, node_id)


# -- DDL replay ----------------------------------------------------------------------


def _column_defs(schema_node):
    cols = []
    for c in schema_node.expressions:
        if isinstance(c, exp.ColumnDef):
            kind = c.args.get("kind")
            cols.append((c.name, kind.sql(dialect="tsql") if kind is not None else ""))
    return tuple(cols)


def apply_ddl(state: CatalogState, stmt: str, *, diagnostics=None) -> CatalogState:
    """Replay one statement against the catalog mirror.

    CREATE TABLE / VIEW / PROCEDURE and SELECT ... INTO add objects, DROP
    removes them (so a later re-create gets the next generation), ALTER TABLE
    ADD/DROP COLUMN edits column lists. Anything else returns ``state``
    unchanged. Unparseable DDL is reported through ``diagnostics`` and leaves
    the state as it was.
    """
    s = prepare_statement(stmt)
    head = _WORD_RE.match(s)
    word = head.group(0).upper() if head else ""
    try:
        if word in ("CREATE", "ALTER"):
            return _apply_create(state, s, word)
        if word == "DROP":
            tree = sqlglot.parse_one(s, read="tsql")
            if isinstance(tree, exp.Drop):
                for t in tree.args.get("tables") or tree.expressions or [tree.this]:
                    if isinstance(t, exp.Table):
                        schema, name = _table_name(t)
                        state = state.with_dropped(schema, name)
            return state
        if word in ("SELECT", "WITH") and _SELECT_INTO_RE.match(s):
            tree = sqlglot.parse_one(s, read="tsql")
            into = tree.args.get("into") if isinstance(tree, exp.Select) else None
            if into is None or not isinstance(into.this, exp.Table):
                return state
            an = _Analyzer(Binder(state, BindingMode.STATE_BASED))
            res = an.select(tree, {})
            schema, name = _table_name(into.this)
            cols = tuple((n, "") for n, _ in res.columns if n)
            return state.with_object(CatalogObject(schema or DEFAULT_SCHEMA, name, "table", 1, cols))
    except (ParseError, TokenError) as exc:
        if diagnostics is not None:
            diagnostics.append(f"unsupported DDL, catalog unchanged: {str(exc).splitlines()[0]}")
        logger.debug("apply_ddl: cannot parse %r", stmt[:80])
        return state
    return state


def _apply_create(state, s, word):
    m = _CREATE_PROC_RE.match(s)
    if m:
        schema, name = _split_name(m.group(2))
        kind = "procedure" if m.group(1).upper().startswith("PROC") else "function"
        return state.with_object(CatalogObject(schema or DEFAULT_SCHEMA, name, kind, 1, (), s))
    m = _CREATE_VIEW_RE.match(s)
    if m:
        schema, name = _split_name(m.group(1))
        an = _Analyzer(Binder(state, BindingMode.STATE_BASED))
        res = an.select(sqlglot.parse_one(m.group(3), read="tsql"), {})
        if m.group(2):
            names = [c.strip().strip("[]") for c in m.group(2).strip("()").split(",")]
        else:
            names = [n for n, _ in res.columns if n]
        return state.with_object(CatalogObject(schema or DEFAULT_SCHEMA, name, "view", 1, tuple((n, "") for n in names), s))
    tree = sqlglot.parse_one(s, read="tsql")
    if isinstance(tree, exp.Create) and (tree.args.get("kind") or "").upper() == "TABLE":
        target = tree.this.this if isinstance(tree.this, exp.Schema) else tree.this
        schema, name = _table_name(target)
        if isinstance(tree.this, exp.Schema):
            cols = _column_defs(tree.this)
        elif tree.expression is not None:
            an = _Analyzer(Binder(state, BindingMode.STATE_BASED))
            cols = tuple((n, "") for n, _ in an.select(tree.expression, {}).columns if n)
        else:
            cols = ()
        return state.with_object(CatalogObject(schema or DEFAULT_SCHEMA, name, "table", 1, cols))
    if isinstance(tree, exp.Alter) and word == "ALTER":
        target = tree.this
        if not isinstance(target, exp.Table):
            return state
        schema, name = _table_name(target)
        obj = state.lookup(schema, name)
        if obj is None:
            return state
        cols = list(obj.columns)
        for action in tree.args.get("actions") or ():
            if isinstance(action, exp.ColumnDef):
                kind = action.args.get("kind")
                cols.append((action.name, kind.sql(dialect="tsql") if kind is not None else ""))
            elif isinstance(action, exp.Drop):
                dropped = {e.name.casefold() for e in action.expressions or [action.this] if e is not None}
                cols = [c for c in cols if c[0].casefold() not in dropped]
        from dataclasses import replace

        return state.with_object(replace(obj, columns=tuple(cols)))
    return state
