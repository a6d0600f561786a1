"""Synthetic query-event logs with known ground truth.

Three families:

* the sales running example (two stored procedures, one activity per call),
* an OLTP-style load: many clients executing stored procedures whose bodies
  contain straight-line statements, a WHILE loop and optionally nested
  procedure calls,
* a plan-carrying variant of any log, where extra plan events inflate the
  byte volume.

Ground truth is declared by the statement templates themselves (each
template knows which relations and columns it reads and writes), and
:func:`expected_graph` turns it into the graph an unfiltered extraction must
produce.
"""
from __future__ import annotations

import base64
import heapq
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Optional

from .analysis import OUTPUT_SCHEMA, ColumnRef, RelationRef
from .catalog import CatalogState
from .events import EventClass, EventKind, EventMetadata, QueryEvent, serialize_event
from .graph import (
    Entity,
    EntityType,
    ProvenanceGraph,
    RelationshipType,
    make_guid,
    qualified_name,
    text_identity,
)

logger = logging.getLogger(__name__)

BASE_TS = 1_680_000_000_000_000  # 2023-03-28, microseconds
DEFAULT_PLAN_FACTOR = 9.0
# Statements carrying a plan event: 263 - 218 events per 109 statement runs.
DEFAULT_PLAN_FRACTION = 45 / 109


@dataclass
class Lineage:
    inputs: frozenset = frozenset()
    outputs: frozenset = frozenset()
    column_map: dict = field(default_factory=dict)  # ColumnRef -> frozenset[ColumnRef]


EMPTY_LINEAGE = Lineage()


@dataclass
class NodeSpec:
    text: str
    event_class: EventClass
    lineage: Lineage = EMPTY_LINEAGE
    children: list = field(default_factory=list)
    procedure: Optional[str] = None  # "dbo.Name" when the text executes a procedure

    def shape(self):
        return (self.text, [c.shape() for c in self.children])

    def count(self):
        return 1 + sum(c.count() for c in self.children)


@dataclass
class ActivitySpec:
    activity_id: str
    root: NodeSpec
    server: str
    database: str
    username: str
    client_host: str
    client_app_name: str


@dataclass
class GroundTruth:
    """What an unfiltered extraction of the generated log must find."""

    catalog: CatalogState
    activities: list = field(default_factory=list)  # ActivitySpec, in trigger order
    params: dict = field(default_factory=dict)
    procedures: dict = field(default_factory=dict)  # activity_id -> invoked top-level procedure

    def trees(self):
        return {a.activity_id: a.root.shape() for a in self.activities}

    def to_json(self):
        return {
            "params": self.params,
            "catalog": self.catalog.to_json(),
            "activities": [
                {"activity_id": a.activity_id, "procedure": self.procedures.get(a.activity_id), "shape": a.root.shape(), "nodes": a.root.count()}
                for a in self.activities
            ],
        }


@dataclass
class GeneratedLog:
    events: list
    ground_truth: GroundTruth


def _rel(name, schema="dbo", kind="table"):
    return RelationRef(schema, name, kind)


def _cmap(pairs):
    return {ColumnRef(o[0], o[1]): frozenset(ColumnRef(r, c) for r, c in ins) for o, ins in pairs}


# -- event emission ------------------------------------------------------------------------


class _Clock:
    __slots__ = ("t", "rng")

    def __init__(self, t, rng):
        self.t = t
        self.rng = rng

    def tick(self, lo=5, hi=60):
        self.t += self.rng.randint(lo, hi)
        return self.t


def _emit(spec: ActivitySpec, clock: _Clock, rng: random.Random):
    """Started/completed events of one activity (seq left at 0; assigned on merge)."""
    out = []
    started_meta = EventMetadata(
        username=spec.username,
        client_app_name=spec.client_app_name,
        client_host=spec.client_host,
        server_name=spec.server,
        database_name=spec.database,
    )
    aid = spec.activity_id

    def visit(node):
        start = clock.tick()
        out.append(QueryEvent(aid, 0, EventKind.STARTED, node.event_class, start, node.text, started_meta))
        for c in node.children:
            visit(c)
        end = clock.tick(10, 120)
        dur = end - start
        lin = node.lineage
        written = bool(lin.outputs) and not any(r.schema == OUTPUT_SCHEMA for r in lin.outputs)
        meta = EventMetadata(
            username=spec.username,
            server_name=spec.server,
            database_name=spec.database,
            cpu_time_us=int(dur * rng.uniform(0.3, 0.9)),
            duration_us=dur,
            rows_inserted=rng.randint(1, 20) if written and node.text.lstrip().upper().startswith(("INSERT", "BULK")) else 0,
            rows_updated=rng.randint(1, 5) if written and node.text.lstrip().upper().startswith("UPDATE") else 0,
            rows_deleted=rng.randint(0, 20) if written and "DELETE" in node.text.upper() else 0,
            rows_returned=rng.randint(0, 10) if any(r.schema == OUTPUT_SCHEMA for r in lin.outputs) else 0,
        )
        out.append(QueryEvent(aid, 0, EventKind.COMPLETED, node.event_class, end, node.text, meta))

    visit(spec.root)
    return out


def _renumber(events, start=0):
    out = []
    for i, e in enumerate(events, start):
        out.append(QueryEvent(e.activity_id, i, e.kind, e.event_class, e.timestamp, e.query_text, e.metadata, e.plan_payload, e.extras))
    return out


# -- running example ---------------------------------------------------------------------------

SALES_SERVER = "sqlsrv01"
SALES_DB = "sales"

STAGED = _rel("StagedSales")
HISTORY = _rel("SalesHistory")
RATE = _rel("ConversionRate")
CSV = RelationRef("", "newSales.csv", "external")

SALES_CATALOG_DDL = [
    "CREATE TABLE StagedSales (CustomerId int, Region varchar(32), Amount decimal(12, 2))",
    "CREATE TABLE SalesHistory (CustomerId int, Region varchar(32), Amount decimal(12, 2))",
    "CREATE TABLE ConversionRate (Region varchar(32), Rate decimal(8, 4))",
]

CLEAN_AND_APPEND = """CREATE PROCEDURE CleanAndAppendSalesHistory
   @trackingSystemVersion int
AS
BEGIN
    IF @trackingSystemVersion = 1
      BEGIN
        INSERT SalesHistory
        SELECT c.CustomerId, c.Region,
               r.Rate * c.Amount AS Amount
        FROM   StagedSales c JOIN
               ConversionRate r ON c.Region = r.Region
      END
    ELSE
      BEGIN
        INSERT SalesHistory SELECT * FROM StagedSales
      END
END"""

SYNC_NEW_SALES = """CREATE PROCEDURE SyncNewSales
   @trackingSystemVersion int
AS
BEGIN
    IF EXISTS(SELECT * FROM INFORMATION_SCHEMA.TABLES
              WHERE TABLE_NAME='StagedSales')
       DELETE FROM TABLE StagedSales;
    BULK INSERT StagedSales FROM 'newSales.csv';
    EXECUTE CleanAndAppendSalesHistory
            @trackingSystemVersion;
END"""

IF_DELETE = "IF EXISTS(SELECT * FROM INFORMATION_SCHEMA.TABLES WHERE TABLE_NAME='StagedSales') DELETE FROM TABLE StagedSales"
BULK = "BULK INSERT StagedSales FROM 'newSales.csv'"
EXEC_CLEAN = "EXECUTE CleanAndAppendSalesHistory @trackingSystemVersion"
INSERT_V1 = (
    "INSERT SalesHistory SELECT c.CustomerId, c.Region, r.Rate * c.Amount AS Amount "
    "FROM StagedSales c JOIN ConversionRate r ON c.Region = r.Region"
)
INSERT_V2 = "INSERT SalesHistory SELECT * FROM StagedSales"


def sales_catalog() -> CatalogState:
    from .analysis import apply_ddl

    state = CatalogState()
    for stmt in SALES_CATALOG_DDL + [CLEAN_AND_APPEND, SYNC_NEW_SALES]:
        state = apply_ddl(state, stmt)
    return state


def running_example_tree(version: int) -> NodeSpec:
    if version == 1:
        insert = NodeSpec(
            INSERT_V1,
            EventClass.SP_STATEMENT,
            Lineage(
                frozenset({STAGED, RATE}),
                frozenset({HISTORY}),
                _cmap(
                    [
                        ((HISTORY, "CustomerId"), [(STAGED, "CustomerId")]),
                        ((HISTORY, "Region"), [(STAGED, "Region")]),
                        ((HISTORY, "Amount"), [(RATE, "Rate"), (STAGED, "Amount")]),
                    ]
                ),
            ),
        )
    else:
        insert = NodeSpec(
            INSERT_V2,
            EventClass.SP_STATEMENT,
            Lineage(
                frozenset({STAGED}),
                frozenset({HISTORY}),
                _cmap([((HISTORY, c), [(STAGED, c)]) for c in ("CustomerId", "Region", "Amount")]),
            ),
        )
    return NodeSpec(
        f"EXECUTE SyncNewSales {version}",
        EventClass.SQL_BATCH,
        procedure="dbo.SyncNewSales",
        children=[
            NodeSpec(IF_DELETE, EventClass.SP_STATEMENT, Lineage(frozenset(), frozenset({STAGED}))),
            NodeSpec(BULK, EventClass.SP_STATEMENT, Lineage(frozenset({CSV}), frozenset({STAGED}))),
            NodeSpec(EXEC_CLEAN, EventClass.SP_STATEMENT, procedure="dbo.CleanAndAppendSalesHistory", children=[insert]),
        ],
    )


def gen_running_example(version: int = 2, repeats: int = 1, *, seed: int = 0, first_activity_id: int = 3,
                        versions=None) -> GeneratedLog:
    """``repeats`` activities of ``EXECUTE SyncNewSales <version>``.

    ``versions`` (a list, one entry per activity) overrides ``version`` so a
    single log can mix both branches.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    versions = list(versions) if versions is not None else [version] * repeats
    for v in versions:
        if v not in (1, 2):
            raise ValueError("version must be 1 or 2")
    rng = random.Random(seed)
    clock = _Clock(BASE_TS, rng)
    gt = GroundTruth(sales_catalog(), params={"kind": "running_example", "versions": versions, "seed": seed})
    events = []
    for i, v in enumerate(versions):
        spec = ActivitySpec(str(first_activity_id + i), running_example_tree(v), SALES_SERVER, SALES_DB,
                            "etl_user", "etl-host", "SalesSync")
        gt.activities.append(spec)
        gt.procedures[spec.activity_id] = "dbo.SyncNewSales"
        events.extend(_emit(spec, clock, rng))
        clock.tick(1000, 5000)
    return GeneratedLog(_renumber(events), gt)


# -- OLTP workload ------------------------------------------------------------------------------

TPCC_SERVER = "sqlsrv02"
TPCC_DB = "tpcc"
TPCC_TABLES = {
    "warehouse": ["w_id", "w_name", "w_street", "w_city", "w_state", "w_zip", "w_tax", "w_ytd"],
    "district": ["d_id", "d_w_id", "d_name", "d_street", "d_city", "d_state", "d_zip", "d_tax", "d_ytd", "d_next_o_id"],
    "customer": ["c_id", "c_d_id", "c_w_id", "c_first", "c_last", "c_street", "c_city", "c_state", "c_zip",
                 "c_phone", "c_since", "c_credit", "c_credit_lim", "c_discount", "c_balance", "c_ytd_payment",
                 "c_payment_cnt", "c_delivery_cnt", "c_data"],
    "history": ["h_c_id", "h_c_d_id", "h_c_w_id", "h_d_id", "h_w_id", "h_date", "h_amount", "h_data"],
    "new_order": ["no_o_id", "no_d_id", "no_w_id"],
    "orders": ["o_id", "o_d_id", "o_w_id", "o_c_id", "o_entry_d", "o_carrier_id", "o_ol_cnt", "o_all_local"],
    "order_line": ["ol_o_id", "ol_d_id", "ol_w_id", "ol_number", "ol_i_id", "ol_supply_w_id", "ol_delivery_d",
                   "ol_quantity", "ol_amount", "ol_dist_info"],
    "item": ["i_id", "i_im_id", "i_name", "i_price", "i_data"],
    "stock": ["s_i_id", "s_w_id", "s_quantity", "s_dist_01", "s_ytd", "s_order_cnt", "s_remote_cnt", "s_data"],
}
TPCC_PROCS = ["new_order", "payment", "order_status", "delivery", "stock_level"]
TPCC_MIX = [45, 43, 4, 4, 4]
_STMT_KINDS = ["select_out", "select_var", "update", "insert_select", "insert_values", "delete"]
_STMT_WEIGHTS = [20, 15, 25, 15, 15, 10]


def tpcc_catalog() -> CatalogState:
    return CatalogState.from_tables(TPCC_TABLES)


def _statement(rng: random.Random, tag: str) -> NodeSpec:
    """One distinct sp statement with declared lineage. ``tag`` makes its text unique."""
    kind = rng.choices(_STMT_KINDS, _STMT_WEIGHTS)[0]
    names = sorted(TPCC_TABLES)
    t = rng.choice(names)
    cols = TPCC_TABLES[t]
    key = cols[0]
    rel = _rel(t)
    data_cols = cols[1:] if len(cols) > 2 else cols
    if kind == "select_out":
        a, b = rng.sample(data_cols, 2) if len(data_cols) >= 2 else (data_cols[0], cols[0])
        text = f"SELECT {a}, {b} FROM {t} WHERE {key} = @p_{tag}"
        out = RelationRef(OUTPUT_SCHEMA, text_identity(text), "output")
        lin = Lineage(frozenset({rel}), frozenset({out}), _cmap([((out, a), [(rel, a)]), ((out, b), [(rel, b)])]))
    elif kind == "select_var":
        a = rng.choice(data_cols)
        text = f"SELECT @v_{tag} = {a} FROM {t} WHERE {key} = @p_{tag}"
        lin = Lineage(frozenset({rel}), frozenset())
    elif kind == "update":
        a = rng.choice(data_cols)
        text = f"UPDATE {t} SET {a} = {a} + @d_{tag} WHERE {key} = @p_{tag}"
        lin = Lineage(frozenset({rel}), frozenset({rel}), _cmap([((rel, a), [(rel, a)])]))
    elif kind == "insert_select":
        t2 = rng.choice([n for n in names if n != t])
        rel2 = _rel(t2)
        src = rng.sample(cols, 2)
        dst = rng.sample(TPCC_TABLES[t2], 2)
        text = f"INSERT INTO {t2} ({dst[0]}, {dst[1]}) SELECT {src[0]}, {src[1]} FROM {t} WHERE {key} = @p_{tag}"
        lin = Lineage(frozenset({rel}), frozenset({rel2}), _cmap([((rel2, d), [(rel, s)]) for d, s in zip(dst, src)]))
    elif kind == "insert_values":
        a, b = rng.sample(cols, 2)
        text = f"INSERT INTO {t} ({a}, {b}) VALUES (@a_{tag}, @b_{tag})"
        lin = Lineage(frozenset(), frozenset({rel}))
    else:
        text = f"DELETE FROM {t} WHERE {key} = @p_{tag}"
        lin = Lineage(frozenset(), frozenset({rel}))
    return NodeSpec(text, EventClass.SP_STATEMENT, lin)


@dataclass
class ProcTemplate:
    name: str  # schema-qualified
    pre: list  # NodeSpec (statements or nested EXECUTE nodes)
    loop_check: str
    body: list
    post: list

    def expand(self, loop_iters: int) -> list:
        children = list(self.pre)
        for _ in range(loop_iters):
            children.append(NodeSpec(self.loop_check, EventClass.SP_STATEMENT))
            children.extend(self.body)
        children.extend(self.post)
        return children


def _nested_chain(rng, base, levels, budget):
    """An EXECUTE node whose procedure runs ``per_level`` statements and calls the next level."""
    per_level = max(1, budget // max(1, levels))
    node = None
    for lvl in range(levels, 0, -1):
        name = f"{base}_n{lvl}"
        stmts = [_statement(rng, f"{name}_{i}") for i in range(per_level)]
        if node is not None:
            stmts.insert(per_level // 2, node)
        node = NodeSpec(f"EXECUTE {name} @p_{name}", EventClass.SP_STATEMENT, children=stmts, procedure=f"dbo.{name}")
    return node, per_level * levels


def build_procedures(sp_count, loop_iters, stmts_per_tx, nest_depth, rng):
    names = list(TPCC_PROCS[:sp_count]) + [f"proc_{i:02d}" for i in range(len(TPCC_PROCS), sp_count)]
    loop_share = 0.8 * stmts_per_tx
    body_len = max(1, round(loop_share / loop_iters) - 1)
    loop_total = loop_iters * (1 + body_len)
    templates = {}
    for idx, name in enumerate(names):
        rest = max(0, stmts_per_tx - loop_total)
        # Procedure-local nesting: depth 2 is batch + statements; each extra level is a nested EXECUTE.
        depth = 2 if nest_depth <= 2 else 2 + (idx % (nest_depth - 1))
        pre_n = rest // 2
        post_n = rest - pre_n
        nested = None
        if depth > 2 and rest >= 2:
            nested, used = _nested_chain(rng, name, depth - 2, max(depth - 2, rest // 2))
            pre_n = max(0, pre_n - used - (depth - 2))
        pre = [_statement(rng, f"{name}_s{i}") for i in range(pre_n)]
        if nested is not None:
            pre.insert(len(pre) // 2, nested)
        body = [_statement(rng, f"{name}_l{i}") for i in range(body_len)]
        post = [_statement(rng, f"{name}_e{i}") for i in range(post_n)]
        templates[name] = ProcTemplate(f"dbo.{name}", pre, f"WHILE @i_{name} < @n_{name}", body, post)
    return names, templates


def _oltp_activity(tx, name, template, loop_iters, rng, client):
    lits = ", ".join(str(rng.randint(1, 3000)) for _ in range(3))
    root = NodeSpec(f"EXECUTE {name} {lits}", EventClass.SQL_BATCH, children=template.expand(loop_iters),
                    procedure=template.name)
    return ActivitySpec(f"tx-{tx}", root, TPCC_SERVER, TPCC_DB, f"app_user{client % 4}", f"client-{client:02d}", "oltp-driver")


def gen_oltp(transactions: int = 100, clients: int = 16, sp_count: int = 5, loop_iters: int = 16,
             stmts_per_tx: int = 125, *, nest_depth: int = 2, seed: int = 0) -> GeneratedLog:
    """OLTP-style log; see :func:`iter_oltp` for the streaming form."""
    gt_holder = {}
    events = list(iter_oltp(transactions, clients, sp_count, loop_iters, stmts_per_tx, nest_depth=nest_depth,
                            seed=seed, ground_truth=gt_holder))
    return GeneratedLog(events, gt_holder["gt"])


def iter_oltp(transactions, clients=16, sp_count=5, loop_iters=16, stmts_per_tx=125, *, nest_depth=2, seed=0,
              ground_truth=None):
    """Yield the events of an OLTP-style load in global (timestamp, seq) order.

    Transactions are dealt round-robin to ``clients`` concurrent streams;
    each is one activity executing one of ``sp_count`` stored procedures.
    ``ground_truth`` (a dict) receives the GroundTruth under key ``"gt"``.
    """
    for pname, value in (("transactions", transactions), ("clients", clients), ("sp_count", sp_count),
                         ("loop_iters", loop_iters), ("stmts_per_tx", stmts_per_tx), ("nest_depth", nest_depth)):
        if not isinstance(value, int) or value < 1:
            raise ValueError(f"{pname} must be a positive integer")
    rng = random.Random(seed)
    names, templates = build_procedures(sp_count, loop_iters, stmts_per_tx, nest_depth, rng)
    weights = TPCC_MIX[:sp_count] + [TPCC_MIX[-1]] * max(0, sp_count - len(TPCC_MIX)) if sp_count <= 5 else [1] * sp_count
    gt = GroundTruth(tpcc_catalog(), params={
        "kind": "oltp", "transactions": transactions, "clients": clients, "sp_count": sp_count,
        "loop_iters": loop_iters, "stmts_per_tx": stmts_per_tx, "nest_depth": nest_depth, "seed": seed,
    })
    if ground_truth is not None:
        ground_truth["gt"] = gt
    per_client = [[] for _ in range(clients)]
    for tx in range(transactions):
        per_client[tx % clients].append((tx, rng.choices(names, weights)[0]))

    def client_stream(c):
        crng = random.Random(seed * 1_000_003 + c)
        clock = _Clock(BASE_TS + c * 137, crng)
        for tx, name in per_client[c]:
            spec = _oltp_activity(tx, name, templates[name], loop_iters, crng, c)
            gt.activities.append(spec)
            gt.procedures[spec.activity_id] = templates[name].name
            for e in _emit(spec, clock, crng):
                yield (e.timestamp, c, e)
            clock.tick(100, 2000)

    streams = [client_stream(c) for c in range(clients)]
    seq = 0
    for _, _, e in heapq.merge(*streams, key=lambda x: (x[0], x[1])):
        yield QueryEvent(e.activity_id, seq, e.kind, e.event_class, e.timestamp, e.query_text, e.metadata)
        seq += 1
    gt.activities.sort(key=lambda a: (int(a.activity_id.split("-")[1])))


def write_log_file(events, path) -> int:
    """Write events to one NDJSON file; returns the byte count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            line = serialize_event(e) + "\n"
            fh.write(line)
            n += len(line.encode("utf-8")) if not line.isascii() else len(line)
    return n


# -- plan-carrying variant --------------------------------------------------------------------------


def log_bytes(events) -> int:
    return sum(len(serialize_event(e).encode("utf-8")) + 1 for e in events)


def gen_plan_variant(events, plan_bytes_factor: float = DEFAULT_PLAN_FACTOR, *, plan_fraction: float = DEFAULT_PLAN_FRACTION,
                     seed: int = 0) -> list:
    """Insert a plan event after a subset of statement completions.

    ``plan_fraction`` of the completed statement events (chosen with a
    seeded PRNG) get a plan event; payload sizes are set so the total byte
    volume is about ``(1 + plan_bytes_factor)`` times the input's.
    """
    if not plan_bytes_factor > 0:
        raise ValueError("plan_bytes_factor must be > 0")
    if not 0 < plan_fraction <= 1:
        raise ValueError("plan_fraction must be in (0, 1]")
    events = list(events)
    rng = random.Random(seed)
    chosen = [
        i for i, e in enumerate(events)
        if e.kind is EventKind.COMPLETED and e.event_class is not EventClass.SQL_BATCH and rng.random() < plan_fraction
    ]
    if not chosen:
        chosen = [i for i, e in enumerate(events) if e.kind is EventKind.COMPLETED][:1]
    total = log_bytes(events)
    budget = plan_bytes_factor * total
    # Envelope of a plan event without payload, roughly.
    sample = events[chosen[0]]
    envelope = len(serialize_event(QueryEvent(sample.activity_id, sample.seq, EventKind.PLAN, sample.event_class,
                                              sample.timestamp, "", EventMetadata(), ""))) + 1
    payload_len = max(16, int(budget / len(chosen)) - envelope)
    raw_len = payload_len * 3 // 4 + 3
    chosen_set = set(chosen)
    out = []
    for i, e in enumerate(events):
        out.append(e)
        if i in chosen_set:
            blob = base64.b64encode(rng.randbytes(raw_len)).decode("ascii")[:payload_len]
            out.append(QueryEvent(e.activity_id, 0, EventKind.PLAN, e.event_class, e.timestamp, "", EventMetadata(), blob))
    return _renumber(out)


# -- expected graph ------------------------------------------------------------------------------------

_STATIC_OF_CLASS = {
    EventClass.SQL_BATCH: (EntityType.BATCH, EntityType.BATCH_RUN),
    EventClass.SQL_STATEMENT: (EntityType.ADHOC_STATEMENT, EntityType.ADHOC_STATEMENT_RUN),
    EventClass.SP_STATEMENT: (EntityType.SP_STATEMENT, EntityType.SP_STATEMENT_RUN),
}
_DS_TYPE = {"table": EntityType.TABLE, "view": EntityType.VIEW, "output": EntityType.QUERY_OUTPUT}


def _ds_name(ref, server, db):
    if ref.kind == "external":
        return EntityType.EXTERNAL_FILE, qualified_name(EntityType.EXTERNAL_FILE, ref.name)
    t = _DS_TYPE[ref.kind]
    return t, qualified_name(t, server, db, ref.schema, ref.name, ref.generation)


def _col_name(ref, server, db):
    r = ref.relation
    return qualified_name(EntityType.COLUMN, server, db, r.schema, r.name, ref.column, r.generation)


def expected_graph(gt: GroundTruth, activity_ids=None) -> ProvenanceGraph:
    """Graph an unfiltered extraction must produce for the given activities (default: all).

    Built directly from the declared lineage: each node gets the union of its
    own and all descendants' lineage, attached to its run and static entities.
    """
    wanted = None if activity_ids is None else set(activity_ids)
    g = ProvenanceGraph()

    def ent(t, qn):
        guid = make_guid(t, qn)
        if guid not in g.entities:
            g.add_entity(Entity(guid, t, qn))
        return guid

    for spec in gt.activities:
        if wanted is not None and spec.activity_id not in wanted:
            continue
        server, db = spec.server, spec.database
        conn = ent(EntityType.CLIENT_CONNECTION, qualified_name(EntityType.CLIENT_CONNECTION, server, spec.client_host,
                                                                spec.client_app_name, spec.username))

        def visit(node, node_id, proc, parent_run):
            st, rt = _STATIC_OF_CLASS[node.event_class]
            ident = text_identity(node.text)
            if node.event_class is EventClass.SP_STATEMENT and proc:
                ident = f"{proc}/{ident}"
            static = ent(st, qualified_name(st, db, ident))
            run = ent(rt, qualified_name(rt, spec.activity_id, node_id))
            g.add_relationship(RelationshipType.RUN_OF, run, static)
            g.add_relationship(RelationshipType.CONNECTION_OF, run, conn)
            if parent_run:
                g.add_relationship(RelationshipType.SPAWNED_BY, run, parent_run)
            holders = [static, run]
            child_parent, child_proc = run, proc
            if node.procedure:
                p_static = ent(EntityType.STORED_PROCEDURE, qualified_name(EntityType.STORED_PROCEDURE, db, node.procedure))
                p_run = ent(EntityType.STORED_PROCEDURE_RUN,
                            qualified_name(EntityType.STORED_PROCEDURE_RUN, spec.activity_id, node_id, node.procedure))
                g.add_relationship(RelationshipType.RUN_OF, p_run, p_static)
                g.add_relationship(RelationshipType.CONNECTION_OF, p_run, conn)
                g.add_relationship(RelationshipType.SPAWNED_BY, p_run, run)
                holders += [p_static, p_run]
                child_parent, child_proc = p_run, node.procedure
            ins, outs, cmap = set(node.lineage.inputs), set(node.lineage.outputs), {}
            for k, v in node.lineage.column_map.items():
                cmap.setdefault(k, set()).update(v)
            for i, c in enumerate(node.children):
                ci, co, cc = visit(c, f"{node_id}.{i}", child_proc, child_parent)
                ins |= ci
                outs |= co
                for k, v in cc.items():
                    cmap.setdefault(k, set()).update(v)
            for ref in ins | outs:
                ent(*_ds_name(ref, server, db))
            for k, v in cmap.items():
                for ref in (k, *v):
                    cg = ent(EntityType.COLUMN, _col_name(ref, server, db))
                    g.add_relationship(RelationshipType.COLUMN_OF, cg, make_guid(*_ds_name(ref.relation, server, db)))
            mapping = {_col_name(k, server, db): {_col_name(c, server, db) for c in v} for k, v in cmap.items()}
            for h in holders:
                for ref in ins:
                    g.add_relationship(RelationshipType.INPUT, make_guid(*_ds_name(ref, server, db)), h)
                for ref in outs:
                    g.add_relationship(RelationshipType.OUTPUT, h, make_guid(*_ds_name(ref, server, db)))
                if mapping:
                    g.entities[h].add_column_mapping(mapping)
            return ins, outs, cmap

        visit(spec.root, "0", None, None)
    return g


def graph_signature(g: ProvenanceGraph):
    """Attribute-free view of a graph for equality checks: entity names, named edges, column maps."""
    ents = g.entities
    names = frozenset((e.type.value, e.qualified_name) for e in ents.values())
    edges = frozenset((t.value, ents[a].qualified_name, ents[b].qualified_name) for t, a, b in g.relationships)
    cmaps = {e.qualified_name: {k: frozenset(v) for k, v in e.column_mapping.items()}
             for e in ents.values() if e.column_mapping}
    return names, edges, cmaps


def save_ground_truth(gt: GroundTruth, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(gt.to_json(), fh, indent=1)
