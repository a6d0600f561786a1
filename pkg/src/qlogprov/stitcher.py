"""Attach statement provenance to query runs and aggregate it up the run tree and across runs."""
from __future__ import annotations

import logging
from collections import defaultdict

from .analysis import ColumnRef, RelationRef
from .errors import MissingNode
from .graph import Entity, EntityType, ProvenanceGraph, RelationshipType, make_guid, qualified_name

logger = logging.getLogger(__name__)

_REL_TYPE = {
    "table": EntityType.TABLE,
    "view": EntityType.VIEW,
    "external": EntityType.EXTERNAL_FILE,
    "output": EntityType.QUERY_OUTPUT,
}

INPUT = RelationshipType.INPUT
OUTPUT = RelationshipType.OUTPUT


class _Namer:
    """Memoized RelationRef/ColumnRef -> (guid, qualified name) for one server/database."""

    __slots__ = ("server", "database", "_rel", "_col")

    def __init__(self, server, database):
        self.server = server
        self.database = database
        self._rel = {}
        self._col = {}

    def relation(self, ref: RelationRef):
        hit = self._rel.get(ref)
        if hit is None:
            etype = _REL_TYPE.get(ref.kind, EntityType.TABLE)
            if etype is EntityType.EXTERNAL_FILE:
                qn = qualified_name(etype, ref.name)
            else:
                qn = qualified_name(etype, self.server, self.database, ref.schema, ref.name, ref.generation)
            hit = (make_guid(etype, qn), qn, etype)
            self._rel[ref] = hit
        return hit

    def column(self, ref: ColumnRef):
        hit = self._col.get(ref)
        if hit is None:
            r = ref.relation
            if r.kind == "external":
                qn = f"{qualified_name(EntityType.EXTERNAL_FILE, r.name)}#{ref.column}"
            else:
                qn = qualified_name(EntityType.COLUMN, self.server, self.database, r.schema, r.name, ref.column, r.generation)
            hit = (make_guid(EntityType.COLUMN, qn), qn)
            self._col[ref] = hit
        return hit


def _add_datasets(g: ProvenanceGraph, namer: _Namer, prov):
    for ref in prov.inputs | prov.outputs:
        guid, qn, etype = namer.relation(ref)
        if guid not in g.entities:
            g.add_entity(Entity(guid, etype, qn, {"name": ref.name, "schema": ref.schema}))
    for out_col, in_cols in prov.column_map.items():
        for ref in (out_col, *in_cols):
            guid, qn = namer.column(ref)
            if guid not in g.entities:
                g.add_entity(Entity(guid, EntityType.COLUMN, qn, {"name": ref.column}))
                g.add_relationship(RelationshipType.COLUMN_OF, guid, namer.relation(ref.relation)[0])


class _Agg:
    __slots__ = ("inputs", "outputs", "cmap")

    def __init__(self):
        self.inputs = set()  # relation guids
        self.outputs = set()
        self.cmap = {}  # out col qn -> set of in col qns

    def absorb(self, other: "_Agg"):
        self.inputs |= other.inputs
        self.outputs |= other.outputs
        for k, v in other.cmap.items():
            cur = self.cmap.get(k)
            if cur is None:
                self.cmap[k] = set(v)
            else:
                cur |= v


def stitch(runtime, provenance: dict, tree, *, hooks=None, in_place=False) -> ProvenanceGraph:
    """Union the runtime and provenance extracts of one activity.

    Each node's own statement provenance plus the union over its children is
    attached, as Input/Output edges and a column mapping, to the node's run
    and static entities (and to the procedure entities of an EXECUTE node).
    The runtime extract is not modified unless ``in_place`` is set.
    """
    if hooks is not None:
        hooks.fire("stitcher", "start", provenance)
    missing = [nid for nid in provenance if nid not in runtime.node_map]
    if missing:
        raise MissingNode(f"provenance for unknown node(s) {missing[:5]} in activity {tree.activity_id}")
    g = runtime.graph if in_place else runtime.graph.copy()
    namer = _Namer(runtime.server, runtime.database)
    for prov in provenance.values():
        _add_datasets(g, namer, prov)

    # Post-order without recursion: children are finished before parents.
    order = list(tree.root.iter_preorder())
    aggs = {}
    for node in reversed(order):
        agg = _Agg()
        prov = provenance.get(node.node_id)
        if prov is not None:
            agg.inputs.update(namer.relation(r)[0] for r in prov.inputs)
            agg.outputs.update(namer.relation(r)[0] for r in prov.outputs)
            for out_col, in_cols in prov.column_map.items():
                key = namer.column(out_col)[1]
                vals = {namer.column(c)[1] for c in in_cols}
                cur = agg.cmap.get(key)
                if cur is None:
                    agg.cmap[key] = vals
                else:
                    cur |= vals
        for child in node.children:
            child_agg = aggs.pop(child.node_id, None)
            if child_agg is not None:
                agg.absorb(child_agg)
        aggs[node.node_id] = agg
        if not (agg.inputs or agg.outputs or agg.cmap):
            continue
        for static_guid, run_guid in runtime.targets(node.node_id):
            _attach(g, static_guid, agg)
            _attach(g, run_guid, agg)
    if hooks is not None:
        g = hooks.fire("stitcher", "end", g)
    return g


def _attach(g, guid, agg):
    rels = g.relationships
    for d in agg.inputs:
        rels.add((INPUT, d, guid))
    for d in agg.outputs:
        rels.add((OUTPUT, guid, d))
    if agg.cmap:
        g.entities[guid].add_column_mapping(agg.cmap)


def aggregate_across_runs(g: ProvenanceGraph, *, copy=True) -> ProvenanceGraph:
    """Give every static query the union of the provenance of its runs."""
    out = g.copy() if copy else g
    run_static = [(a, b) for t, a, b in out.relationships if t is RelationshipType.RUN_OF]
    ins = defaultdict(set)
    outs = defaultdict(set)
    for t, a, b in out.relationships:
        if t is INPUT:
            ins[b].add(a)
        elif t is OUTPUT:
            outs[a].add(b)
    for run, static in run_static:
        for d in ins.get(run, ()):
            out.relationships.add((INPUT, d, static))
        for d in outs.get(run, ()):
            out.relationships.add((OUTPUT, static, d))
        cm = out.entities[run].column_mapping
        if cm:
            out.entities[static].add_column_mapping(cm)
    return out


def column_rollup(g: ProvenanceGraph) -> ProvenanceGraph:
    """Roll column mappings (and the edges they require) up SpawnedBy links, then across runs."""
    out = g.copy()
    parent = {}
    for t, a, b in out.relationships:
        if t is RelationshipType.SPAWNED_BY:
            parent[a] = b
    children = defaultdict(list)
    for child, par in parent.items():
        children[par].append(child)
    ins = defaultdict(set)
    outs = defaultdict(set)
    for t, a, b in out.relationships:
        if t is INPUT:
            ins[b].add(a)
        elif t is OUTPUT:
            outs[a].add(b)
    roots = [r for r in children if r not in parent]
    # Iterative post-order over each SpawnedBy tree.
    for root in roots:
        stack = [(root, False)]
        while stack:
            run, done = stack.pop()
            if not done:
                stack.append((run, True))
                stack.extend((c, False) for c in children.get(run, ()))
                continue
            ent = out.entities.get(run)
            if ent is None:
                continue
            for c in children.get(run, ()):
                child = out.entities.get(c)
                if child is None:
                    continue
                if child.column_mapping:
                    ent.add_column_mapping(child.column_mapping)
                ins[run] |= ins.get(c, set())
                outs[run] |= outs.get(c, set())
            for d in ins.get(run, ()):
                out.relationships.add((INPUT, d, run))
            for d in outs.get(run, ()):
                out.relationships.add((OUTPUT, run, d))
    return aggregate_across_runs(out)
