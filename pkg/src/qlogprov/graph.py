"""Atlas-style provenance graph: typed entities, typed relationships, stable ids."""
from __future__ import annotations

import enum
import hashlib
import re
import uuid
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional

from .errors import TypeConflict, ValidationFailure

GUID_NAMESPACE = uuid.UUID("6f0c5f5e-3f6b-4c8e-9a55-0d1e7c1b2a90")


class EntityType(enum.Enum):
    TABLE = "table"
    VIEW = "view"
    EXTERNAL_FILE = "external_file"
    COLUMN = "column"
    QUERY_OUTPUT = "query_output"
    STORED_PROCEDURE = "stored_procedure"
    STORED_PROCEDURE_RUN = "stored_procedure_run"
    BATCH = "batch"
    BATCH_RUN = "batch_run"
    ADHOC_STATEMENT = "adhoc_statement"
    ADHOC_STATEMENT_RUN = "adhoc_statement_run"
    SP_STATEMENT = "sp_statement"
    SP_STATEMENT_RUN = "sp_statement_run"
    CLIENT_CONNECTION = "client_connection"

    @property
    def is_dataset(self):
        return self in DATASET_TYPES

    @property
    def is_relation(self):
        return self in RELATION_TYPES

    @property
    def is_process(self):
        return self in STATIC_TYPES or self in RUN_TYPES

    @property
    def is_run(self):
        return self in RUN_TYPES

    @property
    def is_static(self):
        return self in STATIC_TYPES


RELATION_TYPES = frozenset({EntityType.TABLE, EntityType.VIEW, EntityType.EXTERNAL_FILE, EntityType.QUERY_OUTPUT})
DATASET_TYPES = RELATION_TYPES | {EntityType.COLUMN}
RUN_OF_STATIC = {
    EntityType.STORED_PROCEDURE_RUN: EntityType.STORED_PROCEDURE,
    EntityType.BATCH_RUN: EntityType.BATCH,
    EntityType.ADHOC_STATEMENT_RUN: EntityType.ADHOC_STATEMENT,
    EntityType.SP_STATEMENT_RUN: EntityType.SP_STATEMENT,
}
STATIC_OF_RUN = {v: k for k, v in RUN_OF_STATIC.items()}
RUN_TYPES = frozenset(RUN_OF_STATIC)
STATIC_TYPES = frozenset(RUN_OF_STATIC.values())

# Aggregation levels used when trimming a graph.
LEVEL_TYPES = {
    "statement": frozenset(
        {
            EntityType.ADHOC_STATEMENT,
            EntityType.ADHOC_STATEMENT_RUN,
            EntityType.SP_STATEMENT,
            EntityType.SP_STATEMENT_RUN,
        }
    ),
    "batch": frozenset({EntityType.BATCH, EntityType.BATCH_RUN}),
    "procedure": frozenset({EntityType.STORED_PROCEDURE, EntityType.STORED_PROCEDURE_RUN}),
}
ALL_LEVELS = frozenset(LEVEL_TYPES)


class RelationshipType(enum.Enum):
    INPUT = "input"  # dataset -> process
    OUTPUT = "output"  # process -> dataset
    RUN_OF = "run_of"  # run -> static query
    SPAWNED_BY = "spawned_by"  # child run -> parent run
    CONNECTION_OF = "connection_of"  # run -> client connection
    COLUMN_OF = "column_of"  # column -> relation


@lru_cache(maxsize=1 << 18)
def make_guid(entity_type: EntityType, qualified_name: str) -> str:
    return str(uuid.uuid5(GUID_NAMESPACE, f"{entity_type.value}|{qualified_name}"))


_WS_RE = re.compile(r"\s+")


def normalize_query_text(text: str) -> str:
    return _WS_RE.sub(" ", text.strip().rstrip(";").strip()).casefold()


def text_identity(text: str) -> str:
    return hashlib.blake2b(normalize_query_text(text).encode("utf-8"), digest_size=10).hexdigest()


def qualified_name(kind, *parts) -> str:
    """Deterministic qualified name for an entity of ``kind``.

    Datasets take ``(server, db, schema, object[, column][, generation])``,
    external files ``(path,)``, static queries ``(db, identity)``, runs
    ``(activity_id, node_id[, suffix])`` and connections
    ``(server, client_host, client_app, username)``.
    """
    if not parts:
        raise ValueError("qualified_name needs at least one part")
    kind = EntityType(kind) if not isinstance(kind, EntityType) else kind
    if kind is EntityType.EXTERNAL_FILE:
        return f"file://{parts[0]}"
    if kind in (EntityType.TABLE, EntityType.VIEW, EntityType.QUERY_OUTPUT):
        server, db, schema, obj = parts[:4]
        generation = parts[4] if len(parts) > 4 else 1
        name = f"ds://{server}/{db}/{schema}/{obj}"
        return name if not generation or generation <= 1 else f"{name}@{generation}"
    if kind is EntityType.COLUMN:
        server, db, schema, obj, column = parts[:5]
        generation = parts[5] if len(parts) > 5 else 1
        base = qualified_name(EntityType.TABLE, server, db, schema, obj, generation)
        return f"{base}#{column}"
    if kind in STATIC_TYPES:
        db, identity = parts[:2]
        return f"q://{db}/{identity}"
    if kind in RUN_TYPES:
        return "run://" + "/".join(str(p) for p in parts)
    if kind is EntityType.CLIENT_CONNECTION:
        server, host, app, user = parts[:4]
        return f"conn://{server}/{host}/{app}/{user}"
    raise ValueError(f"no naming scheme for {kind}")


@dataclass(slots=True)
class Entity:
    guid: str
    type: EntityType
    qualified_name: str
    attributes: dict = field(default_factory=dict)
    column_mapping: Optional[dict] = None  # output column qn -> set of input column qns
    ts: int = 0  # timestamp of the observation that last wrote the attributes

    @classmethod
    def create(cls, entity_type, qualified_name, attributes=None, ts=0):
        return cls(make_guid(entity_type, qualified_name), entity_type, qualified_name, dict(attributes or {}), None, ts)

    def add_column_mapping(self, mapping):
        if not mapping:
            return
        if self.column_mapping is None:
            self.column_mapping = {}
        cm = self.column_mapping
        for out_col, in_cols in mapping.items():
            existing = cm.get(out_col)
            if existing is None:
                cm[out_col] = set(in_cols)
            else:
                existing.update(in_cols)

    def copy(self):
        cm = None if self.column_mapping is None else {k: set(v) for k, v in self.column_mapping.items()}
        return Entity(self.guid, self.type, self.qualified_name, dict(self.attributes), cm, self.ts)


class ProvenanceGraph:
    """Entities keyed by guid plus a set of ``(RelationshipType, from_guid, to_guid)`` triples."""

    __slots__ = ("entities", "relationships", "_by_name")

    def __init__(self, entities=None, relationships=None):
        self.entities = {}
        self._by_name = {}
        self.relationships = set()
        for e in entities or ():
            self.add_entity(e)
        for r in relationships or ():
            self.relationships.add(r)

    def __len__(self):
        return len(self.entities) + len(self.relationships)

    def size(self) -> int:
        """|V| + |E|."""
        return len(self.entities) + len(self.relationships)

    def __eq__(self, other):
        if not isinstance(other, ProvenanceGraph):
            return NotImplemented
        if self.relationships != other.relationships or self.entities.keys() != other.entities.keys():
            return False
        for guid, e in self.entities.items():
            o = other.entities[guid]
            if (e.type, e.qualified_name, e.attributes, e.column_mapping) != (
                o.type,
                o.qualified_name,
                o.attributes,
                o.column_mapping,
            ):
                return False
        return True

    def __repr__(self):
        return f"ProvenanceGraph(entities={len(self.entities)}, relationships={len(self.relationships)})"

    def add_entity(self, entity: Entity) -> Entity:
        """Insert ``entity`` or fold it into the existing one with the same guid."""
        existing = self.entities.get(entity.guid)
        if existing is None:
            other = self._by_name.get(entity.qualified_name)
            if other is not None and other.type is not entity.type:
                raise TypeConflict(
                    f"{entity.qualified_name} is both {other.type.value} and {entity.type.value}"
                )
            self.entities[entity.guid] = entity
            self._by_name[entity.qualified_name] = entity
            return entity
        if entity.ts > existing.ts:
            existing.attributes.update(entity.attributes)
            existing.ts = entity.ts
        else:
            for k, v in entity.attributes.items():
                existing.attributes.setdefault(k, v)
        if entity.column_mapping:
            existing.add_column_mapping(entity.column_mapping)
        return existing

    def ensure(self, entity_type, qn, attributes=None, ts=0) -> Entity:
        guid = make_guid(entity_type, qn)
        e = self.entities.get(guid)
        if e is None:
            e = self.add_entity(Entity(guid, entity_type, qn, dict(attributes or {}), None, ts))
        elif attributes:
            self.add_entity(Entity(guid, entity_type, qn, dict(attributes), None, ts))
        return e

    def add_relationship(self, rel_type: RelationshipType, from_guid: str, to_guid: str):
        self.relationships.add((rel_type, from_guid, to_guid))

    def by_name(self, qn) -> Optional[Entity]:
        return self._by_name.get(qn)

    def of_type(self, *types) -> list:
        wanted = set(types)
        return [e for e in self.entities.values() if e.type in wanted]

    def edges(self, rel_type=None, from_guid=None, to_guid=None):
        for r in self.relationships:
            if rel_type is not None and r[0] is not rel_type:
                continue
            if from_guid is not None and r[1] != from_guid:
                continue
            if to_guid is not None and r[2] != to_guid:
                continue
            yield r

    def inputs_of(self, process_guid) -> set:
        return {self.entities[f].qualified_name for t, f, to in self.relationships if t is RelationshipType.INPUT and to == process_guid}

    def outputs_of(self, process_guid) -> set:
        return {self.entities[to].qualified_name for t, f, to in self.relationships if t is RelationshipType.OUTPUT and f == process_guid}

    def copy(self) -> "ProvenanceGraph":
        g = ProvenanceGraph()
        for e in self.entities.values():
            g.add_entity(e.copy())
        g.relationships = set(self.relationships)
        return g

    def remove_entities(self, guids: Iterable[str]):
        guids = set(guids)
        for guid in guids:
            e = self.entities.pop(guid, None)
            if e is not None and self._by_name.get(e.qualified_name) is e:
                del self._by_name[e.qualified_name]
        self.relationships = {r for r in self.relationships if r[1] not in guids and r[2] not in guids}

    def validate(self) -> list:
        """Return a list of integrity problems (empty when the graph is sound)."""
        problems = []
        ents = self.entities
        for rel in self.relationships:
            t, a, b = rel
            if a not in ents or b not in ents:
                problems.append(f"dangling {t.value} edge {a} -> {b}")
                continue
            ta, tb = ents[a].type, ents[b].type
            if t is RelationshipType.INPUT and not (ta.is_relation and tb.is_process):
                problems.append(f"input edge {ta.value} -> {tb.value}")
            elif t is RelationshipType.OUTPUT and not (ta.is_process and tb.is_relation):
                problems.append(f"output edge {ta.value} -> {tb.value}")
            elif t is RelationshipType.RUN_OF and RUN_OF_STATIC.get(ta) is not tb:
                problems.append(f"run_of edge {ta.value} -> {tb.value}")
            elif t is RelationshipType.SPAWNED_BY and not (ta.is_run and tb.is_run):
                problems.append(f"spawned_by edge {ta.value} -> {tb.value}")
            elif t is RelationshipType.CONNECTION_OF and not (ta.is_run and tb is EntityType.CLIENT_CONNECTION):
                problems.append(f"connection_of edge {ta.value} -> {tb.value}")
            elif t is RelationshipType.COLUMN_OF and not (ta is EntityType.COLUMN and tb.is_relation):
                problems.append(f"column_of edge {ta.value} -> {tb.value}")
        names = {}
        for e in ents.values():
            if e.guid != make_guid(e.type, e.qualified_name):
                problems.append(f"guid of {e.qualified_name} is not derived from its type and name")
            if e.qualified_name in names:
                problems.append(f"duplicate qualified name {e.qualified_name}")
            names[e.qualified_name] = e
            if e.column_mapping is not None and not e.type.is_process:
                problems.append(f"column_mapping on non-process {e.qualified_name}")
        problems.extend(self._column_mapping_problems(names))
        return problems

    def _column_mapping_problems(self, names):
        problems = []
        column_parent = {}
        for t, a, b in self.relationships:
            if t is RelationshipType.COLUMN_OF:
                column_parent[a] = b
        inputs = {}
        outputs = {}
        for t, a, b in self.relationships:
            if t is RelationshipType.INPUT:
                inputs.setdefault(b, set()).add(a)
            elif t is RelationshipType.OUTPUT:
                outputs.setdefault(a, set()).add(b)
        for e in self.entities.values():
            if not e.column_mapping:
                continue
            ins = inputs.get(e.guid, set())
            outs = outputs.get(e.guid, set())
            for out_col, in_cols in e.column_mapping.items():
                oc = names.get(out_col)
                if oc is None or column_parent.get(oc.guid) not in outs:
                    problems.append(f"{e.qualified_name}: output column {out_col} lacks an output edge")
                for in_col in in_cols:
                    ic = names.get(in_col)
                    if ic is None or column_parent.get(ic.guid) not in ins:
                        problems.append(f"{e.qualified_name}: input column {in_col} lacks an input edge")
        return problems

    def check(self):
        problems = self.validate()
        if problems:
            raise ValidationFailure(f"{len(problems)} problem(s); first: {problems[0]}")


def merge(g1: ProvenanceGraph, g2: ProvenanceGraph) -> ProvenanceGraph:
    """Set union of two graphs; attribute conflicts go to the later observation."""
    out = g1.copy()
    merge_into(out, g2)
    return out


def merge_into(target: ProvenanceGraph, other: ProvenanceGraph, *, copy=True) -> ProvenanceGraph:
    """Fold ``other`` into ``target``; ``copy=False`` hands over entities of a graph that is discarded afterwards."""
    for e in other.entities.values():
        target.add_entity(e.copy() if copy else e)
    target.relationships |= other.relationships
    return target


def merge_all(graphs: Iterable[ProvenanceGraph]) -> ProvenanceGraph:
    out = ProvenanceGraph()
    for g in graphs:
        merge_into(out, g)
    return out
