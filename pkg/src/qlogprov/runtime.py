"""Process entities (queries and query runs) and their runtime relationships from a QQTree."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .analysis import procedure_name
from .errors import IncompleteNode
from .events import METADATA_COUNTERS, EventClass
from .graph import EntityType, ProvenanceGraph, RelationshipType, qualified_name, text_identity

logger = logging.getLogger(__name__)

DEFAULT_SERVER = "localhost"
DEFAULT_DATABASE = "master"

_STATIC_TYPE = {
    EventClass.SQL_BATCH: EntityType.BATCH,
    EventClass.SQL_STATEMENT: EntityType.ADHOC_STATEMENT,
    EventClass.SP_STATEMENT: EntityType.SP_STATEMENT,
}
_RUN_TYPE = {
    EventClass.SQL_BATCH: EntityType.BATCH_RUN,
    EventClass.SQL_STATEMENT: EntityType.ADHOC_STATEMENT_RUN,
    EventClass.SP_STATEMENT: EntityType.SP_STATEMENT_RUN,
}


@dataclass
class RuntimeExtract:
    graph: ProvenanceGraph
    node_map: dict  # node_id -> (static_guid, run_guid)
    exec_map: dict = field(default_factory=dict)  # node_id -> (procedure_guid, procedure_run_guid)
    server: str = DEFAULT_SERVER
    database: str = DEFAULT_DATABASE

    def targets(self, node_id):
        """All (static, run) guid pairs that represent ``node_id``."""
        out = [self.node_map[node_id]]
        extra = self.exec_map.get(node_id)
        if extra is not None:
            out.append(extra)
        return out

    def parent_run(self, node_id):
        """The run entity that children of ``node_id`` are spawned by."""
        extra = self.exec_map.get(node_id)
        return extra[1] if extra is not None else self.node_map[node_id][1]


def tree_context(tree):
    """(server, database) for dataset names, from the root event's metadata."""
    meta = tree.root.started_event.metadata
    return meta.server_name or DEFAULT_SERVER, meta.database_name or DEFAULT_DATABASE


def _run_attributes(node):
    started = node.started_event
    done = node.completed_event
    attrs = {
        "query_text": started.query_text,
        "username": started.metadata.username or done.metadata.username,
        "start_time": started.timestamp,
        "end_time": done.timestamp,
    }
    meta = done.metadata
    for key in METADATA_COUNTERS:
        value = meta.get(key)
        if value is not None:
            attrs[key] = value
    return attrs


def extract_runtime(tree, *, hooks=None) -> RuntimeExtract:
    """Walk the tree depth-first and emit query and query-run entities.

    Every node yields a static entity, a run entity and a RunOf edge. Runs
    are linked to their parent's run by SpawnedBy and to the root's client
    connection by ConnectionOf. A node whose text is ``EXECUTE <proc>``
    additionally yields the procedure and a procedure run; the procedure run
    is spawned by the node's run and the node's children are spawned by the
    procedure run.
    """
    server, database = tree_context(tree)
    root_meta = tree.root.started_event.metadata
    g = ProvenanceGraph()
    conn_qn = qualified_name(
        EntityType.CLIENT_CONNECTION,
        server,
        root_meta.client_host or "unknown",
        root_meta.client_app_name or "unknown",
        root_meta.username or "unknown",
    )
    conn = g.ensure(
        EntityType.CLIENT_CONNECTION,
        conn_qn,
        {
            "server_name": server,
            "client_host": root_meta.client_host,
            "client_app_name": root_meta.client_app_name,
            "username": root_meta.username,
        },
    )
    aid = tree.activity_id
    node_map = {}
    exec_map = {}
    add_rel = g.add_relationship
    # (node, enclosing procedure name, parent run guid)
    stack = [(tree.root, None, None)]
    while stack:
        node, proc, parent_run = stack.pop()
        if hooks is not None:
            # Observation only: dropping nodes happens on the tree, before extraction.
            hooks.fire_item("runtime", node)
        if node.completed_event is None:
            raise IncompleteNode(f"node {node.node_id} of activity {aid} has no completed event")
        cls = node.event_class
        text = node.query_text
        ts = node.completed_event.timestamp
        identity = text_identity(text)
        if cls is EventClass.SP_STATEMENT and proc:
            identity = f"{proc}/{identity}"
        static_type = _STATIC_TYPE[cls]
        static = g.ensure(static_type, qualified_name(static_type, database, identity), {"query_text": text}, ts)
        run_attrs = _run_attributes(node)
        if node.annotations:
            for key in ("compressed_iterations", "route"):
                if key in node.annotations:
                    run_attrs[key] = node.annotations[key]
        run_type = _RUN_TYPE[cls]
        run = g.ensure(run_type, qualified_name(run_type, aid, node.node_id), run_attrs, ts)
        add_rel(RelationshipType.RUN_OF, run.guid, static.guid)
        add_rel(RelationshipType.CONNECTION_OF, run.guid, conn.guid)
        if parent_run is not None:
            add_rel(RelationshipType.SPAWNED_BY, run.guid, parent_run)
        node_map[node.node_id] = (static.guid, run.guid)

        child_parent = run.guid
        child_proc = proc
        invoked = procedure_name(text)
        if invoked is not None:
            schema, name = invoked
            proc_name = f"{schema}.{name}"
            p_static = g.ensure(
                EntityType.STORED_PROCEDURE,
                qualified_name(EntityType.STORED_PROCEDURE, database, proc_name),
                {"name": proc_name},
                ts,
            )
            p_attrs = dict(run_attrs)
            p_attrs["procedure"] = proc_name
            p_run = g.ensure(
                EntityType.STORED_PROCEDURE_RUN,
                qualified_name(EntityType.STORED_PROCEDURE_RUN, aid, node.node_id, proc_name),
                p_attrs,
                ts,
            )
            add_rel(RelationshipType.RUN_OF, p_run.guid, p_static.guid)
            add_rel(RelationshipType.CONNECTION_OF, p_run.guid, conn.guid)
            add_rel(RelationshipType.SPAWNED_BY, p_run.guid, run.guid)
            exec_map[node.node_id] = (p_static.guid, p_run.guid)
            child_parent = p_run.guid
            child_proc = proc_name
        for child in reversed(node.children):
            stack.append((child, child_proc, child_parent))
    return RuntimeExtract(g, node_map, exec_map, server, database)
