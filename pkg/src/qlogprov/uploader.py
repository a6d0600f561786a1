"""Compile a provenance graph to catalog documents and deliver them in checkpointed batches."""
from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

from .errors import CorruptCheckpoint, SinkUnavailable, ValidationFailure
from .graph import GUID_NAMESPACE, Entity, EntityType, ProvenanceGraph, RelationshipType

logger = logging.getLogger(__name__)

TARGETS = ("atlas_json", "openlineage_json")
DEFAULT_BATCH_SIZE = 100
MAX_ATTEMPTS = 5
BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0


# -- compilation -------------------------------------------------------------------


def _attributes(e):
    attrs = {"qualifiedName": e.qualified_name}
    for k in sorted(e.attributes):
        attrs[k] = e.attributes[k]
    if e.column_mapping is not None:
        attrs["column_mapping"] = {k: sorted(v) for k, v in sorted(e.column_mapping.items())}
    return attrs


def _relationship_guid(rel_type, a, b):
    return str(uuid.uuid5(GUID_NAMESPACE, f"{rel_type.value}|{a}|{b}"))


def compile_graph(g: ProvenanceGraph, target: str = "atlas_json") -> list:
    """Ordered list of JSON-ready documents for ``target``.

    atlas_json: one document per entity (sorted by qualified name) followed by
    one per relationship. openlineage_json: one run event per run entity.

    Raises:
        ValidationFailure: a relationship refers to a missing entity.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown target format {target!r}")
    dangling = [r for r in g.relationships if r[1] not in g.entities or r[2] not in g.entities]
    if dangling:
        t, a, b = dangling[0]
        raise ValidationFailure(f"{len(dangling)} dangling relationship(s); first {t.value} {a} -> {b}")
    if target == "atlas_json":
        return _atlas(g)
    return _openlineage(g)


def _end(e):
    return {"guid": e.guid, "typeName": e.type.value, "uniqueAttributes": {"qualifiedName": e.qualified_name}}


def _atlas(g):
    ents = g.entities
    docs = [
        {"typeName": e.type.value, "guid": e.guid, "attributes": _attributes(e)}
        for e in sorted(ents.values(), key=lambda e: (e.qualified_name, e.type.value))
    ]
    rels = sorted(
        g.relationships,
        key=lambda r: (r[0].value, ents[r[1]].qualified_name, ents[r[2]].qualified_name),
    )
    for t, a, b in rels:
        docs.append(
            {
                "typeName": t.value,
                "guid": _relationship_guid(t, a, b),
                "end1": _end(ents[a]),
                "end2": _end(ents[b]),
            }
        )
    return docs


def _iso(us):
    return datetime.fromtimestamp(us / 1e6, tz=timezone.utc).isoformat().replace("+00:00", "Z")


def _openlineage(g):
    ents = g.entities
    ins, outs, static_of = {}, {}, {}
    for t, a, b in g.relationships:
        if t is RelationshipType.INPUT:
            ins.setdefault(b, []).append(ents[a].qualified_name)
        elif t is RelationshipType.OUTPUT:
            outs.setdefault(a, []).append(ents[b].qualified_name)
        elif t is RelationshipType.RUN_OF:
            static_of[a] = ents[b].qualified_name
    docs = []
    for e in sorted((e for e in ents.values() if e.type.is_run), key=lambda e: e.qualified_name):
        facets = {k: e.attributes[k] for k in sorted(e.attributes)}
        col_lineage = {}
        for out_col, in_cols in sorted((e.column_mapping or {}).items()):
            col_lineage[out_col] = sorted(in_cols)
        docs.append(
            {
                "eventType": "COMPLETE",
                "eventTime": _iso(e.attributes.get("end_time", 0)),
                "run": {"runId": e.guid, "facets": facets},
                "job": {"namespace": "qlogprov", "name": static_of.get(e.guid, e.qualified_name), "type": e.type.value},
                "inputs": [{"namespace": "qlogprov", "name": n} for n in sorted(ins.get(e.guid, ()))],
                "outputs": [
                    {
                        "namespace": "qlogprov",
                        "name": n,
                        "facets": {"columnLineage": {k: v for k, v in col_lineage.items() if k.startswith(n + "#")}},
                    }
                    for n in sorted(outs.get(e.guid, ()))
                ],
            }
        )
    return docs


def is_relationship_doc(doc) -> bool:
    return "end1" in doc


def graph_from_atlas(docs) -> ProvenanceGraph:
    """Rebuild a graph from atlas_json documents (the inverse of :func:`compile_graph`).

    Raises:
        ValidationFailure: a document is not an entity or relationship document.
    """
    g = ProvenanceGraph()
    rels = []
    for i, doc in enumerate(docs):
        try:
            if is_relationship_doc(doc):
                rels.append((RelationshipType(doc["typeName"]), doc["end1"]["guid"], doc["end2"]["guid"]))
                continue
            attrs = dict(doc["attributes"])
            qn = attrs.pop("qualifiedName")
            cm = attrs.pop("column_mapping", None)
            e = Entity(doc["guid"], EntityType(doc["typeName"]), qn, attrs)
            if cm is not None:
                e.column_mapping = {k: set(v) for k, v in cm.items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationFailure(f"document {i} is malformed: {exc!r}") from None
        g.add_entity(e)
    g.relationships.update(rels)
    return g


# -- batching --------------------------------------------------------------------------


@dataclass
class Batch:
    batch_id: int
    kind: str  # "entities" | "relationships"
    docs: list

    def body(self):
        return {"batch_id": self.batch_id, self.kind: self.docs}

    def to_json(self) -> str:
        return json.dumps(self.body(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def partition_batches(docs, batch_size: int = DEFAULT_BATCH_SIZE) -> list:
    """Entity batches first, then relationship batches; ids count from 1."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    entities = [d for d in docs if not is_relationship_doc(d)]
    rels = [d for d in docs if is_relationship_doc(d)]
    batches = []
    for kind, items in (("entities", entities), ("relationships", rels)):
        for i in range(0, len(items), batch_size):
            batches.append(Batch(len(batches) + 1, kind, items[i : i + batch_size]))
    return batches


# -- delivery ----------------------------------------------------------------------------


@dataclass
class UploadCheckpoint:
    delivered: set = field(default_factory=set)

    def to_json(self):
        return {"delivered": sorted(self.delivered)}

    @classmethod
    def from_json(cls, doc):
        try:
            return cls({int(x) for x in doc["delivered"]})
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpoint(f"bad upload checkpoint: {exc}") from None


def load_upload_checkpoint(path) -> UploadCheckpoint:
    if not path or not os.path.exists(path):
        return UploadCheckpoint()
    try:
        with open(path, encoding="utf-8") as fh:
            return UploadCheckpoint.from_json(json.load(fh))
    except ValueError as exc:
        raise CorruptCheckpoint(f"cannot read upload checkpoint {path}: {exc}") from None


def save_upload_checkpoint(cp: UploadCheckpoint, path):
    from .collector import atomic_write_json

    atomic_write_json(path, cp.to_json())


class RetryableError(Exception):
    pass


class FileSink:
    """Writes each batch to ``<directory>/batch-<n>.json``."""

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    def send(self, batch: Batch):
        path = os.path.join(self.directory, f"batch-{batch.batch_id}.json")
        tmp = path + ".tmp"
        try:
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(batch.to_json())
            os.replace(tmp, path)
        except OSError as exc:
            raise RetryableError(str(exc)) from None

    def __repr__(self):
        return f"FileSink({self.directory!r})"


class HttpSink:
    """POSTs each batch to ``<endpoint>/entities/bulk``; any 2xx is success."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def send(self, batch: Batch):
        req = urllib.request.Request(
            self.endpoint + "/entities/bulk",
            data=batch.to_json().encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                resp.read()
        except urllib.error.HTTPError as exc:
            raise RetryableError(f"HTTP {exc.code}") from None
        except (urllib.error.URLError, OSError) as exc:
            raise RetryableError(str(getattr(exc, "reason", exc))) from None

    def __repr__(self):
        return f"HttpSink({self.endpoint!r})"


def make_sink(target):
    if hasattr(target, "send"):
        return target
    target = str(target)
    if target.startswith(("http://", "https://")):
        return HttpSink(target)
    return FileSink(target)


@dataclass
class UploadReport:
    delivered: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    attempts: dict = field(default_factory=dict)  # batch id -> number of attempts

    def to_json(self):
        return {
            "delivered": self.delivered,
            "skipped": self.skipped,
            "failed": self.failed,
            "attempts": {str(k): v for k, v in self.attempts.items()},
        }


def upload(
    sink,
    batches,
    resume: Optional[UploadCheckpoint] = None,
    *,
    checkpoint_path=None,
    max_attempts=MAX_ATTEMPTS,
    base_delay=BACKOFF_BASE,
    factor=BACKOFF_FACTOR,
    sleep=time.sleep,
    hooks=None,
) -> UploadReport:
    """Deliver batches in order, skipping those already in the checkpoint.

    A failed send is retried after ``base_delay * factor**(attempt-1)``
    seconds, up to ``max_attempts`` attempts per batch. The checkpoint is
    written after every delivered batch.

    Raises:
        SinkUnavailable: a batch still fails after ``max_attempts``; the
            checkpoint keeps everything delivered so far.
    """
    sink = make_sink(sink)
    cp = resume if resume is not None else (load_upload_checkpoint(checkpoint_path) if checkpoint_path else UploadCheckpoint())
    report = UploadReport()
    for batch in batches:
        if batch.batch_id in cp.delivered:
            report.skipped.append(batch.batch_id)
            continue
        if hooks is not None:
            batch = hooks.fire("uploader", "pre_send", batch)
        attempt = 0
        while True:
            attempt += 1
            try:
                sink.send(batch)
                break
            except RetryableError as exc:
                logger.warning("batch %d attempt %d/%d failed: %s", batch.batch_id, attempt, max_attempts, exc)
                if attempt >= max_attempts:
                    report.attempts[batch.batch_id] = attempt
                    report.failed.append(batch.batch_id)
                    if hooks is not None:
                        hooks.fire("uploader", "post_send", (batch, False))
                    raise SinkUnavailable(
                        f"batch {batch.batch_id} failed after {attempt} attempts: {exc}",
                        batch_id=batch.batch_id,
                        attempts=attempt,
                    ) from None
                sleep(base_delay * factor ** (attempt - 1))
        report.attempts[batch.batch_id] = attempt
        report.delivered.append(batch.batch_id)
        cp.delivered.add(batch.batch_id)
        if checkpoint_path:
            save_upload_checkpoint(cp, checkpoint_path)
        if hooks is not None:
            hooks.fire("uploader", "post_send", (batch, True))
    return report
