"""Query-event records and the NDJSON log format.

One line of a log is one JSON object::

    {"activity_id": "3", "seq": 0, "kind": "started", "class": "sql_batch",
     "ts": 1000, "query_text": "EXECUTE SyncNewSales 2", "username": "etl", ...}

Metadata fields are flattened next to the envelope keys. Keys that are not
part of the schema are kept verbatim in ``QueryEvent.extras`` so a record
survives a parse/serialize round trip unchanged.
"""
from __future__ import annotations

import contextlib
import enum
import gc
import json
import os
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Optional

from .errors import InvariantViolation, MalformedRecord

_EMPTY: Mapping = MappingProxyType({})


class EventKind(enum.Enum):
    STARTED = "started"
    COMPLETED = "completed"
    # Only present in plan-carrying logs; never enters a QQTree as a node.
    PLAN = "plan"


class EventClass(enum.Enum):
    SQL_BATCH = "sql_batch"
    SQL_STATEMENT = "sql_statement"
    SP_STATEMENT = "sp_statement"


_KINDS = {k.value: k for k in EventKind}
_CLASSES = {c.value: c for c in EventClass}

METADATA_STRINGS = ("username", "client_app_name", "client_host", "server_name", "database_name")
METADATA_COUNTERS = (
    "cpu_time_us",
    "duration_us",
    "rows_inserted",
    "rows_updated",
    "rows_deleted",
    "rows_returned",
)
_ENVELOPE = ("activity_id", "seq", "kind", "class", "ts", "query_text", "plan_payload")
KNOWN_KEYS = frozenset(_ENVELOPE + METADATA_STRINGS + METADATA_COUNTERS)


@dataclass(slots=True)
class EventMetadata:
    username: str = ""
    client_app_name: str = ""
    client_host: str = ""
    server_name: str = ""
    database_name: str = ""
    cpu_time_us: Optional[int] = None
    duration_us: Optional[int] = None
    rows_inserted: Optional[int] = None
    rows_updated: Optional[int] = None
    rows_deleted: Optional[int] = None
    rows_returned: Optional[int] = None

    def get(self, name, default=None):
        return getattr(self, name, default)


@dataclass(slots=True)
class QueryEvent:
    """A single started/completed record. Treat instances as immutable."""

    activity_id: str
    seq: int
    kind: EventKind
    event_class: EventClass
    timestamp: int
    query_text: str = ""
    metadata: EventMetadata = field(default_factory=EventMetadata)
    plan_payload: Optional[str] = None
    extras: Mapping = _EMPTY

    @property
    def order_key(self):
        return (self.timestamp, self.seq)

    @property
    def is_started(self):
        return self.kind is EventKind.STARTED

    @property
    def is_completed(self):
        return self.kind is EventKind.COMPLETED

    @property
    def is_plan(self):
        return self.kind is EventKind.PLAN


def parse_event_line(line, *, source=None, line_no=None, validate=True) -> QueryEvent:
    """Decode one NDJSON record.

    Raises:
        MalformedRecord: the line is not a JSON object, or a required field is
            missing or has the wrong type.
        InvariantViolation: the record decodes but breaks a record invariant
            (only when ``validate`` is true).
    """
    try:
        rec = json.loads(line)
    except ValueError as exc:
        raise MalformedRecord(f"invalid JSON: {exc}", source=source, line_no=line_no) from None
    return event_from_record(rec, source=source, line_no=line_no, validate=validate)


def event_from_record(rec, *, source=None, line_no=None, validate=True) -> QueryEvent:
    """Build an event from a decoded record; see :func:`parse_event_line` for errors."""
    if type(rec) is not dict:
        raise MalformedRecord("record is not a JSON object", source=source, line_no=line_no)
    get = rec.get
    activity_id = get("activity_id")
    seq = get("seq")
    ts = get("ts")
    kind = _KINDS.get(get("kind"))
    event_class = _CLASSES.get(get("class"))
    query_text = get("query_text", "")
    plan_payload = get("plan_payload")
    if (
        type(activity_id) is not str
        or type(seq) is not int
        or type(ts) is not int
        or kind is None
        or event_class is None
        or type(query_text) is not str
        or (plan_payload is not None and type(plan_payload) is not str)
    ):
        _envelope_error(rec, source, line_no)

    username = get("username")
    app = get("client_app_name")
    host = get("client_host")
    server = get("server_name")
    database = get("database_name")
    counters = (get("cpu_time_us"), get("duration_us"), get("rows_inserted"), get("rows_updated"),
                get("rows_deleted"), get("rows_returned"))
    for value in (username, app, host, server, database):
        if value is not None and type(value) is not str:
            _metadata_error(rec, source, line_no)
    negative = False
    for value in counters:
        if value is not None:
            if type(value) is not int:
                _metadata_error(rec, source, line_no)
            if value < 0:
                negative = True
    meta = EventMetadata(username or "", app or "", host or "", server or "", database or "", *counters)

    extras = _EMPTY
    if not rec.keys() <= KNOWN_KEYS:
        extras = {k: v for k, v in rec.items() if k not in KNOWN_KEYS}

    event = QueryEvent(activity_id, seq, kind, event_class, ts, query_text, meta, plan_payload, extras)
    if validate:
        # Cheap screen first; the full clause list is only built for bad records.
        suspicious = negative or seq < 0 or ts < 0 or not activity_id
        if kind is EventKind.STARTED:
            suspicious = suspicious or not query_text
        elif kind is EventKind.COMPLETED:
            suspicious = suspicious or counters[0] is None or counters[1] is None
        else:
            suspicious = suspicious or plan_payload is None
        if suspicious:
            problems = event_violations(event)
            if problems:
                raise InvariantViolation(problems)
    return event


def _metadata_error(rec, source, line_no):
    for key in METADATA_STRINGS:
        value = rec.get(key)
        if value is not None and not isinstance(value, str):
            raise MalformedRecord(f"field {key!r} must be a string", source=source, line_no=line_no)
    for key in METADATA_COUNTERS:
        value = rec.get(key)
        if value is not None and type(value) is not int:
            raise MalformedRecord(f"field {key!r} must be an integer", source=source, line_no=line_no)


def _envelope_error(rec, source, line_no):
    ctx = {"source": source, "line_no": line_no}
    for key in ("activity_id", "seq", "kind", "class", "ts"):
        if key not in rec:
            raise MalformedRecord(f"missing required field {key!r}", **ctx)
    if not isinstance(rec["activity_id"], str):
        raise MalformedRecord("field 'activity_id' must be a string", **ctx)
    if rec["kind"] not in _KINDS:
        raise MalformedRecord(f"unknown kind {rec['kind']!r}", **ctx)
    if rec["class"] not in _CLASSES:
        raise MalformedRecord(f"unknown class {rec['class']!r}", **ctx)
    for key in ("seq", "ts"):
        if type(rec[key]) is not int:
            raise MalformedRecord(f"field {key!r} must be an integer, got {rec[key]!r}", **ctx)
    if not isinstance(rec.get("query_text", ""), str):
        raise MalformedRecord("field 'query_text' must be a string", **ctx)
    raise MalformedRecord("field 'plan_payload' must be a string", **ctx)


def event_violations(e: QueryEvent) -> list[str]:
    problems = []
    if e.seq < 0:
        problems.append("seq must be non-negative")
    if e.timestamp < 0:
        problems.append("timestamp must be non-negative")
    if not e.activity_id:
        problems.append("activity_id must be non-empty")
    m = e.metadata
    if e.kind is EventKind.STARTED and not e.query_text:
        problems.append("started event requires non-empty query_text")
    if e.kind is EventKind.COMPLETED:
        if m.cpu_time_us is None:
            problems.append("completed event requires cpu_time_us")
        if m.duration_us is None:
            problems.append("completed event requires duration_us")
    if e.kind is EventKind.PLAN and e.plan_payload is None:
        problems.append("plan event requires plan_payload")
    for key in METADATA_COUNTERS:
        value = getattr(m, key)
        if value is not None and value < 0:
            problems.append(f"{key} must be non-negative")
    return problems


def validate_event(e: QueryEvent) -> None:
    """Raise :class:`InvariantViolation` listing every broken clause."""
    problems = event_violations(e)
    if problems:
        raise InvariantViolation(problems)


def event_to_record(e: QueryEvent) -> dict:
    rec = {
        "activity_id": e.activity_id,
        "seq": e.seq,
        "kind": e.kind.value,
        "class": e.event_class.value,
        "ts": e.timestamp,
    }
    if e.query_text:
        rec["query_text"] = e.query_text
    m = e.metadata
    for key in METADATA_STRINGS:
        value = getattr(m, key)
        if value:
            rec[key] = value
    for key in METADATA_COUNTERS:
        value = getattr(m, key)
        if value is not None:
            rec[key] = value
    if e.plan_payload is not None:
        rec["plan_payload"] = e.plan_payload
    if e.extras:
        rec.update(e.extras)
    return rec


def serialize_event(e: QueryEvent) -> str:
    """One NDJSON line (no trailing newline)."""
    return json.dumps(event_to_record(e), ensure_ascii=False, separators=(",", ":"))


# -- log files ---------------------------------------------------------------

LOG_NAME_RE = re.compile(r"^events-(?P<partition>[^-]+)-(?P<first_seq>\d+)\.ndjson$")


def log_file_name(partition, first_seq):
    return f"events-{partition}-{first_seq}.ndjson"


def list_log_files(location) -> list[str]:
    """Log files under ``location`` (a file or a directory), in (partition, first_seq) order."""
    if os.path.isfile(location):
        return [location]
    found = []
    for name in os.listdir(location):
        m = LOG_NAME_RE.match(name)
        if m:
            found.append((m.group("partition"), int(m.group("first_seq")), os.path.join(location, name)))
    found.sort()
    return [path for _, _, path in found]


@contextlib.contextmanager
def gc_paused():
    """Suspend the cyclic GC while allocating many long-lived acyclic objects."""
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def parse_log_bytes(data: bytes, *, source=None, validate=True) -> list[QueryEvent]:
    """Parse a whole NDJSON buffer.

    The buffer is decoded as one JSON array when possible (much faster than
    line by line); any decoding problem falls back to per-line parsing so the
    error names the offending line.
    """
    with gc_paused():
        return _parse_log_bytes(data, source, validate)


_CHUNK_BYTES = 8 << 20


def _parse_log_bytes(data, source, validate):
    out = []
    line_base = 0  # lines before the current chunk
    pos = 0
    n = len(data)
    while pos < n:
        end = data.find(b"\n", min(pos + _CHUNK_BYTES, n) - 1)
        end = n if end < 0 else end + 1
        chunk = data[pos:end]
        out.extend(_parse_chunk(chunk, source, validate, line_base))
        line_base += chunk.count(b"\n")
        pos = end
    return out


def _parse_chunk(data, source, validate, line_base):
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        text = None
    records = None
    first_line = line_base + 1
    if text is not None:
        body = text.strip()
        if "\n\n" not in body and "\r" not in body:
            first_line += text[: len(text) - len(text.lstrip())].count("\n")
            try:
                records = json.loads("[" + body.replace("\n", ",") + "]") if body else []
            except ValueError:
                records = None
            # A line holding two comma-separated objects would slip through the array trick.
            if records is not None and body and len(records) != body.count("\n") + 1:
                records = None
    if records is None:
        return _parse_lines(data, source, validate, line_base)
    return [event_from_record(rec, source=source, line_no=i, validate=validate) for i, rec in enumerate(records, start=first_line)]


def _parse_lines(data, source, validate, line_base=0):
    events = []
    append = events.append
    for line_no, raw in enumerate(data.splitlines(), start=line_base + 1):
        if not raw.strip():
            continue
        append(parse_event_line(raw, source=source, line_no=line_no, validate=validate))
    return events


def read_events(path, *, validate=True) -> list[QueryEvent]:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_log_bytes(data, source=path, validate=validate)


def iter_serialized(events: Iterable[QueryEvent]) -> Iterator[str]:
    for e in events:
        yield serialize_event(e)


def write_log(events: Iterable[QueryEvent], directory, *, partition="0", max_events_per_file=None) -> list[str]:
    """Write events as one or more NDJSON files and return their paths.

    A new file is started every ``max_events_per_file`` events; each file is
    named after the seq of its first event.
    """
    os.makedirs(directory, exist_ok=True)
    paths = []
    fh = None
    count = 0
    try:
        for e in events:
            if fh is None or (max_events_per_file and count >= max_events_per_file):
                if fh is not None:
                    fh.close()
                path = os.path.join(directory, log_file_name(partition, e.seq))
                fh = open(path, "w", encoding="utf-8")
                paths.append(path)
                count = 0
            fh.write(serialize_event(e))
            fh.write("\n")
            count += 1
    finally:
        if fh is not None:
            fh.close()
    return paths


def sort_events(events: Iterable[QueryEvent]) -> list[QueryEvent]:
    return sorted(events, key=lambda e: (e.timestamp, e.seq))
