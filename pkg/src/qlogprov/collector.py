"""Activity grouping, run checkpointing and QQTree construction."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import time
from array import array
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import CorruptCheckpoint, MalformedActivity, SourceUnavailable
from .events import EventClass, EventKind, QueryEvent, gc_paused, list_log_files, parse_log_bytes

logger = logging.getLogger(__name__)

DEFAULT_STALENESS_US = 24 * 3600 * 1_000_000
DEFAULT_PERIOD_US = 6 * 3600 * 1_000_000


@dataclass(slots=True)
class Activity:
    activity_id: str
    events: list  # QueryEvent, ordered by (timestamp, seq)

    @property
    def trigger_time(self) -> int:
        return self.events[0].timestamp

    @property
    def sort_key(self):
        first = self.events[0]
        return (first.timestamp, first.seq)

    @property
    def fingerprint(self) -> str:
        return activity_fingerprint(self.events)


def activity_fingerprint(events) -> str:
    flat = array("q")
    for e in events:
        flat.append(e.timestamp)
        flat.append(e.seq)
    return hashlib.blake2b(flat.tobytes(), digest_size=16).hexdigest()


class QQTreeNode:
    """One query run inside an activity.

    ``node_id`` is the path of child indices from the root ("0", "0.2.1").
    ``annotations`` carries filter bookkeeping such as
    ``compressed_iterations`` and the provenance ``route``.
    """

    __slots__ = ("node_id", "started_event", "completed_event", "children", "parent", "plan_payload", "annotations")

    def __init__(self, started_event, parent=None, node_id="0"):
        self.node_id = node_id
        self.started_event = started_event
        self.completed_event = None
        self.children = []
        self.parent = parent
        self.plan_payload = None
        self.annotations = {}

    @property
    def query_text(self) -> str:
        return self.started_event.query_text

    @property
    def event_class(self) -> EventClass:
        return self.started_event.event_class

    @property
    def start_key(self):
        return self.started_event.order_key

    @property
    def end_key(self):
        return self.completed_event.order_key if self.completed_event is not None else None

    def iter_preorder(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def __repr__(self):
        return f"QQTreeNode({self.node_id!r}, {self.query_text[:40]!r}, children={len(self.children)})"


@dataclass(slots=True)
class QQTree:
    activity_id: str
    root: QQTreeNode

    def nodes(self):
        return list(self.root.iter_preorder())

    def node_count(self) -> int:
        return sum(1 for _ in self.root.iter_preorder())

    def find(self, node_id):
        for node in self.root.iter_preorder():
            if node.node_id == node_id:
                return node
        raise KeyError(node_id)

    def shape(self):
        """Nested ``(query_text, [children...])`` tuples; handy for comparisons."""

        def walk(node):
            return (node.query_text, [walk(c) for c in node.children])

        return walk(self.root)

    @property
    def trigger_time(self):
        return self.root.started_event.timestamp


_EXEC_RE = re.compile(r"^\s*EXEC(UTE)?\b", re.IGNORECASE)


def starts_subtree_strict(event: QueryEvent) -> bool:
    """Literal subtree predicate: batches and EXECUTE statements open a subtree."""
    return event.event_class is EventClass.SQL_BATCH or bool(_EXEC_RE.match(event.query_text))


def build_qqtree(activity: Activity, *, strict_subtree=False) -> QQTree:
    """Match started/completed events with a stack and return the activity's QQTree.

    By default a new started event always becomes a child of the node on top
    of the stack. With ``strict_subtree`` the parent only changes for events
    accepted by :func:`starts_subtree_strict`.

    Plan events carry no structure; their payload is attached to the node
    that completed most recently.

    Raises:
        MalformedActivity: the first event is a completion, a completion does
            not match the open started event, or started events remain open.
    """
    aid = activity.activity_id
    events = activity.events
    if not events:
        raise MalformedActivity(aid, "activity has no events")

    stack = []  # (started_event, node)
    root = None
    cur_parent = None
    last_completed = None
    for e in events:
        kind = e.kind
        if kind is EventKind.STARTED:
            if e.activity_id != aid:
                raise MalformedActivity(aid, f"event seq={e.seq} belongs to activity {e.activity_id!r}")
            if not stack and root is None:
                node = QQTreeNode(e, None, "0")
                root = node
                cur_parent = node
            elif not stack:
                raise MalformedActivity(aid, f"second root started at seq={e.seq}")
            else:
                parent = stack[-1][1] if not strict_subtree else cur_parent
                node = QQTreeNode(e, parent, f"{parent.node_id}.{len(parent.children)}")
                parent.children.append(node)
                if strict_subtree and starts_subtree_strict(e):
                    cur_parent = node
            stack.append((e, node))
        elif kind is EventKind.COMPLETED:
            if not stack:
                if root is None:
                    raise MalformedActivity(aid, "activity starts with a completed event")
                raise MalformedActivity(aid, f"completed event seq={e.seq} has no open started event")
            started, node = stack.pop()
            if started.event_class is not e.event_class:
                raise MalformedActivity(
                    aid,
                    f"completed {e.event_class.value} (seq={e.seq}) does not match started "
                    f"{started.event_class.value} (seq={started.seq})",
                )
            if e.activity_id != started.activity_id:
                raise MalformedActivity(aid, f"completed event seq={e.seq} belongs to activity {e.activity_id!r}")
            if e.query_text and e.query_text != started.query_text:
                raise MalformedActivity(aid, f"completed event seq={e.seq} is for a different query")
            if e.order_key <= started.order_key:
                raise MalformedActivity(aid, f"completed event seq={e.seq} precedes its started event")
            node.completed_event = e
            last_completed = node
            if strict_subtree and starts_subtree_strict(started):
                cur_parent = node.parent
        else:
            if last_completed is not None:
                last_completed.plan_payload = e.plan_payload
    if stack:
        raise MalformedActivity(aid, f"{len(stack)} started event(s) without completion")
    return QQTree(aid, root)


def is_complete(events) -> Optional[bool]:
    """Balance check used by the collector before attempting tree construction.

    Returns True when every started event is closed, False when some are still
    open, and None when the sequence can never become well formed (a
    completion arrives with nothing open).
    """
    depth = 0
    seen_root = False
    for e in events:
        if e.kind is EventKind.STARTED:
            if depth == 0 and seen_root:
                return None
            depth += 1
            seen_root = True
        elif e.kind is EventKind.COMPLETED:
            depth -= 1
            if depth < 0:
                return None
    return seen_root and depth == 0


# -- checkpoint ----------------------------------------------------------------


@dataclass
class Checkpoint:
    last_run_start: int = 0
    processed: set = field(default_factory=set)  # {(activity_id, fingerprint)}

    def to_json(self) -> dict:
        return {"last_run_start": self.last_run_start, "processed": sorted([a, f] for a, f in self.processed)}

    @classmethod
    def from_json(cls, doc) -> "Checkpoint":
        if not isinstance(doc, dict) or "last_run_start" not in doc or "processed" not in doc:
            raise CorruptCheckpoint("checkpoint must contain 'last_run_start' and 'processed'")
        lrs = doc["last_run_start"]
        if type(lrs) is not int or lrs < 0:
            raise CorruptCheckpoint("last_run_start must be a non-negative integer")
        processed = set()
        for item in doc["processed"]:
            if not (isinstance(item, list) and len(item) == 2 and all(isinstance(x, str) for x in item)):
                raise CorruptCheckpoint(f"bad processed entry {item!r}")
            processed.add((item[0], item[1]))
        return cls(lrs, processed)


def atomic_write_json(path, doc):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(cp: Checkpoint, path) -> None:
    atomic_write_json(path, cp.to_json())


def load_checkpoint(path) -> Checkpoint:
    """Load a checkpoint; a missing file means "nothing processed yet"."""
    if not os.path.exists(path):
        return Checkpoint()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from None
    return Checkpoint.from_json(doc)


# -- collection ----------------------------------------------------------------


@dataclass
class CollectResult:
    activities: list
    checkpoint: Checkpoint
    deferred: list = field(default_factory=list)  # ids of incomplete activities within the horizon
    stale: list = field(default_factory=list)  # MalformedActivity for activities abandoned past the horizon
    timings: dict = field(default_factory=dict)
    events_read: int = 0
    bytes_read: int = 0

    def __iter__(self):
        return iter(self.activities)


def group_events(events: Iterable[QueryEvent]) -> dict:
    groups = defaultdict(list)
    for e in events:
        groups[e.activity_id].append(e)
    return groups


def collect(
    source,
    checkpoint: Optional[Checkpoint] = None,
    now: Optional[int] = None,
    *,
    staleness_us=DEFAULT_STALENESS_US,
    validate=True,
    hooks=None,
) -> CollectResult:
    """Read new events and return the complete, not yet processed activities.

    ``source`` is a directory of ``events-*.ndjson`` files, a single file, a
    list of paths, or an in-memory list of :class:`QueryEvent`. An activity is
    returned when it has an event newer than ``checkpoint.last_run_start``,
    its (id, fingerprint) pair was not processed before, and all its started
    events are closed. Open activities are deferred until they are older than
    ``staleness_us``, after which they are reported in ``stale``.
    """
    cp = checkpoint if checkpoint is not None else Checkpoint()
    if now is None:
        now = int(time.time() * 1_000_000)
    timings = {"LgRead": 0.0, "LgPars": 0.0, "QQT": 0.0}
    if hooks is not None:
        hooks.fire("collector.download", "start", None)

    events, nbytes = _load_events(source, timings, validate)

    if hooks is not None:
        events = hooks.fire("collector.parse", "end", events)

    t0 = time.perf_counter()
    with gc_paused():
        activities, deferred, stale, processed = _select(events, cp, now, staleness_us)
    timings["QQT"] += time.perf_counter() - t0
    if hooks is not None:
        activities = hooks.fire("collector.sort", "end", activities)

    new_cp = Checkpoint(max(cp.last_run_start, now), processed)
    return CollectResult(activities, new_cp, deferred, stale, timings, len(events), nbytes)


def _select(events, cp, now, staleness_us):
    groups = group_events(events)
    activities = []
    deferred = []
    stale = []
    processed = set(cp.processed)
    for aid, evs in groups.items():
        if not _is_sorted(evs):
            evs.sort(key=lambda e: (e.timestamp, e.seq))
        if evs[-1].timestamp <= cp.last_run_start:
            continue
        fp = activity_fingerprint(evs)
        if (aid, fp) in processed:
            continue
        state = is_complete(evs)
        if state is False:
            if evs[-1].timestamp < now - staleness_us:
                stale.append(MalformedActivity(aid, "activity never completed within the staleness horizon"))
                processed.add((aid, fp))
            else:
                deferred.append(aid)
            continue
        processed.add((aid, fp))
        activities.append(Activity(aid, evs))
    activities.sort(key=lambda a: a.sort_key)
    return activities, deferred, stale, processed


def _is_sorted(evs):
    keys = [(e.timestamp, e.seq) for e in evs]
    return all(a < b for a, b in zip(keys, keys[1:]))


def _load_events(source, timings, validate):
    if isinstance(source, (list, tuple)) and (not source or isinstance(source[0], QueryEvent)):
        return list(source), 0
    if isinstance(source, (str, os.PathLike)):
        if not os.path.exists(source):
            raise SourceUnavailable(f"log source {source} does not exist")
        paths = list_log_files(source)
    else:
        paths = list(source)
    events = []
    nbytes = 0
    for path in paths:
        t0 = time.perf_counter()
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise SourceUnavailable(f"cannot read {path}: {exc}") from None
        t1 = time.perf_counter()
        events.extend(parse_log_bytes(data, source=str(path), validate=validate))
        t2 = time.perf_counter()
        timings["LgRead"] += t1 - t0
        timings["LgPars"] += t2 - t1
        nbytes += len(data)
    return events, nbytes


def build_trees(activities, *, strict_subtree=False, on_error=None):
    """Build a QQTree per activity, skipping (and reporting) malformed ones."""
    with gc_paused():
        return _build_trees(activities, strict_subtree, on_error)


def _build_trees(activities, strict_subtree, on_error):
    out = []
    for activity in activities:
        try:
            out.append((activity, build_qqtree(activity, strict_subtree=strict_subtree)))
        except MalformedActivity as exc:
            logger.warning("skipping %s", exc)
            if on_error is not None:
                on_error(exc)
    return out
