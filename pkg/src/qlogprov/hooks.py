"""Hook points: named places in the pipeline where user functions can observe or rewrite state.

A point is a ``(component, kind)`` pair. ``kind`` is one of

* ``start`` (component start), ``end`` (component end),
* ``pre_send`` / ``post_send`` (around a network send),
* ``per_item`` (once per item at the end of a loop over items).

Functions at ordinary points receive the point's state and may return a
replacement (``None`` keeps the state). Functions at ``per_item`` points
receive one item; returning ``None`` drops the item.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

from .errors import UnknownPoint

logger = logging.getLogger(__name__)

KINDS = ("start", "end", "pre_send", "post_send", "per_item")
_SYMBOLS = {"start": "•", "end": "★", "pre_send": "■", "post_send": "◆", "per_item": "▲"}


@dataclass(frozen=True)
class HookPoint:
    component: str
    kind: str

    @property
    def symbol(self):
        return _SYMBOLS[self.kind]

    def __str__(self):
        return f"{self.component}{self.symbol}"


# The state each point hands to its functions.
POINTS = {
    HookPoint("collector.download", "start"): "None",
    HookPoint("collector.parse", "end"): "list[QueryEvent]",
    HookPoint("collector.sort", "end"): "list[Activity] sorted by trigger time",
    HookPoint("collector.activity", "per_item"): "Activity",
    HookPoint("collector.qqtree", "per_item"): "(Activity, QQTree)",
    HookPoint("collector", "end"): "list[(Activity, QQTree)]",
    HookPoint("runtime", "start"): "QQTree",
    HookPoint("runtime", "per_item"): "QQTreeNode (observe only)",
    HookPoint("runtime", "end"): "RuntimeExtract",
    HookPoint("provenance", "start"): "SqlScript",
    HookPoint("provenance", "per_item"): "StatementProvenance",
    HookPoint("provenance", "end"): "dict node_id -> StatementProvenance",
    HookPoint("stitcher", "start"): "dict node_id -> StatementProvenance",
    HookPoint("stitcher", "end"): "ProvenanceGraph",
    HookPoint("uploader", "start"): "ProvenanceGraph",
    HookPoint("uploader", "pre_send"): "Batch",
    HookPoint("uploader", "post_send"): "(Batch, delivered: bool)",
    HookPoint("uploader", "end"): "UploadReport",
}


def point(component: str, kind: str) -> HookPoint:
    p = HookPoint(component, kind)
    if p not in POINTS:
        raise UnknownPoint(f"no hook point {component!r}/{kind!r}")
    return p


class HookRegistry:
    """Registered functions per point, called in registration order."""

    def __init__(self):
        self._hooks = {}
        self._ids = itertools.count(1)
        self._index = {}
        self._frozen = False

    def register(self, hook_point, fn, *, name=None) -> int:
        if isinstance(hook_point, tuple) and not isinstance(hook_point, HookPoint):
            hook_point = HookPoint(*hook_point)
        if hook_point not in POINTS:
            raise UnknownPoint(f"no hook point {hook_point}")
        if self._frozen:
            raise RuntimeError("hook registry is frozen once the pipeline starts")
        reg_id = next(self._ids)
        self._hooks.setdefault(hook_point, []).append((reg_id, fn, name or getattr(fn, "__name__", "hook")))
        self._index[reg_id] = hook_point
        return reg_id

    def unregister(self, reg_id: int):
        p = self._index.pop(reg_id)
        self._hooks[p] = [h for h in self._hooks[p] if h[0] != reg_id]

    def freeze(self):
        self._frozen = True

    def functions(self, hook_point):
        return [fn for _, fn, _ in self._hooks.get(hook_point, ())]

    def __len__(self):
        return len(self._index)

    def fire(self, component, kind, state):
        fns = self._hooks.get(HookPoint(component, kind))
        if not fns:
            return state
        for _, fn, _ in fns:
            result = fn(state)
            if result is not None:
                state = result
        return state

    def fire_item(self, component, item):
        """Run the per-item functions of ``component``; ``None`` means the item was dropped."""
        fns = self._hooks.get(HookPoint(component, "per_item"))
        if not fns:
            return item
        for _, fn, _ in fns:
            item = fn(item)
            if item is None:
                return None
        return item

    def filter_items(self, component, items):
        fns = self._hooks.get(HookPoint(component, "per_item"))
        if not fns:
            return list(items)
        out = []
        for item in items:
            item = self.fire_item(component, item)
            if item is not None:
                out.append(item)
        return out
