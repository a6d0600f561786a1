"""A local mirror of the source database catalog, maintained by DDL replay."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Optional

from .errors import CorruptCheckpoint

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = "dbo"

OBJECT_KINDS = ("table", "view", "procedure", "function", "external")


def object_key(schema: Optional[str], name: str) -> str:
    return f"{schema or DEFAULT_SCHEMA}.{name}".casefold()


@dataclass(frozen=True)
class CatalogObject:
    schema: str
    name: str
    kind: str
    generation: int = 1
    columns: tuple = ()  # ((name, type), ...)
    definition_text: Optional[str] = None
    dropped: bool = False

    @property
    def key(self):
        return object_key(self.schema, self.name)

    @property
    def column_names(self):
        return [c for c, _ in self.columns]

    def to_json(self):
        doc = {
            "schema": self.schema,
            "name": self.name,
            "kind": self.kind,
            "generation": self.generation,
            "columns": [list(c) for c in self.columns],
        }
        if self.definition_text is not None:
            doc["definition_text"] = self.definition_text
        if self.dropped:
            doc["dropped"] = True
        return doc

    @classmethod
    def from_json(cls, doc):
        return cls(
            doc["schema"],
            doc["name"],
            doc["kind"],
            int(doc.get("generation", 1)),
            tuple((c[0], c[1]) for c in doc.get("columns", ())),
            doc.get("definition_text"),
            bool(doc.get("dropped", False)),
        )


class CatalogState:
    """Name -> object map. Instances are never mutated after construction;
    every change goes through :meth:`with_object` / :meth:`with_dropped`."""

    __slots__ = ("_objects",)

    def __init__(self, objects=None):
        self._objects = dict(objects or {})

    @property
    def objects(self):
        return dict(self._objects)

    def __len__(self):
        return sum(1 for o in self._objects.values() if not o.dropped)

    def __eq__(self, other):
        return isinstance(other, CatalogState) and self._objects == other._objects

    def __repr__(self):
        live = sorted(o.key for o in self._objects.values() if not o.dropped)
        return f"CatalogState({live})"

    def lookup(self, schema, name) -> Optional[CatalogObject]:
        obj = self._objects.get(object_key(schema, name))
        if obj is None or obj.dropped:
            return None
        return obj

    def record(self, schema, name) -> Optional[CatalogObject]:
        """Like :meth:`lookup` but also returns tombstones of dropped objects."""
        return self._objects.get(object_key(schema, name))

    def with_object(self, obj: CatalogObject) -> "CatalogState":
        """Create or redefine an object. Recreating a dropped name bumps its generation."""
        prev = self._objects.get(obj.key)
        generation = 1
        if prev is not None:
            generation = prev.generation + 1 if prev.dropped else prev.generation
        objects = dict(self._objects)
        objects[obj.key] = replace(obj, generation=generation, dropped=False)
        return CatalogState(objects)

    def with_dropped(self, schema, name) -> "CatalogState":
        prev = self._objects.get(object_key(schema, name))
        if prev is None or prev.dropped:
            return self
        objects = dict(self._objects)
        objects[prev.key] = replace(prev, dropped=True)
        return CatalogState(objects)

    def to_json(self):
        return {"objects": [o.to_json() for _, o in sorted(self._objects.items())]}

    @classmethod
    def from_json(cls, doc):
        objs = {}
        for item in doc.get("objects", ()):
            o = CatalogObject.from_json(item)
            objs[o.key] = o
        return cls(objs)

    @classmethod
    def from_tables(cls, tables: dict, schema=DEFAULT_SCHEMA) -> "CatalogState":
        """Convenience constructor: ``{"T": ["a", "b"]}`` -> tables with untyped columns."""
        state = cls()
        for name, cols in tables.items():
            state = state.with_object(CatalogObject(schema, name, "table", 1, tuple((c, "") for c in cols)))
        return state


def save_catalog(state: CatalogState, path) -> None:
    from .collector import atomic_write_json

    atomic_write_json(path, state.to_json())


def load_catalog(path) -> CatalogState:
    if not path or not os.path.exists(path):
        return CatalogState()
    try:
        with open(path, encoding="utf-8") as fh:
            return CatalogState.from_json(json.load(fh))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"cannot read catalog snapshot {path}: {exc}") from None
