"""Expandable relation matrix between old and new segmentation classes.

At every incremental step t the matrix holds one spatial relation per
(old class, new class) pair. Relations are phrased from the new class's
perspective: NEW_SUBSET_OF_OLD means the new-class region lies inside the
old-class region. Matrices are immutable snapshots; advancing a step
produces a fresh matrix whose old side absorbs the previous new classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from .errors import (
    DuplicateClassError,
    FormatError,
    MissingPairError,
    UnknownClassError,
)

CLASS_GROUPS = ("region", "unit", "cell", "lesion")
SCALES = ("5x", "10x", "20x", "40x")


class RelationKind(Enum):
    """Spatial relation of a new class j to an old class i."""

    NEW_SUPERSET_OF_OLD = "SUPERSET"    # old region lies strictly inside new
    NEW_SUBSET_OF_OLD = "SUBSET"        # new region lies inside old (or equal)
    MUTUALLY_EXCLUSIVE = "EXCLUSIVE"    # regions never overlap
    UNRELATED = "UNRELATED"             # partial overlap / no constraint

    @classmethod
    def from_wire(cls, name: str) -> "RelationKind":
        for kind in cls:
            if kind.value == name:
                return kind
        raise FormatError(f"unknown relation tag {name!r}")


@dataclass(frozen=True)
class ClassInfo:
    """Registry entry for one segmentation class."""

    id: int
    name: str
    group: str
    scale: str
    step_introduced: int

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"class id must be >= 0, got {self.id}")
        if self.group not in CLASS_GROUPS:
            raise ValueError(f"group must be one of {CLASS_GROUPS}, got {self.group!r}")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.step_introduced < 1:
            raise ValueError("step_introduced must be >= 1")

    @property
    def scale_index(self) -> int:
        return SCALES.index(self.scale)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "group": self.group,
            "scale": self.scale,
            "step_introduced": self.step_introduced,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassInfo":
        try:
            return cls(
                id=int(d["id"]),
                name=str(d["name"]),
                group=str(d["group"]),
                scale=str(d["scale"]),
                step_introduced=int(d["step_introduced"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad class entry: {exc}") from exc


def _check_unique_ids(classes: Sequence[ClassInfo], what: str) -> None:
    seen = set()
    for c in classes:
        if c.id in seen:
            raise DuplicateClassError(f"duplicate id {c.id} in {what}")
        seen.add(c.id)


class RelationMatrix:
    """Immutable m x n grid of relations between old and new classes.

    Rows index old classes (C_1..t-1), columns index new classes (C_t).
    Lookup is total over the registered ids once construction succeeds.
    """

    def __init__(
        self,
        old_classes: Sequence[ClassInfo],
        new_classes: Sequence[ClassInfo],
        entries: Sequence[Sequence[RelationKind]],
        step: int,
        previous: Optional["RelationMatrix"] = None,
    ):
        self._old = tuple(old_classes)
        self._new = tuple(new_classes)
        self._entries = tuple(tuple(row) for row in entries)
        self._step = int(step)
        self._previous = previous
        self._validate()
        self._row_of = {c.id: r for r, c in enumerate(self._old)}
        self._col_of = {c.id: j for j, c in enumerate(self._new)}

    def _validate(self) -> None:
        _check_unique_ids(self._old, "old_classes")
        _check_unique_ids(self._new, "new_classes")
        old_ids = {c.id for c in self._old}
        new_ids = {c.id for c in self._new}
        overlap = old_ids & new_ids
        if overlap:
            raise DuplicateClassError(f"ids {sorted(overlap)} appear in both registries")
        if len(self._entries) != len(self._old):
            raise MissingPairError(
                f"expected {len(self._old)} rows, got {len(self._entries)}"
            )
        for r, row in enumerate(self._entries):
            if len(row) != len(self._new):
                raise MissingPairError(
                    f"row {r} has {len(row)} entries, expected {len(self._new)}"
                )
            for cell in row:
                if not isinstance(cell, RelationKind):
                    raise MissingPairError(f"row {r} holds a non-relation cell {cell!r}")

    # -- accessors ---------------------------------------------------------

    @property
    def old_classes(self) -> tuple:
        return self._old

    @property
    def new_classes(self) -> tuple:
        return self._new

    @property
    def entries(self) -> tuple:
        return self._entries

    @property
    def step(self) -> int:
        return self._step

    @property
    def previous(self) -> Optional["RelationMatrix"]:
        """Snapshot of the preceding step, if this matrix was advanced from one."""
        return self._previous

    @property
    def shape(self) -> tuple:
        return (len(self._old), len(self._new))

    def all_class_infos(self) -> tuple:
        return self._old + self._new

    def lookup(self, old_id: int, new_id: int) -> RelationKind:
        """Return the relation stored for (old_id, new_id)."""
        if old_id not in self._row_of:
            raise UnknownClassError(f"id {old_id} is not an old class at step {self._step}")
        if new_id not in self._col_of:
            raise UnknownClassError(f"id {new_id} is not a new class at step {self._step}")
        return self._entries[self._row_of[old_id]][self._col_of[new_id]]

    def relation_history(self, old_id: int, new_id: int) -> RelationKind:
        """Look up a pair in this matrix or any earlier snapshot in the chain."""
        m: Optional[RelationMatrix] = self
        while m is not None:
            if old_id in m._row_of and new_id in m._col_of:
                return m.lookup(old_id, new_id)
            m = m._previous
        raise UnknownClassError(
            f"pair ({old_id}, {new_id}) was never an (old, new) pair in this chain"
        )

    def __eq__(self, other) -> bool:
        # History links are in-memory bookkeeping; equality is structural.
        if not isinstance(other, RelationMatrix):
            return NotImplemented
        return (
            self._step == other._step
            and self._old == other._old
            and self._new == other._new
            and self._entries == other._entries
        )

    def __hash__(self):
        return hash((self._step, self._old, self._new, self._entries))

    def __repr__(self):
        m, n = self.shape
        return f"RelationMatrix(step={self._step}, shape={m}x{n})"


def build_matrix(
    old_classes: Sequence[ClassInfo],
    new_classes: Sequence[ClassInfo],
    relation_assignments: Mapping[tuple, RelationKind],
    step: int = 1,
) -> RelationMatrix:
    """Build a fully populated matrix from per-pair assignments.

    Every (old_id, new_id) pair must be covered; extra keys referencing
    unregistered ids are rejected.
    """
    _check_unique_ids(old_classes, "old_classes")
    _check_unique_ids(new_classes, "new_classes")
    old_ids = {c.id for c in old_classes}
    new_ids = {c.id for c in new_classes}
    overlap = old_ids & new_ids
    if overlap:
        raise DuplicateClassError(f"ids {sorted(overlap)} appear in both lists")
    for (i, j) in relation_assignments:
        if i not in old_ids or j not in new_ids:
            raise UnknownClassError(f"assignment ({i}, {j}) references unregistered ids")
    entries = []
    for old in old_classes:
        row = []
        for new in new_classes:
            key = (old.id, new.id)
            if key not in relation_assignments:
                raise MissingPairError(f"pair {key} has no assigned relation")
            row.append(relation_assignments[key])
        entries.append(row)
    return RelationMatrix(old_classes, new_classes, entries, step=step)


def advance_step(
    matrix: RelationMatrix,
    incoming_classes: Sequence[ClassInfo],
    relation_assignments: Mapping[tuple, RelationKind],
) -> RelationMatrix:
    """Move to step t+1: previous old+new become old, incoming become new."""
    merged_old = list(matrix.old_classes) + list(matrix.new_classes)
    advanced = build_matrix(
        merged_old, incoming_classes, relation_assignments, step=matrix.step + 1
    )
    return RelationMatrix(
        advanced.old_classes,
        advanced.new_classes,
        advanced.entries,
        step=advanced.step,
        previous=matrix,
    )


def lookup(matrix: RelationMatrix, old_id: int, new_id: int) -> RelationKind:
    """Module-level alias for RelationMatrix.lookup."""
    return matrix.lookup(old_id, new_id)


# -- serialization ----------------------------------------------------------
# Wire format (UTF-8 JSON): {"step", "old_classes", "new_classes", "entries"}
# with entries holding the short relation tags (SUBSET, SUPERSET, ...).

def matrix_to_dict(matrix: RelationMatrix) -> dict:
    return {
        "step": matrix.step,
        "old_classes": [c.to_dict() for c in matrix.old_classes],
        "new_classes": [c.to_dict() for c in matrix.new_classes],
        "entries": [[cell.value for cell in row] for row in matrix.entries],
    }


def matrix_from_dict(doc: Mapping) -> RelationMatrix:
    try:
        step = int(doc["step"])
        old = [ClassInfo.from_dict(d) for d in doc["old_classes"]]
        new = [ClassInfo.from_dict(d) for d in doc["new_classes"]]
        entries = [[RelationKind.from_wire(cell) for cell in row] for row in doc["entries"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed matrix document: {exc}") from exc
    try:
        return RelationMatrix(old, new, entries, step=step)
    except (MissingPairError, DuplicateClassError) as exc:
        raise FormatError(str(exc)) from exc


def serialize(matrix: RelationMatrix) -> bytes:
    return json.dumps(matrix_to_dict(matrix), sort_keys=True).encode("utf-8")


def deserialize(data: bytes) -> RelationMatrix:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"not a matrix document: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("matrix document must be a JSON object")
    return matrix_from_dict(doc)


def save_matrix(matrix: RelationMatrix, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(matrix))


def load_matrix(path) -> RelationMatrix:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def ordered_pairs(matrix: RelationMatrix) -> Iterable[tuple]:
    """All (old_id, new_id) pairs covered by the matrix."""
    for old in matrix.old_classes:
        for new in matrix.new_classes:
            yield old.id, new.id
