"""Relation-guided class-incremental segmentation on synthetic phantoms."""

__version__ = "0.1.0"

from .relations import ClassInfo, RelationKind, RelationMatrix  # noqa: F401
