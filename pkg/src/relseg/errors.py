"""Exception types shared across the package."""


class RelSegError(Exception):
    """Base class for all package errors."""


class MissingPairError(RelSegError):
    """A relation matrix was built without covering every (old, new) pair."""


class DuplicateClassError(RelSegError):
    """A class id appears more than once across the registries."""


class UnknownClassError(RelSegError):
    """A class id is not present in the relevant registry."""


class FormatError(RelSegError):
    """Malformed serialized data (matrix JSON, array files, checkpoints)."""


class LayoutError(RelSegError):
    """Phantom shapes could not be placed without violating constraints."""


class EmptyMaskError(RelSegError):
    """A mask expected to have foreground pixels is empty."""


class ShapeError(RelSegError):
    """Array arguments have incompatible or unsupported shapes."""


class InvalidMaskError(RelSegError):
    """A mask expected to be binary contains other values."""


class StepMismatchError(RelSegError):
    """Teacher/student/matrix step indices are inconsistent."""


class NonFiniteError(RelSegError):
    """A loss component is NaN or infinite."""


class DataError(RelSegError):
    """A dataset does not match the classes or step it was requested for."""


class EmptySplitError(RelSegError):
    """An aggregation split (old/new) contains no classes."""


class LengthMismatchError(RelSegError):
    """Paired samples have different lengths."""


class InsufficientDataError(RelSegError):
    """Too few samples for the requested statistical test."""
