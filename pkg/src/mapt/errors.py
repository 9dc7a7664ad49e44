"""Exception hierarchy with machine-parsable categories for the CLI."""


class MaptError(Exception):
    """Base error. ``category`` is the stable one-word identifier printed by the CLI."""

    category = "error"


class InvalidIntrinsicsError(MaptError):
    category = "invalid-intrinsics"


class InvalidRotationError(MaptError):
    category = "invalid-rotation"


class InvalidValueError(MaptError):
    """Input violates a documented value constraint (non-unit quaternion, confidence < 1, ...)."""

    category = "invalid-value"


class ShapeError(MaptError):
    category = "shape-mismatch"


class EmptyDepthError(MaptError):
    category = "empty-depth"


class DegenerateError(MaptError):
    category = "degenerate"


class RankDeficientError(DegenerateError):
    category = "rank-deficient"


class InsufficientComponentError(MaptError):
    category = "insufficient-component"


class NumericOverflowError(MaptError):
    category = "numeric-overflow"


class RetryBudgetError(MaptError):
    category = "retry-exhausted"


class InvalidModalityError(MaptError):
    category = "invalid-modality"


class FormatError(MaptError):
    category = "format"
