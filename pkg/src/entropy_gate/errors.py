"""Exception hierarchy shared by every module.

Two families matter to callers (and to the CLI exit codes):
``ValidationError`` for malformed or inconsistent data, ``IoFailure`` for
filesystem problems.
"""


class EntropyGateError(Exception):
    """Base class for all package errors."""


class ValidationError(EntropyGateError, ValueError):
    """Input data violates a documented invariant."""


class IoFailure(EntropyGateError, OSError):
    """A file could not be read or written."""


# tensor / mask formats
class FormatError(ValidationError):
    pass


class MagicMismatch(FormatError):
    pass


class HeaderMalformed(FormatError):
    pass


class PayloadTruncated(FormatError):
    pass


class NotP5(FormatError):
    pass


class ProbabilityOutOfRange(ValidationError):
    pass


class RowNotNormalized(ValidationError):
    pass


class LabelExceedsClassCount(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


# shapes
class LengthMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


# stacking
class MissingFoldPrediction(ValidationError):
    pass


class FoldLeakage(ValidationError):
    pass


class GridTooLarge(ValidationError):
    pass


class FitnessEvaluationFailure(EntropyGateError):
    """Raised when the objective fails for a particular particle."""

    def __init__(self, particle, position, cause):
        self.particle = particle
        self.position = position
        super().__init__(
            f"fitness evaluation failed for particle {particle} at {list(position)}: {cause!r}"
        )
