"""Exception hierarchy.

Every error carries a short ``category`` (the class name) so the CLI can
print a single machine-parsable line on failure.
"""


class InfkitError(Exception):
    """Base class for all errors raised by this package."""

    @property
    def category(self) -> str:
        return type(self).__name__


# linalg
class NotSPD(InfkitError):
    pass


class DimensionMismatch(InfkitError):
    pass


class ConvergenceFailure(InfkitError):
    pass


class NotPowerOfTwo(InfkitError):
    pass


# gradstore
class NoValidationExamples(InfkitError):
    pass


class BadMagic(InfkitError):
    pass


class UnsupportedVersion(InfkitError):
    pass


class TruncatedFile(InfkitError):
    pass


class ChecksumMismatch(InfkitError):
    pass


class WidthMismatch(InfkitError):
    pass


class MissingMeta(InfkitError):
    pass


class NonFiniteEntry(InfkitError):
    pass


# compress
class BudgetTooLarge(InfkitError):
    pass


class PcaNeedsGradients(InfkitError):
    pass


class LograNeedsLinearLayers(InfkitError):
    pass


class PlanMismatch(InfkitError):
    pass


# influence
class AllZeroGradients(InfkitError):
    pass


class InfeasibleDense(InfkitError):
    pass


# trainer
class NotBinary(InfkitError):
    pass


class DivergedLoss(InfkitError):
    pass


class EmptyTrainSet(InfkitError):
    pass


# eval
class DegenerateClasses(InfkitError):
    pass


# theory
class SingularIntermediate(InfkitError):
    pass


class SingularInput(InfkitError):
    pass


# cli
class ConfigError(InfkitError):
    pass
