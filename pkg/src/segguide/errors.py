"""Exception hierarchy shared across the package."""


class SegguideError(Exception):
    """Base class for every error raised by this package."""


class ConfigValidationError(SegguideError):
    """One or more config invariants are violated.

    ``violations`` is a list of short machine-readable codes such as
    ``VariantWeightConflict`` or ``NonPositiveLearningRate``, each followed
    by a human-readable detail.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class BackendNotLoadedError(SegguideError):
    pass


class ResolutionMismatchError(SegguideError):
    pass


class EmptyForegroundSetError(SegguideError):
    pass


class CacheCorruptError(SegguideError):
    pass


class UnsupportedArchError(SegguideError):
    pass


class ChannelMismatchError(SegguideError):
    pass


class KindMismatchError(SegguideError):
    pass


class NonFiniteLossError(SegguideError):
    """A loss evaluated to NaN/Inf; the training step must be aborted."""

    def __init__(self, message: str, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        super().__init__(message)


class UnpairedDataInPairedModeError(SegguideError):
    pass


class MissingFragmentError(SegguideError):
    pass


class UnknownCategoryError(SegguideError):
    pass


class EmptyResultError(SegguideError):
    pass


class MissingWeightsError(SegguideError):
    pass


class LayoutModeMismatchError(SegguideError):
    pass


class ExtractorMismatchError(SegguideError):
    pass


class NumericalFailureError(SegguideError):
    pass


class ShapeMismatchError(SegguideError):
    pass


class MissingGeneratorRoleError(SegguideError):
    pass
