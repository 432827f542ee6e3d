"""Exception types shared across the package."""


class LmPanelError(Exception):
    """Base class for all package-specific errors."""


class InvalidGradeError(LmPanelError):
    """Raw grade outside the declared raw-grade domain of a merge map."""


class InvalidCategoryError(LmPanelError):
    """Response code outside an item's category range, or not an integer."""


class DuplicateObservationError(LmPanelError):
    """Two input rows claim the same (subject, time) slot."""


class SchemaMismatchError(LmPanelError):
    """File or panel contents disagree with the declared schema."""


class NumericOverflowError(LmPanelError):
    """A link function received a non-finite linear predictor."""


class ModelMismatchError(LmPanelError):
    """Parameters, model spec, and data have inconsistent dimensions."""


class MStepFailureError(LmPanelError):
    """A Newton M-step failed to make progress within its halving budget."""


class FitFailureError(LmPanelError):
    """Every EM start failed; no usable fit is available."""
