"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition."""


class DegenerateScoreSet(ValueError):
    """A ranking metric was requested on a set lacking positives or negatives."""


class DataFormatError(ValueError):
    """A raster, manifest, or checkpoint file is malformed."""


class ConfigError(ValueError):
    """A run configuration is missing, inconsistent, or fails validation."""


class NumericFailure(RuntimeError):
    """A numeric invariant broke at runtime (non-finite activations, divergence)."""


class TrainingDiverged(NumericFailure):
    """Training produced a non-finite loss; carries the last finite state."""

    def __init__(self, message, last_good_params=None, history=None):
        super().__init__(message)
        self.last_good_params = last_good_params
        self.history = history if history is not None else []
