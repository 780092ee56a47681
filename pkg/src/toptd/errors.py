"""Exception types shared across the package."""


class SizeLimitError(ValueError):
    """Requested construction would exceed the configured table-size cap."""


class InvalidPolicyError(ValueError):
    """Policy rows are not valid probability distributions."""


class ConvergenceError(RuntimeError):
    """A fixed-point solver failed to reach its tolerance."""


class DegenerateSupportError(ValueError):
    """A policy carries no probability mass on a required candidate set."""


class MaskedAccessError(LookupError):
    """A masked table entry was read in a context requiring a finite value."""


class TeacherNotOptimalError(ValueError):
    """The supplied teacher is not the soft-optimal policy of the MDP."""


class TrainingDivergedError(RuntimeError):
    """The training objective became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""
