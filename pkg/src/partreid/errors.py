"""Exception taxonomy shared by every module.

The CLI maps these onto exit codes: configuration/usage/validation -> 1,
I/O -> 2, numeric failure -> 3.
"""


class PartReidError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PartReidError):
    """Inconsistent shapes, invalid config values, impossible requests."""


class UsageError(PartReidError):
    """An operation was called with arguments it cannot accept."""


class ValidationError(PartReidError):
    """A dataset or manifest violates its invariants.

    `violations` lists every problem found, not just the first.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataIOError(PartReidError):
    """A file could not be read or written."""


class NumericError(PartReidError):
    """A computation produced a non-finite or otherwise unusable value."""


class EvaluationError(PartReidError):
    """The query/gallery structure cannot be evaluated."""
