"""
Structured exceptions for udslab.

Every error carries the offending data as attributes so callers (and the
sweep harness, which records failures per arm) can inspect what went wrong
without parsing the message.
"""


class UdsLabError(Exception):
    """Base class for all udslab errors."""


class DimensionMismatch(UdsLabError):
    """Raised when two objects disagree on the size of the state/action space."""

    def __init__(self, what, expected, got):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected shape {expected}, got {got}")


class InvalidDistribution(UdsLabError):
    """Raised when a probability table violates normalization or sign constraints."""

    def __init__(self, what, detail):
        self.what = what
        self.detail = detail
        super().__init__(f"{what} is not a valid distribution: {detail}")


class SupportViolation(UdsLabError):
    """Raised when p puts mass where q has none (ratio p/q undefined)."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"support violation at index {index}")


class CoverageViolation(UdsLabError):
    """Raised when required (s, a) pairs or states have no data."""

    def __init__(self, missing, kind="pairs"):
        self.missing = list(missing)
        self.kind = kind
        preview = ", ".join(str(m) for m in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"{len(self.missing)} uncovered {kind}: {preview}{more}")


class LabelViolation(UdsLabError):
    """Raised when reward labels are present where they must be absent, or vice versa."""

    def __init__(self, dataset_label, count, expected_labeled):
        self.dataset_label = dataset_label
        self.count = count
        self.expected_labeled = expected_labeled
        state = "unlabeled" if expected_labeled else "labeled"
        super().__init__(
            f"dataset '{dataset_label}' has {count} {state} transitions "
            f"but must be fully {'labeled' if expected_labeled else 'unlabeled'}"
        )


class EmptyDatasetError(UdsLabError):
    """Raised when an operation needs at least one transition or record."""


class MissingContext(UdsLabError):
    """Raised when a strategy needs context (oracle, conservative Q, ...) that was not supplied."""

    def __init__(self, kind, missing):
        self.kind = kind
        self.missing = missing
        super().__init__(f"strategy '{kind}' requires context '{missing}'")


class ConvergenceError(UdsLabError):
    """Raised when an iterative solver hits its iteration cap."""

    def __init__(self, message, best=None, residual=None, iterations=None):
        self.best = best
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual}, iterations={iterations})")


class UnknownKeyError(UdsLabError, KeyError):
    """Raised when a record/axis key does not exist."""

    def __init__(self, key, available):
        self.key = key
        self.available = list(available)
        super().__init__(f"unknown key '{key}'; available: {', '.join(self.available)}")

    def __str__(self):
        return self.args[0]


class ConfigError(UdsLabError):
    """Raised for malformed experiment or acceptance configuration."""


class CoverageWarning(UserWarning):
    """Issued when the lenient coverage fallback fills uncovered pairs."""
