"""Exception hierarchy shared by every tspace module."""


class TSpaceError(Exception):
    """Base class for all library errors."""


class InvalidRangeError(TSpaceError, ValueError):
    """A numeric argument lies outside its admissible range."""


class OrderError(TSpaceError, ValueError):
    """Two timesteps were passed in the wrong order."""


class ShapeError(TSpaceError, ValueError):
    """Array shapes are inconsistent with a model or optimizer."""


class ConfigError(TSpaceError, ValueError):
    """A run configuration or plan violates its schema."""


class SubsequenceError(TSpaceError, ValueError):
    """An inference subsequence is not contained in the training subsequence."""


class MissingTauError(TSpaceError, KeyError):
    """A registry has no model for the requested timestep."""

    def __init__(self, tau):
        self.tau = tau
        super().__init__(f"no model registered for timestep tau={tau}")

    def __str__(self):
        return self.args[0]


class DuplicateTauError(TSpaceError, ValueError):
    """Two checkpoints claim the same timestep."""


class FingerprintMismatchError(TSpaceError, ValueError):
    """A registry was built against a different noise schedule."""

    def __init__(self, expected: int, found: int):
        self.expected = expected
        self.found = found
        super().__init__(
            f"schedule fingerprint mismatch: expected {expected:016x}, found {found:016x}"
        )


class ChecksumError(TSpaceError, ValueError):
    """A weight blob is truncated or its checksum does not match its manifest."""


class NumericError(TSpaceError, ArithmeticError):
    """Training produced non-finite values."""

    def __init__(self, message: str, tau=None, iteration=None):
        self.tau = tau
        self.iteration = iteration
        super().__init__(message)
