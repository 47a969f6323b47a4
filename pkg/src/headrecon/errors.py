"""Exception types shared across the package, mapped to CLI exit codes."""


class ValidationError(ValueError):
    """Bad arguments, malformed configs, contract violations. Exit code 2."""


class SceneFormatError(ValidationError):
    """A scene or checkpoint on disk fails structural validation."""


class DataIOError(OSError):
    """Missing or unreadable files. Exit code 3."""


class DivergenceError(RuntimeError):
    """Optimization produced NaNs or provably cannot proceed. Exit code 4."""


class DegenerateNormalError(ValueError):
    """Surface gradient too small to define a normal."""
