"""Exception types shared across the package.

Every error raised on purpose derives from C2tseError so the CLI can map it
to a structured exit; anything else escaping a command is a genuine bug.
"""


class C2tseError(Exception):
    """Base class for package-specific failures."""

    code = "internal"


class ShapeError(C2tseError, ValueError):
    """Array shapes or lengths do not line up."""

    code = "shape"


class DegenerateSignalError(C2tseError, ValueError):
    """A signal that must carry energy is identically zero."""

    code = "degenerate-signal"


class UnsupportedFormatError(C2tseError, ValueError):
    """File exists but is not a format this package reads or writes."""

    code = "unsupported-format"


class ConfigError(C2tseError, ValueError):
    """Configuration values are out of range or mutually inconsistent."""

    code = "config"


class LifecycleError(C2tseError, RuntimeError):
    """Pipeline stages invoked out of order."""

    code = "lifecycle"


class CheckpointError(C2tseError, RuntimeError):
    """Checkpoint container is damaged, tampered with, or unreadable."""

    code = "checkpoint"


class LockError(C2tseError, RuntimeError):
    """Another process holds the output-directory lock."""

    code = "locked"
