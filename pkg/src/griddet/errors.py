"""Exception hierarchy shared across the package.

All of these map to CLI exit code 1 (validation); anything else that
escapes is a runtime failure (exit code 2).
"""


class GridDetError(Exception):
    """Base class for all griddet errors."""


class ConfigError(GridDetError):
    """Invalid network/run/recipe configuration (bad value, bad spatial trace, parse error)."""


class FormatError(GridDetError):
    """Malformed file content: PPM/PGM payloads, label files, checkpoints."""


class UsageError(GridDetError):
    """API misuse: shape mismatches, out-of-range arguments, empty inputs."""
