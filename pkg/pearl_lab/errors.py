"""Exception hierarchy shared by every command and its exit codes."""

from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class PearlError(Exception):
    exit_code = 1


class ConfigError(PearlError, ValueError):
    exit_code = EXIT_CONFIG


class EnumerationCapError(ConfigError):
    """n! orders requested above the configured enumeration cap."""


class ShapeError(PearlError, ValueError):
    exit_code = EXIT_CONFIG


class GraphStateError(PearlError, RuntimeError):
    pass


class NumericError(PearlError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class ArtifactError(PearlError, OSError):
    exit_code = EXIT_IO

