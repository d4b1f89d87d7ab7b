"""
Exception types shared by every pipeline stage.
The CLI maps each family to its exit code.
"""


class OrbitMomentsError(Exception):
    """Base class for all errors raised on purpose by this package"""

    exit_code = 1


class ConfigError(OrbitMomentsError, ValueError):
    """Invalid run configuration. `path` names the offending JSON location."""

    exit_code = 1

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class ArtifactError(OrbitMomentsError, OSError):
    """Unreadable, corrupt or incompatible artifact file"""

    exit_code = 2


class NumericalError(OrbitMomentsError, ArithmeticError):
    """Non-finite values, divergence or a failed decomposition"""

    exit_code = 3

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
