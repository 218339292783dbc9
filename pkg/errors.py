"""
Exception hierarchy shared by every module.
Each error carries the CLI exit code it maps to.
"""

# =============================================================================
# Exit Codes
# =============================================================================

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_SELFTEST = 4


# =============================================================================
# Errors
# =============================================================================


class FedSimError(Exception):
    """Base class for all errors raised by the simulator."""
    exit_code = EXIT_FAILURE


class ShapeError(FedSimError, ValueError):
    """Tensor, volume or sinogram extents do not agree."""
    exit_code = EXIT_CONFIG


class ConfigError(FedSimError, ValueError):
    """Invalid configuration value or unsupported operator setting."""
    exit_code = EXIT_CONFIG

    def __init__(self, message: str, key_path: str | None = None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class FormatError(FedSimError, ValueError):
    """Malformed FSCT container, wire frame or manifest."""
    exit_code = EXIT_CONFIG


class ProtocolError(FedSimError, RuntimeError):
    """Federated round protocol violation (missing, duplicate or stale message)."""
    exit_code = EXIT_PROTOCOL


class DegenerateShapeError(FedSimError, ValueError):
    """Shape data cannot support the requested operation."""
    exit_code = EXIT_FAILURE


class MissingArtifactError(FedSimError, FileNotFoundError):
    """One or more required artifacts are absent."""
    exit_code = EXIT_FAILURE

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("Missing artifacts: " + ", ".join(self.paths))


class SelftestFailure(FedSimError, AssertionError):
    """One or more selftest suites failed."""
    exit_code = EXIT_SELFTEST
