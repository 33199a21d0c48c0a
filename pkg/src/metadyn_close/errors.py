"""Exception types shared across the package."""


class MetadynError(Exception):
    """Base class for all errors raised by this package."""


class InvalidStructureError(MetadynError):
    """Structure data is malformed (bad shapes, weights, non-finite values)."""


class DegenerateFitError(MetadynError):
    """Rotation fit has a (near-)degenerate spectrum; its derivative is ill-defined."""


class ConfigError(MetadynError):
    """Inconsistent or out-of-range run configuration."""


class OutOfGridError(MetadynError):
    """A collective-variable value fell outside the configured bias grid."""


class EmptyActiveSetError(MetadynError):
    """No reference distances were supplied to a collective-variable evaluation."""


class RefsetParseError(MetadynError):
    """Reference-set file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
