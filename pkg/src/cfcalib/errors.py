"""Exception types shared across the package."""


class CfCalibError(Exception):
    """Base class for package errors."""


class DomainError(CfCalibError, ValueError):
    """A value lies outside the support of a distribution or kernel."""


class LayoutError(CfCalibError, ValueError):
    """A latent state does not match the layout expected by a model."""


class CapabilityError(CfCalibError):
    """The requested operation is not available for this model."""


class InitializationError(CfCalibError, RuntimeError):
    """A sampler or optimizer could not find a finite starting point."""


class DataError(CfCalibError, ValueError):
    """Input data is malformed or empty."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
