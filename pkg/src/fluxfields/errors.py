"""Exception taxonomy shared across the package.

Every raised condition is a subclass of FluxFieldsError so callers can catch
package failures in one clause; the concrete classes mirror the distinct
failure modes of the numerical surface (shape contracts, degenerate inputs,
solver breakdown, configuration problems).
"""


class FluxFieldsError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(FluxFieldsError, ValueError):
    """An array argument has the wrong shape or dimensionality."""


class ConfigError(FluxFieldsError, ValueError):
    """A configuration file or override names an unknown or invalid key."""


class CapabilityError(FluxFieldsError, TypeError):
    """A field was asked for an operation it does not support (e.g. parameters)."""


class DegenerateEvaluationError(FluxFieldsError, FloatingPointError):
    """A density/kernel evaluation underflowed beyond recovery."""


class DegenerateHorizonError(FluxFieldsError, ValueError):
    """A horizon value makes the transition kernel singular (t too close to 0)."""


class SolverError(FluxFieldsError, RuntimeError):
    """A linear or nonlinear solve failed to reach its residual contract."""


class IntegrationBlowUpError(FluxFieldsError, FloatingPointError):
    """An ODE trajectory left the finite range (non-finite state encountered)."""


class UndefinedAlignmentError(FluxFieldsError, ValueError):
    """An alignment metric was requested where its normalizing norm vanishes."""
