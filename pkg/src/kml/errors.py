"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its shape or valence contract."""


class ConfigurationError(ValueError):
    """A component was built or invoked with an inconsistent configuration."""


class CapacityError(ValueError):
    """A mode's category pool is too small for the requested episode."""


class GraphConfigError(RuntimeError):
    """The recorded graph does not support the requested differentiation."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
