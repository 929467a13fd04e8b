"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates a shape or count contract."""


class ConfigurationError(ValueError):
    """A configuration value is invalid."""


class OutOfRangeError(ValueError):
    """A coordinate falls outside its allowed domain."""


class DegenerateGeometryError(ValueError):
    """Geometry with zero length or area where a proper one is required."""


class CapacityError(ValueError):
    """More ground-truth elements than prediction slots."""
