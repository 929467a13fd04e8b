"""Vectorized intersection maps from four roadside cameras, without calibration."""
from .errors import CapacityError, ConfigurationError, ContractError, DegenerateGeometryError, OutOfRangeError
from .map_model import MapClass, MapElement, PerceptionRange, VectorizedMap

__version__ = "0.1.0"
