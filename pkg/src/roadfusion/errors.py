"""Shared exception hierarchy.

The CLI maps these to exit codes: InputError -> 2, ConfigError -> 3,
InternalError -> 4.
"""


class RoadFusionError(Exception):
    """Base class for all package-specific errors."""


class InputError(RoadFusionError):
    """Invalid or missing input data (files, clouds, masks, geometry)."""


class ConfigError(RoadFusionError):
    """Invalid configuration value or unknown configuration key."""


class InternalError(RoadFusionError):
    """An internal invariant was violated; indicates a bug, not bad input."""
