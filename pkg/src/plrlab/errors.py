"""Exception hierarchy shared by every module in the package.

All failures raised on purpose derive from PlrlabError so callers can
catch the package's own complaints without swallowing genuine bugs.
"""

from __future__ import annotations


class PlrlabError(Exception):
    """Base class for every error this package raises deliberately."""


class DimensionError(PlrlabError):
    """Array shapes or architecture dimensions do not line up."""


class DomainError(PlrlabError):
    """A value is outside the range an operation accepts."""


class ConfigError(PlrlabError):
    """A run-configuration file or option set is malformed."""


class FormatError(PlrlabError):
    """An on-disk artifact (snapshot, dataset, raster) is malformed."""


class GenerationError(PlrlabError):
    """A generator could not produce an artifact meeting its constraints."""


class StateError(PlrlabError):
    """An object was used in an order its lifecycle forbids."""


class NumericError(PlrlabError):
    """A computation produced non-finite values or lost precision."""
