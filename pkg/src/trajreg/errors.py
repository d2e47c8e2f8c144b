"""Exception classes shared across the package.

Every error a module can raise on bad input derives from :class:`TrajregError`
so that the command line can report it as a one-line diagnostic.
"""


class TrajregError(Exception):
    """Base class for all reportable errors."""


class GridMismatchError(TrajregError, ValueError):
    """Two grids that must agree (dims, spacing) do not."""


class NonFiniteDataError(TrajregError, ValueError):
    """Array contains NaN or Inf."""


class VolumeFormatError(TrajregError, ValueError):
    """A volume file could not be decoded."""


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class TruncatedDataError(VolumeFormatError):
    pass


class GridTooSmallError(TrajregError, ValueError):
    pass


class OpenMeshError(TrajregError, ValueError):
    """Operation needs a closed surface but edges are unmatched."""


class MeshError(TrajregError, ValueError):
    pass


class EmptyLabelError(TrajregError, ValueError):
    """A label set (or mask) that must be nonempty is empty."""


class NetworkFormatError(TrajregError, ValueError):
    pass


class ConfigError(TrajregError, ValueError):
    pass
