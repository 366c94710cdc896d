"""Exception types raised across the package."""


class MoRansacError(Exception):
    """Base class for all package errors."""


class InputError(MoRansacError, ValueError):
    """Malformed or inconsistent input."""


class DimensionError(InputError):
    pass


class EmptyCloudError(InputError):
    pass


class InsufficientPointsError(InputError):
    pass


class SpecError(InputError):
    """A scene or run configuration that cannot be realised."""


class ModelFormatError(InputError):
    """Bad magic, version or layout in a serialized network file."""


class DegenerateFitError(MoRansacError):
    pass


class NoPlaneFoundError(MoRansacError):
    pass


class NoFloorError(MoRansacError):
    pass


class NothingToGraspError(MoRansacError):
    pass
