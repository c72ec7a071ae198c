"""Exception hierarchy shared by every module."""


class CloudDeltaError(Exception):
    """Base class for all errors raised by cloud_delta."""


class FormatError(CloudDeltaError, ValueError):
    """A file could not be parsed under its declared format."""


class NotRigidTransform(FormatError):
    """A matrix failed one of the SE(3) validity checks."""


class DegenerateGeometry(CloudDeltaError):
    """Too few or collinear points to estimate a rigid transform."""


class EmptyRegion(CloudDeltaError):
    """A descriptor was requested for a region with no points."""


class EmptyDescriptorSet(CloudDeltaError):
    """A nearest-neighbour index was requested over zero present records."""


class SceneSpecError(CloudDeltaError, ValueError):
    """A synthetic scene description is invalid."""


class ReportInvariantError(CloudDeltaError, ValueError):
    """A report record violates its timing or point-count invariants."""
