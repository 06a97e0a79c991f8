"""Exception types shared across the package."""


class SvoError(Exception):
    """Base class for all salientvo errors."""


class AngleNearPi(SvoError):
    """SE(3) log requested for a rotation with angle at or beyond pi - 1e-6."""


class BehindCamera(SvoError):
    """A reprojected patch pixel landed at non-positive depth."""


class NonFiniteFeature(SvoError):
    """Feature map contains NaN or Inf."""


class ImageTooSmall(SvoError):
    """Input image below the minimum size for the operation."""


class EmptyPool(SvoError):
    """Salient pool is empty but salient patches were requested."""


class OutOfBounds(SvoError):
    """Lookup coordinate outside the feature grid."""


class DegenerateHomography(SvoError):
    """Sampled homography corners stayed non-convex after resampling."""


class ZeroFeature(SvoError):
    """Reference feature vector has (near-)zero norm."""


class AllOccluded(SvoError):
    """Every correspondence is masked out; the loss is undefined."""


class NonPositiveWeight(SvoError):
    """Confidence weights must be strictly positive."""


class SingularSystem(SvoError):
    """Reduced pose system is rank-deficient beyond the expected gauge."""


class NoValidEdges(SvoError):
    """Bundle adjustment problem has no usable edges."""


class DimensionMismatch(SvoError):
    """Frame dimensions do not match the running session."""


class DegenerateGeometry(SvoError):
    """Point sets are collinear or coincident; alignment is ill-posed."""


class InsufficientMatches(SvoError):
    """Fewer than the required number of associated trajectory poses."""


class ParseError(SvoError):
    """Malformed input file; message carries position information."""


class MagicMismatch(ParseError):
    """File does not start with the expected magic bytes."""


class NonMonotoneTimestamps(SvoError):
    """Trajectory timestamps are not strictly increasing."""


class ConfigError(SvoError):
    """Invalid or unknown configuration entry."""
