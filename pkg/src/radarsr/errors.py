"""Exception types shared across the package."""


class RadarSrError(Exception):
    """Base class for all package errors."""


class PlaneFitFailure(RadarSrError):
    """RANSAC could not find a ground plane with enough inliers."""


class DegenerateVariance(RadarSrError):
    """Score or noise inversion requested at a step with non-positive variance."""


class EmptyCloud(RadarSrError):
    """A metric was asked to evaluate an empty point cloud."""


class EmptyReference(RadarSrError):
    """Nearest-neighbor query against an empty reference cloud."""


class DegenerateGeometry(RadarSrError):
    """Rigid alignment failed (rank-deficient cross-covariance or too few points)."""


class CheckpointError(RadarSrError):
    """Model checkpoint is missing, corrupt, or version-incompatible."""


class TrainingDiverged(RadarSrError):
    """Training loss became non-finite."""


class ConfigError(RadarSrError):
    """Invalid configuration or spec file."""
