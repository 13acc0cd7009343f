"""
Error Types

Typed exceptions raised by the geometry kernels, samplers, estimators and gas processes.
"""


class RecollideError(Exception):
    """Base class for all recollide errors."""


# Geometry / event errors

class MechanicallyInconsistent(RecollideError):
    """A start point lies strictly inside an obstacle."""


class InsideSphere(MechanicallyInconsistent):
    """Ray origin strictly inside the sphere it is tested against."""


class NonIncoming(RecollideError):
    """Reflection requested with a normal that does not oppose the velocity."""


class DegenerateEvent(RecollideError):
    """u = e or u = v, the obstacle centers are undefined."""


class CollinearFrame(RecollideError):
    """0, a and b are collinear, no plane normal exists."""


class PreconditionViolated(RecollideError):
    """An inequality checker was called outside its hypotheses."""


# Sampling errors

class BadRange(RecollideError):
    """Invalid flight-time range."""


class BadAngle(RecollideError):
    """Cone half angle outside (0, pi]."""


class Parallel(RecollideError):
    """u and v are parallel, the cross direction is undefined."""


# Estimation errors

class EstimatorError(RecollideError):
    """Estimator could not produce a usable result."""


class InsufficientHits(EstimatorError):
    """Too few conditioned events to estimate a probability."""


class TooFewPoints(EstimatorError):
    """Fewer than four usable points for a slope fit."""


class NonPositiveMass(EstimatorError):
    """A non-positive estimate was passed to the log-log fit."""


# Gas errors

class CapsuleInconsistency(RecollideError):
    """An accepted scatterer center lies inside an explored capsule."""


# Configuration

class ConfigError(RecollideError):
    """Invalid run configuration."""
