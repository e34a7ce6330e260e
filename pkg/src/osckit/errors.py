"""Exception types shared across the toolkit."""

from __future__ import annotations


class OscError(Exception):
    """Base class for all toolkit errors."""


class InvariantViolation(OscError):
    """A domain-type invariant does not hold; the message names the invariant."""


class ParseError(OscError):
    """A file could not be parsed; the message carries location context."""


class DegeneratePoint(OscError):
    """Ray at or behind the sphere reprojection horizon."""


class OutsideModelDomain(OscError):
    """No valid sphere lift exists for the given normalized point."""


class TiltHorizon(OscError):
    """Homogeneous scale of the tilt homography vanished for the input."""


class NoConvergence(OscError):
    """Iterative distortion inversion failed; pixel outside the calibrated field."""

    def __init__(self, iterations: int, residual: float):
        super().__init__(
            f"distortion inversion did not converge after {iterations} iterations "
            f"(residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


class DegenerateGeometry(OscError):
    """Too many observations violate projection preconditions."""


class InitFailure(OscError):
    """Single-board pose initialization found no acceptable pose."""


class NonConvergence(OscError):
    """Calibration hit its iteration budget; carries the best result so far."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class InsufficientShared(OscError):
    """Fewer than two boards are shared between the views."""


class InconsistentRig(OscError):
    """Per-board relative transforms disagree beyond the accepted scatter."""


class DimensionMismatch(OscError):
    """Stereo inputs differ in size."""


class DegenerateCloud(OscError):
    """Point cloud cannot support a plane fit."""


class ExhaustedSampling(OscError):
    """Scenario generation ran out of attempts before reaching the target count."""
