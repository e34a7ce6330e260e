"""Calibration and vertical-stereo ranging toolkit for a two-mirror,
single-sensor omnidirectional camera."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    NormalizedPoint,
    PARAM_NAMES,
    PixelPoint,
    Pose,
    ViewModelParams,
    apply_distortion,
    invert_distortion,
    project_point,
    sphere_lift,
    sphere_project,
    tilt_transform,
    to_pixels,
    unproject_pixel,
)
