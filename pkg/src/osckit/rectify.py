"""Relative-pose estimation from shared boards and cylindrical rectification.

Both views are resampled onto cylinders that share the azimuth grid, the
vertical scale and the baseline-aligned axis, so stereo correspondences lie
in the same column and only the row differs. The vertical cylinder coordinate
is linear in tan(elevation): v = v0 - fcyl * tan(phi). That choice makes the
row disparity exactly fcyl * baseline / range, so triangulation is closed
form.

The cylinder axis points from the upper-view viewpoint toward the lower-view
viewpoint. With that orientation the lower-view image content of any
finite-range point sits at a strictly larger row, which the block matcher
relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibrate import CalibrationResult
from .errors import InconsistentRig, InsufficientShared, InvariantViolation
from .model import Pose, ViewModelParams, project_many_cam

_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class CylinderSpec:
    """Cylindrical image geometry.

    Column u maps to azimuth theta0 + u*dtheta; row v maps to elevation via
    tan(phi) = (v0 - v) / fcyl.
    """

    theta0: float
    dtheta: float
    fcyl: float
    v0: float
    width: int
    height: int

    def __post_init__(self):
        if self.dtheta <= 0 or self.fcyl <= 0:
            raise InvariantViolation("dtheta and fcyl must be positive")
        if self.width < 1 or self.height < 1:
            raise InvariantViolation("cylinder dimensions must be positive")
        if self.width * self.dtheta > _TWO_PI + 1e-9:
            raise InvariantViolation("azimuth span exceeds a full turn")

    def thetas(self) -> np.ndarray:
        return self.theta0 + np.arange(self.width) * self.dtheta

    def tanphis(self) -> np.ndarray:
        return (self.v0 - np.arange(self.height)) / self.fcyl

    def to_dict(self) -> dict:
        return {
            "theta0": self.theta0, "dtheta": self.dtheta, "fcyl": self.fcyl,
            "v0": self.v0, "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CylinderSpec":
        return cls(
            theta0=float(d["theta0"]), dtheta=float(d["dtheta"]),
            fcyl=float(d["fcyl"]), v0=float(d["v0"]),
            width=int(d["width"]), height=int(d["height"]),
        )


@dataclass(frozen=True, eq=False)
class RigGeometry:
    """Two-viewpoint geometry in the common cylinder frame.

    pose_rel maps upper-view coordinates to lower-view coordinates
    (x_lower = R @ x_upper + t). rot_upper and rot_lower rotate each view
    frame into the cylinder frame, whose z axis is the baseline direction
    from the upper toward the lower viewpoint.
    """

    pose_rel: Pose
    baseline_m: float
    rot_upper: np.ndarray
    rot_lower: np.ndarray
    scatter_rot_rad: float = 0.0
    scatter_trans_m: float = 0.0

    def __post_init__(self):
        if self.baseline_m <= 0:
            raise InvariantViolation("baseline must be positive")
        for name in ("rot_upper", "rot_lower"):
            r = np.asarray(getattr(self, name), dtype=float)
            if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
                raise InvariantViolation(f"{name} is not orthonormal")
            r.setflags(write=False)
            object.__setattr__(self, name, r)

    def to_dict(self) -> dict:
        return {
            "pose_rel": {
                "rvec": self.pose_rel.axis_angle().tolist(),
                "tvec": self.pose_rel.translation.tolist(),
            },
            "baseline_m": self.baseline_m,
            "rot_upper": self.rot_upper.tolist(),
            "rot_lower": self.rot_lower.tolist(),
            "scatter_rot_rad": self.scatter_rot_rad,
            "scatter_trans_m": self.scatter_trans_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigGeometry":
        return cls(
            pose_rel=Pose.from_axis_angle(
                d["pose_rel"]["rvec"], d["pose_rel"]["tvec"]
            ),
            baseline_m=float(d["baseline_m"]),
            rot_upper=np.array(d["rot_upper"], dtype=float),
            rot_lower=np.array(d["rot_lower"], dtype=float),
            scatter_rot_rad=float(d["scatter_rot_rad"]),
            scatter_trans_m=float(d["scatter_trans_m"]),
        )


def _quat_from_matrix(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix."""
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
        q = np.zeros(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return q / np.linalg.norm(q)


def _matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _mean_rotation(mats: list[np.ndarray]) -> np.ndarray:
    """Quaternion average: dominant eigenvector of the outer-product sum."""
    quats = [_quat_from_matrix(m) for m in mats]
    ref = quats[0]
    acc = np.zeros((4, 4))
    for q in quats:
        if np.dot(q, ref) < 0:
            q = -q
        acc += np.outer(q, q)
    _, vecs = np.linalg.eigh(acc)
    return _matrix_from_quat(vecs[:, -1])


def _cylinder_frame_rows(axis: np.ndarray, hint: np.ndarray) -> np.ndarray:
    """Rotation whose third row is the axis; azimuth reference from hint."""
    x = hint - axis * np.dot(hint, axis)
    nx = np.linalg.norm(x)
    if nx < 1e-6:
        alt = np.array([0.0, 1.0, 0.0])
        x = alt - axis * np.dot(alt, axis)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(axis, x)
    return np.stack([x, y, axis], axis=0)


def rig_from_pose(pose_rel: Pose, scatter_rot: float = 0.0,
                  scatter_trans: float = 0.0) -> RigGeometry:
    """Build the cylinder-frame geometry from an upper-to-lower transform."""
    t = pose_rel.translation
    baseline = float(np.linalg.norm(t))
    if baseline <= 0:
        raise InvariantViolation("coincident viewpoints: baseline is zero")
    # Lower viewpoint expressed in the upper frame.
    c_lower = -pose_rel.rotation.T @ t
    axis = c_lower / baseline
    rot_upper = _cylinder_frame_rows(axis, np.array([1.0, 0.0, 0.0]))
    rot_lower = rot_upper @ pose_rel.rotation.T
    return RigGeometry(
        pose_rel=pose_rel, baseline_m=baseline,
        rot_upper=rot_upper, rot_lower=rot_lower,
        scatter_rot_rad=scatter_rot, scatter_trans_m=scatter_trans,
    )


def estimate_rig(result_upper: CalibrationResult, result_lower: CalibrationResult,
                 shared_ids) -> RigGeometry:
    """Average the per-board upper-to-lower transforms of shared boards.

    Rotations are averaged by the quaternion eigen-method with sign
    alignment, translations arithmetically; scatter fields record the worst
    per-board deviation from the mean.
    """
    shared = list(shared_ids)
    if len(shared) < 2:
        raise InsufficientShared(
            f"need at least 2 shared boards, got {len(shared)}"
        )
    rots, trans = [], []
    for image_id in shared:
        if image_id not in result_upper.board_poses:
            raise InvariantViolation(f"{image_id} missing from upper poses")
        if image_id not in result_lower.board_poses:
            raise InvariantViolation(f"{image_id} missing from lower poses")
        t_b = result_lower.board_poses[image_id].compose(
            result_upper.board_poses[image_id].inverse()
        )
        rots.append(t_b.rotation)
        trans.append(t_b.translation)
    r_mean = _mean_rotation(rots)
    t_mean = np.mean(trans, axis=0)
    scatter_rot = 0.0
    for r in rots:
        cos_t = np.clip((np.trace(r_mean.T @ r) - 1.0) / 2.0, -1.0, 1.0)
        scatter_rot = max(scatter_rot, float(np.arccos(cos_t)))
    scatter_trans = float(max(np.linalg.norm(t - t_mean) for t in trans))
    pose_rel = Pose(r_mean, t_mean)
    baseline = float(np.linalg.norm(t_mean))
    if scatter_rot > 0.05 or scatter_trans > 0.05 * baseline:
        raise InconsistentRig(
            f"per-board transforms disagree: rot scatter {scatter_rot:.4g} rad, "
            f"translation scatter {scatter_trans:.4g} m over baseline {baseline:.4g} m"
        )
    return rig_from_pose(pose_rel, scatter_rot, scatter_trans)


@dataclass(frozen=True)
class CylinderFov:
    """Azimuth span plus per-view elevation ranges, radians."""

    theta_start: float
    theta_span: float
    elev_upper: tuple[float, float]
    elev_lower: tuple[float, float]

    @classmethod
    def prototype(cls) -> "CylinderFov":
        return cls(
            theta_start=-np.radians(135.0), theta_span=np.radians(270.0),
            elev_upper=(np.radians(-50.0), np.radians(10.0)),
            elev_lower=(np.radians(-20.0), np.radians(10.0)),
        )

    @classmethod
    def shared(cls, elev_lo: float, elev_hi: float,
               theta_start: float = -np.radians(135.0),
               theta_span: float = np.radians(270.0)) -> "CylinderFov":
        """Identical elevation window for both views (block-match ready)."""
        return cls(theta_start, theta_span, (elev_lo, elev_hi), (elev_lo, elev_hi))

    def intersection(self) -> "CylinderFov":
        lo = max(self.elev_upper[0], self.elev_lower[0])
        hi = min(self.elev_upper[1], self.elev_lower[1])
        return CylinderFov.shared(lo, hi, self.theta_start, self.theta_span)


def build_cylinders(rig: RigGeometry, fov: CylinderFov, width: int,
                    fcyl: float | None = None) -> tuple[CylinderSpec, CylinderSpec]:
    """Construct the two cylinder specs sharing theta0, dtheta, fcyl, width."""
    dtheta = fov.theta_span / width
    if fcyl is None:
        fcyl = 1.0 / dtheta
    specs = []
    for lo, hi in (fov.elev_upper, fov.elev_lower):
        if hi <= lo:
            raise InvariantViolation("elevation range is empty")
        v0 = fcyl * np.tan(hi)
        height = int(np.ceil(fcyl * (np.tan(hi) - np.tan(lo))))
        specs.append(CylinderSpec(
            theta0=fov.theta_start, dtheta=dtheta, fcyl=float(fcyl), v0=float(v0),
            width=int(width), height=height,
        ))
    return specs[0], specs[1]


def cylinder_directions(spec: CylinderSpec) -> np.ndarray:
    """Per-pixel ray directions in the cylinder frame, shape (H, W, 3).

    Unnormalized: unit horizontal component, tan(phi) vertical.
    """
    th = spec.thetas()
    tp = spec.tanphis()
    h, w = spec.height, spec.width
    out = np.empty((h, w, 3))
    out[..., 0] = np.cos(th)[None, :]
    out[..., 1] = np.sin(th)[None, :]
    out[..., 2] = tp[:, None]
    return out


def build_remap(params: ViewModelParams, rot: np.ndarray, spec: CylinderSpec,
                sensor_size: tuple[int, int]) -> np.ndarray:
    """Forward-projected sampling positions for every cylinder pixel.

    Returns (H, W, 2) float32 (u, v) into the sensor image; NaN marks rays
    that are degenerate or land outside the sensor.
    """
    dirs = cylinder_directions(spec).reshape(-1, 3)
    # rot maps view -> cylinder, so its transpose brings rays back.
    dirs_view = dirs @ rot
    pvec = params.flatten()
    sw, sh = sensor_size
    out = np.full((dirs.shape[0], 2), np.nan, dtype=np.float32)
    chunk = 1 << 20
    for a in range(0, dirs.shape[0], chunk):
        px, ok = project_many_cam(dirs_view[a:a + chunk], pvec)
        with np.errstate(invalid="ignore"):
            ok &= (
                (px[:, 0] >= 0) & (px[:, 0] <= sw - 1)
                & (px[:, 1] >= 0) & (px[:, 1] <= sh - 1)
                & np.all(np.isfinite(px), axis=-1)
            )
        sel = out[a:a + chunk]
        sel[ok] = px[ok].astype(np.float32)
    return out.reshape(spec.height, spec.width, 2)


def invalid_value_for(dtype) -> int:
    """Sentinel: maximum representable pixel value minus one."""
    return int(np.iinfo(dtype).max) - 1


def apply_remap(image: np.ndarray, map_uv: np.ndarray,
                invalid_value: int | None = None) -> np.ndarray:
    """Bilinearly sample the sensor image at remap positions."""
    if invalid_value is None:
        invalid_value = invalid_value_for(image.dtype)
    h, w = map_uv.shape[:2]
    u = map_uv[..., 0].astype(np.float64).ravel()
    v = map_uv[..., 1].astype(np.float64).ravel()
    valid = np.isfinite(u) & np.isfinite(v)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    sh, sw = image.shape[:2]
    u0 = np.clip(np.floor(u).astype(int), 0, sw - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, sh - 2)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)
    img = image.astype(np.float64)
    tl = img[v0, u0]
    tr = img[v0, u0 + 1]
    bl = img[v0 + 1, u0]
    br = img[v0 + 1, u0 + 1]
    if img.ndim == 3:
        fu = fu[:, None]
        fv = fv[:, None]
        valid_b = valid[:, None]
    else:
        valid_b = valid
    sampled = (tl * (1 - fu) + tr * fu) * (1 - fv) + (bl * (1 - fu) + br * fu) * fv
    out = np.where(valid_b, np.rint(sampled), invalid_value)
    out = np.clip(out, 0, np.iinfo(image.dtype).max)
    shape = (h, w) if img.ndim == 2 else (h, w, image.shape[2])
    return out.reshape(shape).astype(image.dtype)


def expand_image(sensor_image: np.ndarray, params: ViewModelParams,
                 rot: np.ndarray, spec: CylinderSpec) -> np.ndarray:
    """Resample a sensor image onto the cylinder.

    Out-of-sensor or degenerate rays receive the invalid sentinel (largest
    representable value minus one); record it in image metadata when writing.
    """
    sh, sw = sensor_image.shape[:2]
    map_uv = build_remap(params, rot, spec, (sw, sh))
    return apply_remap(sensor_image, map_uv)
