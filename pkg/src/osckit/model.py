"""Optical model of a single mirror view and its forward/inverse projections.

The forward pipeline maps a camera-frame point to a sensor pixel in five
stages, in this fixed order:

    rigid transform -> unit-sphere projection with offset xi -> lens-mirror
    offset plus polynomial distortion (one shared radius for the radial,
    tangential and thin-prism terms) -> sensor-tilt homography -> camera
    matrix (focal lengths, skew, principal point)

The tilt rotation convention is normalized so that zero tilt is exactly the
identity. All distortion terms are evaluated at the offset point, i.e. the
lens-mirror offset shifts the origin of lens distortion.

Scalar operations raise typed errors on invalid inputs; the ``*_many``
variants are vectorized over point arrays and report validity masks instead.
The vectorized core accepts complex-valued parameters so that derivatives can
be propagated by complex-step differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import (
    DegeneratePoint,
    InvariantViolation,
    NoConvergence,
    OutsideModelDomain,
    TiltHorizon,
)

# Canonical parameter order used by flatten/unflatten and the optimizer.
PARAM_NAMES: tuple[str, ...] = (
    "fx", "fy", "cx", "cy", "skew", "xi",
    "k1", "k2", "k3", "k4", "k5", "k6", "k7", "k8",
    "p1", "p2",
    "q1", "q2", "q3",
    "s1", "s2", "s3", "s4",
    "dxn", "dyn",
    "taux", "tauy",
)
N_PARAMS = len(PARAM_NAMES)

# Indices into the flat parameter vector, kept as module constants so the
# vectorized pipeline can run on raw arrays.
_I = {name: i for i, name in enumerate(PARAM_NAMES)}
_IFX, _IFY, _ICX, _ICY, _ISKEW, _IXI = (_I[n] for n in PARAM_NAMES[:6])
_IK = tuple(_I[f"k{j}"] for j in range(1, 9))
_IP1, _IP2 = _I["p1"], _I["p2"]
_IQ = (_I["q1"], _I["q2"], _I["q3"])
_IS = (_I["s1"], _I["s2"], _I["s3"], _I["s4"])
_IDX, _IDY = _I["dxn"], _I["dyn"]
_ITX, _ITY = _I["taux"], _I["tauy"]

_SPHERE_EPS = 1e-9


class NormalizedPoint(NamedTuple):
    """Dimensionless point on the normalized plane."""

    x: float
    y: float


class PixelPoint(NamedTuple):
    """Pixel coordinates on the sensor plane; may lie outside the sensor."""

    u: float
    v: float


@dataclass(frozen=True)
class ViewModelParams:
    """The 27-parameter optical model of one mirror view.

    fx, fy, cx, cy, skew are the camera matrix in pixels; xi is the sphere
    reprojection offset; k1..k8 radial, p1/p2 tangential with q1..q3 radial
    dependence, s1..s4 thin prism; dxn/dyn the lens-mirror offset on the
    normalized plane; taux/tauy the sensor tilt angles in radians.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0
    xi: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    k5: float = 0.0
    k6: float = 0.0
    k7: float = 0.0
    k8: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    q1: float = 0.0
    q2: float = 0.0
    q3: float = 0.0
    s1: float = 0.0
    s2: float = 0.0
    s3: float = 0.0
    s4: float = 0.0
    dxn: float = 0.0
    dyn: float = 0.0
    taux: float = 0.0
    tauy: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise InvariantViolation(f"parameter {f.name} is not finite")
            object.__setattr__(self, f.name, float(v))
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantViolation("focal lengths must be positive")
        if self.xi < 0:
            raise InvariantViolation("xi must be non-negative")

    def flatten(self) -> np.ndarray:
        """Return the 27 parameters in canonical order."""
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def unflatten(cls, vec) -> "ViewModelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (N_PARAMS,):
            raise InvariantViolation(f"parameter vector must have shape ({N_PARAMS},)")
        return cls(**{n: float(v) for n, v in zip(PARAM_NAMES, vec)})

    def to_dict(self) -> dict[str, float]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "ViewModelParams":
        extra = set(d) - set(PARAM_NAMES)
        if extra:
            raise InvariantViolation(f"unknown parameter keys: {sorted(extra)}")
        missing = set(PARAM_NAMES[:4]) - set(d)
        if missing:
            raise InvariantViolation(f"missing parameter keys: {sorted(missing)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def replace(self, **kw) -> "ViewModelParams":
        d = self.to_dict()
        d.update(kw)
        return ViewModelParams(**d)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x_out = R @ x_in + t (rotation matrix, meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise InvariantViolation("rotation must be a 3x3 matrix")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvariantViolation("pose entries must be finite")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-12:
            raise InvariantViolation("rotation is not orthonormal within 1e-12")
        if abs(np.linalg.det(r) - 1.0) > 1e-12:
            raise InvariantViolation("rotation determinant is not +1 within 1e-12")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, rvec, tvec) -> "Pose":
        return cls(rotation_from_axis_angle(rvec), np.asarray(tvec, dtype=float))

    def axis_angle(self) -> np.ndarray:
        return axis_angle_from_rotation(self.rotation)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(_reorthonormalize(rt), -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return the transform self(other(x))."""
        return Pose(
            _reorthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    # Composition chains drift below the 1e-12 validation gate; snap back via SVD.
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        out = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return out


# ---------------------------------------------------------------------------
# Rotation helpers (complex-step safe where used inside the optimizer)
# ---------------------------------------------------------------------------

def rotations_from_axis_angles(rvecs: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a batch of axis-angle vectors, shape (..., 3).

    Uses a series expansion of sin(t)/t and (1-cos(t))/t^2 for tiny angles so
    the map stays smooth through zero, which complex-step differentiation
    relies on.
    """
    rvecs = np.asarray(rvecs)
    t2 = np.sum(rvecs * rvecs, axis=-1)
    small = np.abs(t2.real if np.iscomplexobj(t2) else t2) < 1e-12
    t2_safe = np.where(small, 1.0, t2)
    theta = np.sqrt(t2_safe)
    a_exact = np.sin(theta) / theta
    b_exact = (1.0 - np.cos(theta)) / t2_safe
    a_series = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
    b_series = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    a = np.where(small, a_series, a_exact)
    b = np.where(small, b_series, b_exact)

    x, y, z = rvecs[..., 0], rvecs[..., 1], rvecs[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.eye(3, dtype=k.dtype)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rotation_from_axis_angle(rvec) -> np.ndarray:
    return rotations_from_axis_angles(np.asarray(rvec, dtype=float).reshape(3))


def axis_angle_from_rotation(r: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues; stable near 0 and pi."""
    r = np.asarray(r, dtype=float)
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-10:
        return np.array(
            [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
        ) / 2.0
    if theta > np.pi - 1e-6:
        # Axis from the dominant column of R + I.
        m = r + np.eye(3)
        col = np.argmax(np.diag(m))
        axis = m[:, col] / np.sqrt(max(m[col, col], 1e-300))
        axis = axis / np.linalg.norm(axis)
        sin_part = np.array(
            [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
        ) / 2.0
        if np.dot(axis, sin_part) < 0:
            axis = -axis
        return axis * theta
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return axis * (theta / (2.0 * np.sin(theta)))


# ---------------------------------------------------------------------------
# Vectorized pipeline core
# ---------------------------------------------------------------------------

def _real(a):
    return a.real if np.iscomplexobj(a) else a


def sphere_project_many(pts: np.ndarray, xi) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points (..., 3) through the unit sphere.

    Returns (normalized points (..., 2), validity mask). Points with zero
    norm or at/behind the xi horizon are invalid.
    """
    pts = np.asarray(pts)
    n2 = np.sum(pts * pts, axis=-1)
    nonzero = _real(n2) > 0
    norm = np.sqrt(np.where(nonzero, n2, 1.0))
    xs = pts / norm[..., None]
    w = xs[..., 2] + xi
    ok = nonzero & (_real(w) > _SPHERE_EPS)
    w_safe = np.where(ok, w, 1.0)
    return xs[..., :2] / w_safe[..., None], ok


def sphere_lift_many(nxy: np.ndarray, xi) -> tuple[np.ndarray, np.ndarray]:
    """Lift normalized points (..., 2) back to unit rays (..., 3)."""
    nxy = np.asarray(nxy)
    r2 = np.sum(nxy * nxy, axis=-1)
    disc = 1.0 + r2 * (1.0 - xi * xi)
    ok = _real(disc) >= 0.0
    w = (xi + np.sqrt(np.where(ok, disc, 0.0))) / (r2 + 1.0)
    ok = ok & (_real(w) > 0.0)
    return np.concatenate([w[..., None] * nxy, (w - xi)[..., None]], axis=-1), ok


def _distort_core(oxy: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Distortion displacement applied at the already-offset point."""
    x, y = oxy[..., 0], oxy[..., 1]
    r2 = x * x + y * y
    rad = r2 * (p[_IK[0]] + r2 * (p[_IK[1]] + r2 * (p[_IK[2]] + r2 * (
        p[_IK[3]] + r2 * (p[_IK[4]] + r2 * (p[_IK[5]] + r2 * (
            p[_IK[6]] + r2 * p[_IK[7]])))))))
    qf = 1.0 + r2 * (p[_IQ[0]] + r2 * (p[_IQ[1]] + r2 * p[_IQ[2]]))
    dx = x * rad + (2.0 * p[_IP1] * x * y + p[_IP2] * (r2 + 2.0 * x * x)) * qf \
        + p[_IS[0]] * r2 + p[_IS[1]] * r2 * r2
    dy = y * rad + (p[_IP1] * (r2 + 2.0 * y * y) + 2.0 * p[_IP2] * x * y) * qf \
        + p[_IS[2]] * r2 + p[_IS[3]] * r2 * r2
    return oxy + np.stack([dx, dy], axis=-1)


def distort_many(nxy: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Offset by (dxn, dyn), then apply all distortion terms at that point."""
    nxy = np.asarray(nxy)
    offset = np.stack([p[_IDX], p[_IDY]], axis=-1)
    return _distort_core(nxy + offset, p)


def tilt_matrix(taux, tauy) -> np.ndarray:
    """3x3 homography of the sensor-tilt model; identity at zero tilt."""
    cx_, sx_ = np.cos(taux), np.sin(taux)
    cy_, sy_ = np.cos(tauy), np.sin(tauy)
    dt = np.result_type(cx_, cy_, float)
    rx = np.array([[1, 0, 0], [0, cx_, sx_], [0, -sx_, cx_]], dtype=dt)
    ry = np.array([[cy_, 0, -sy_], [0, 1, 0], [sy_, 0, cy_]], dtype=dt)
    r = ry @ rx
    proj = np.array(
        [[r[2, 2], 0, -r[0, 2]], [0, r[2, 2], -r[1, 2]], [0, 0, 1]], dtype=dt
    )
    return proj @ r


def tilt_apply_many(dxy: np.ndarray, m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply a tilt homography to points (..., 2) homogeneously."""
    dxy = np.asarray(dxy)
    x, y = dxy[..., 0], dxy[..., 1]
    hx = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    hy = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    hw = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    ok = np.abs(_real(hw)) >= 1e-12
    hw_safe = np.where(ok, hw, 1.0)
    return np.stack([hx / hw_safe, hy / hw_safe], axis=-1), ok


def pixels_many(txy: np.ndarray, p: np.ndarray) -> np.ndarray:
    x, y = txy[..., 0], txy[..., 1]
    return np.stack(
        [p[_IFX] * x + p[_ISKEW] * y + p[_ICX], p[_IFY] * y + p[_ICY]], axis=-1
    )


def project_many_cam(pts_cam: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full camera-frame pipeline for points (..., 3) and a flat parameter vector.

    Returns (pixels, validity). Complex-safe: with a complex perturbation in
    either input, derivatives ride the imaginary part.
    """
    nxy, ok1 = sphere_project_many(pts_cam, p[_IXI])
    dxy = distort_many(nxy, p)
    txy, ok2 = tilt_apply_many(dxy, tilt_matrix(p[_ITX], p[_ITY]))
    return pixels_many(txy, p), ok1 & ok2


def transform_points_mats(pts: np.ndarray, rmats: np.ndarray, tvecs: np.ndarray
                          ) -> np.ndarray:
    """Per-point rigid transform R_m @ p_m + t_m for stacked rotations.

    All projection paths that must agree bitwise (synthesis and residual
    evaluation) go through this one formulation.
    """
    return np.einsum("mij,mj->mi", rmats, pts) + tvecs


def project_points(pts_world: np.ndarray, pose: Pose, params: ViewModelParams
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized world-point projection; returns (pixels (N,2), valid (N,))."""
    pts = np.asarray(pts_world, dtype=float)
    m = len(pts)
    pc = transform_points_mats(
        pts,
        np.broadcast_to(pose.rotation, (m, 3, 3)),
        np.broadcast_to(pose.translation, (m, 3)),
    )
    return project_many_cam(pc, params.flatten())


# ---------------------------------------------------------------------------
# Distortion inversion
# ---------------------------------------------------------------------------

def _radial_profile_start(dxy: np.ndarray, p: np.ndarray, r_max: float
                          ) -> tuple[np.ndarray, float]:
    """Initial guess for inversion from the radial-only profile.

    Interpolates the radius whose radial-only distorted magnitude matches the
    target magnitude. Also returns the radius where the profile stops
    increasing: beyond it the polynomial folds back and preimages are no
    longer the physical ones, so iterates must not cross it.
    """
    grid = np.linspace(0.0, r_max, 2049)
    r2 = grid * grid
    kk = [float(p[i].real if np.iscomplexobj(p) else p[i]) for i in _IK]
    rad = r2 * (kk[0] + r2 * (kk[1] + r2 * (kk[2] + r2 * (kk[3] + r2 * (
        kk[4] + r2 * (kk[5] + r2 * (kk[6] + r2 * kk[7])))))))
    raw = grid * (1.0 + rad)
    g = np.maximum.accumulate(raw)
    r_cap = float(grid[int(np.argmax(raw))])
    if r_cap == 0.0:
        r_cap = r_max
    mag = np.sqrt(np.sum(dxy * dxy, axis=-1))
    r0 = np.interp(mag, g, grid)
    scale = np.where(mag > 0, r0 / np.where(mag > 0, mag, 1.0), 1.0)
    return dxy * scale[..., None], r_cap


def invert_distortion_many(dxy: np.ndarray, p: np.ndarray, tol: float = 1e-12,
                           max_iter: int = 50, r_max: float = 8.0
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Invert distort_many for points (N, 2).

    Damped fixed point (step halved when the residual grows), switching to a
    damped Newton update on stagnation. Returns (points, converged mask,
    iterations used per point).
    """
    lead_shape = np.asarray(dxy).shape[:-1]
    d = np.asarray(dxy, dtype=float).reshape(-1, 2)
    n = d.shape[0]
    pr = p.real if np.iscomplexobj(p) else p
    offset = np.array([pr[_IDX], pr[_IDY]])

    o, r_cap = _radial_profile_start(d, pr, r_max)
    res = _distort_core(o, pr) - d
    rn = np.sqrt(np.sum(res * res, axis=-1))
    converged = rn < tol
    failed = np.zeros(n, dtype=bool)
    stall = np.zeros(n, dtype=np.int8)
    newton_mode = np.zeros(n, dtype=bool)
    iters = np.ones(n, dtype=int)

    h = 1e-200
    for it in range(2, max_iter + 1):
        active = ~(converged | failed)
        if not np.any(active):
            break
        oa = o[active]
        da = d[active]
        ra = rn[active]
        fa = _distort_core(oa, pr) - da
        use_newton = newton_mode[active]

        step_fp = -(fa)  # fixed point: o <- d - delta(o) == o - F(o)
        if np.any(use_newton):
            idx = np.where(use_newton)[0]
            ob = oa[idx]
            jx = (_distort_core(ob + np.array([1j * h, 0.0]), pr).imag / h)
            jy = (_distort_core(ob + np.array([0.0, 1j * h]), pr).imag / h)
            jac = np.stack([jx, jy], axis=-1)  # (m, 2, 2) columns d/dox, d/doy
            fb = fa[idx]
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            det_ok = np.abs(det) > 1e-300
            det_safe = np.where(det_ok, det, 1.0)
            sx = (-fb[:, 0] * jac[:, 1, 1] + fb[:, 1] * jac[:, 0, 1]) / det_safe
            sy = (-fb[:, 1] * jac[:, 0, 0] + fb[:, 0] * jac[:, 1, 0]) / det_safe
            newton_step = np.stack([sx, sy], axis=-1)
            newton_step[~det_ok] = -fb[~det_ok]
            step_fp[idx] = newton_step

        # Try the full step, then halved steps where the residual grew.
        # Candidates are clamped back to the monotone radial region so the
        # iteration cannot jump to a fold-back preimage.
        best_o = oa.copy()
        best_r = ra.copy()
        improved = np.zeros(len(oa), dtype=bool)
        factor = 1.0
        for _ in range(6):
            cand = oa + factor * step_fp
            cr = np.sqrt(np.sum(cand * cand, axis=-1))
            over = cr > r_cap
            if np.any(over):
                cand[over] *= (r_cap / cr[over])[:, None]
            rc = _distort_core(cand, pr) - da
            rcn = np.sqrt(np.sum(rc * rc, axis=-1))
            take = ~improved & (rcn < best_r)
            best_o[take] = cand[take]
            best_r[take] = rcn[take]
            improved |= take
            if np.all(improved):
                break
            factor *= 0.5

        # Stagnation: no improvement, or a fixed-point step that contracts
        # weakly. Once a point falls back to Newton it stays there.
        stall_a = stall[active]
        weak = ~improved | (~use_newton & (best_r > 0.5 * ra))
        stall_a = np.where(weak, stall_a + 1, 0)
        newton_a = newton_mode[active] | (stall_a >= 2)
        diverged = stall_a > 8

        o[active] = best_o
        rn[active] = best_r
        stall[active] = np.where(newton_a & ~newton_mode[active], 0, stall_a)
        newton_mode[active] = newton_a
        iters[active] = it
        conv_a = best_r < tol
        ai = np.where(active)[0]
        converged[ai[conv_a]] = True
        failed[ai[diverged & ~conv_a]] = True

    return (
        (o - offset).reshape(np.asarray(dxy).shape),
        converged.reshape(lead_shape),
        iters.reshape(lead_shape),
    )


def unproject_pixels(px: np.ndarray, params: ViewModelParams, tol: float = 1e-12,
                     max_iter: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pixel-to-unit-ray inversion; returns (rays (N,3), valid)."""
    p = params.flatten()
    px = np.asarray(px, dtype=float)
    y_t = (px[..., 1] - p[_ICY]) / p[_IFY]
    x_t = (px[..., 0] - p[_ICX] - p[_ISKEW] * y_t) / p[_IFX]
    m_inv = np.linalg.inv(tilt_matrix(p[_ITX], p[_ITY]))
    dxy, ok_tilt = tilt_apply_many(np.stack([x_t, y_t], axis=-1), m_inv)
    nxy, ok_inv, _ = invert_distortion_many(dxy, p, tol=tol, max_iter=max_iter)
    rays, ok_lift = sphere_lift_many(nxy, p[_IXI])
    return rays, ok_tilt & ok_inv & ok_lift


# ---------------------------------------------------------------------------
# Scalar operations
# ---------------------------------------------------------------------------

def sphere_project(pcam, xi: float) -> NormalizedPoint:
    """Project one camera-frame point through the unit sphere onto the plane.

    Raises DegeneratePoint for zero-norm points and rays at or behind the xi
    horizon.
    """
    pcam = np.asarray(pcam, dtype=float).reshape(3)
    nxy, ok = sphere_project_many(pcam, xi)
    if not ok:
        raise DegeneratePoint(
            f"point {pcam.tolist()} at or behind the xi={xi} horizon"
        )
    return NormalizedPoint(float(nxy[0]), float(nxy[1]))


def sphere_lift(n, xi: float) -> np.ndarray:
    """Lift a normalized point back to the unit ray that projects onto it."""
    nxy = np.asarray(tuple(n), dtype=float).reshape(2)
    ray, ok = sphere_lift_many(nxy, xi)
    if not ok:
        raise OutsideModelDomain(f"no valid sphere lift for {nxy.tolist()} at xi={xi}")
    return ray


def apply_distortion(n, params: ViewModelParams) -> NormalizedPoint:
    """Offset by the lens-mirror shift and apply Eqs-style polynomial terms."""
    nxy = np.asarray(tuple(n), dtype=float).reshape(2)
    out = distort_many(nxy, params.flatten())
    return NormalizedPoint(float(out[0]), float(out[1]))


def invert_distortion(d, params: ViewModelParams, tol: float = 1e-12,
                      max_iter: int = 50) -> NormalizedPoint:
    """Find n with apply_distortion(n) ~= d.

    Raises NoConvergence when the iteration budget runs out or the iterates
    leave the invertible region, which signals a pixel outside the calibrated
    field of view.
    """
    dxy = np.asarray(tuple(d), dtype=float).reshape(1, 2)
    out, ok, iters = invert_distortion_many(dxy, params.flatten(), tol, max_iter)
    if not ok[0]:
        res = distort_many(out[0], params.flatten()) - dxy[0]
        raise NoConvergence(int(iters[0]), float(np.hypot(res[0], res[1])))
    return NormalizedPoint(float(out[0, 0]), float(out[0, 1]))


def tilt_transform(d, taux: float, tauy: float) -> NormalizedPoint:
    """Apply the sensor-tilt homography; exact identity at zero tilt."""
    dxy = np.asarray(tuple(d), dtype=float).reshape(2)
    out, ok = tilt_apply_many(dxy, tilt_matrix(taux, tauy))
    if not ok:
        raise TiltHorizon(f"tilt dehomogenization scale vanished for {dxy.tolist()}")
    return NormalizedPoint(float(out[0]), float(out[1]))


def to_pixels(t, params: ViewModelParams) -> PixelPoint:
    """Apply the camera matrix: u = fx*x + skew*y + cx, v = fy*y + cy."""
    txy = np.asarray(tuple(t), dtype=float).reshape(2)
    out = pixels_many(txy, params.flatten())
    return PixelPoint(float(out[0]), float(out[1]))


def project_point(pworld, pose: Pose, params: ViewModelParams) -> PixelPoint:
    """Project a world point to the sensor through all five stages."""
    pcam = pose.transform(np.asarray(pworld, dtype=float).reshape(3))
    n = sphere_project(pcam, params.xi)
    d = apply_distortion(n, params)
    t = tilt_transform(d, params.taux, params.tauy)
    return to_pixels(t, params)


def unproject_pixel(px, params: ViewModelParams, tol: float = 1e-12,
                    max_iter: int = 50) -> np.ndarray:
    """Invert project_point for an identity pose; returns a unit ray.

    Inverse stage order: camera matrix, tilt, distortion, sphere lift.
    """
    pxy = np.asarray(tuple(px), dtype=float).reshape(2)
    p = params.flatten()
    y_t = (pxy[1] - params.cy) / params.fy
    x_t = (pxy[0] - params.cx - params.skew * y_t) / params.fx
    m = tilt_matrix(params.taux, params.tauy)
    dxy, ok = tilt_apply_many(np.array([x_t, y_t]), np.linalg.inv(m))
    if not ok:
        raise TiltHorizon(f"inverse tilt scale vanished for pixel {pxy.tolist()}")
    n = invert_distortion(NormalizedPoint(float(dxy[0]), float(dxy[1])),
                          params, tol=tol, max_iter=max_iter)
    return sphere_lift(n, params.xi)
