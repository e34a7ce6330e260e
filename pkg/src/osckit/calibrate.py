"""Staged Levenberg-Marquardt fitting of the view model to board observations.

Each view is calibrated independently. Parameters unlock in stages (camera
matrix and xi first, then low-order distortion, then the high-order terms,
finally prism/offset/tilt) while every board pose stays free throughout; a
stage starts from the previous stage's optimum so the cost never increases
across stage boundaries.

Derivatives are exact: the residual pipeline is evaluated with a complex-step
perturbation per parameter (forward-mode differentiation through the same
code path used for the residuals themselves). The normal equations are solved
through the Schur complement on the poses, so the per-iteration cost is a
dense solve only in the shared parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .board import BoardObservation, BoardSpec, ObservationCorpus, grid_points_for
from .errors import (
    DegenerateGeometry,
    InitFailure,
    InvariantViolation,
    NonConvergence,
)
from .model import (
    PARAM_NAMES,
    Pose,
    ViewModelParams,
    axis_angle_from_rotation,
    project_many_cam,
    rotations_from_axis_angles,
    transform_points_mats,
    unproject_pixels,
)

SENTINEL_PX = 1e6
_CSTEP = 1e-200

DEFAULT_STAGE_SCHEDULE: tuple[tuple[str, ...], ...] = (
    ("fx", "fy", "cx", "cy", "xi"),
    ("k1", "k2", "p1", "p2", "skew"),
    ("k3", "k4", "k5", "k6", "k7", "k8", "q1", "q2", "q3"),
    ("s1", "s2", "s3", "s4", "dxn", "dyn", "taux", "tauy"),
)

# Everything beyond the ten-parameter baseline model.
EXTENDED_PARAMS: tuple[str, ...] = (
    "k3", "k4", "k5", "k6", "k7", "k8",
    "q1", "q2", "q3",
    "s1", "s2", "s3", "s4",
    "dxn", "dyn", "taux", "tauy",
)


@dataclass(frozen=True)
class CalibrationConfig:
    """Seeds, stage schedule and solver knobs for one view."""

    init_fx: float
    init_fy: float
    init_cx: float
    init_cy: float
    init_xi: float
    stage_schedule: tuple[tuple[str, ...], ...] = DEFAULT_STAGE_SCHEDULE
    lm_max_iter: int = 100
    lm_tol: float = 1e-10
    huber_delta: float = 0.0
    freeze: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.init_fx <= 0 or self.init_fy <= 0:
            raise InvariantViolation("focal length seeds must be positive")
        if self.init_xi < 0:
            raise InvariantViolation("xi seed must be non-negative")
        schedule = tuple(tuple(stage) for stage in self.stage_schedule)
        flat = [n for stage in schedule for n in stage]
        if sorted(flat) != sorted(PARAM_NAMES):
            raise InvariantViolation(
                "stage schedule must cover all 27 parameters exactly once"
            )
        freeze = frozenset(self.freeze)
        unknown = freeze - set(PARAM_NAMES)
        if unknown:
            raise InvariantViolation(f"unknown parameters in freeze mask: {unknown}")
        object.__setattr__(self, "stage_schedule", schedule)
        object.__setattr__(self, "freeze", freeze)

    def initial_params(self) -> ViewModelParams:
        return ViewModelParams(
            fx=self.init_fx, fy=self.init_fy, cx=self.init_cx, cy=self.init_cy,
            xi=self.init_xi,
        )


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    """Fitted parameters, per-board poses and residual statistics."""

    params: ViewModelParams
    board_poses: dict[str, Pose]
    rms_px: float
    converged: bool
    iterations: int
    point_image_ids: tuple[str, ...]
    point_grid_indices: np.ndarray  # (N, 2) int
    point_detected: np.ndarray      # (N, 2) detected pixels
    point_residuals: np.ndarray     # (N, 2) predicted - detected

    def __post_init__(self):
        norms2 = np.sum(self.point_residuals ** 2, axis=-1)
        rms = float(np.sqrt(np.mean(norms2)))
        if not np.isclose(rms, self.rms_px, rtol=0, atol=max(1e-12, 1e-12 * rms)):
            raise InvariantViolation("rms_px does not match stored residuals")

    @property
    def per_point_residuals(self):
        """Iterate (image_id, (row, col), residual 2-vector in pixels)."""
        for i, image_id in enumerate(self.point_image_ids):
            yield image_id, tuple(self.point_grid_indices[i]), self.point_residuals[i]


# ---------------------------------------------------------------------------
# Problem packing
# ---------------------------------------------------------------------------

class _Packed:
    """Single-view problem in canonical order (boards sorted by image_id)."""

    def __init__(self, corpus: ObservationCorpus):
        views = {o.view for o in corpus.observations}
        if len(views) != 1:
            raise InvariantViolation(
                "calibration corpus must contain a single view; use split_views"
            )
        self.view = views.pop()
        self.spec = corpus.board
        obs = sorted(corpus.observations, key=lambda o: o.image_id)
        self.image_ids = [o.image_id for o in obs]
        obj, det, board_of, grid, slices = [], [], [], [], []
        start = 0
        for b, o in enumerate(obs):
            gi = o.grid_indices()
            obj.append(grid_points_for(corpus.board, gi))
            det.append(o.pixels())
            grid.append(gi)
            board_of.append(np.full(len(gi), b))
            slices.append((start, start + len(gi)))
            start += len(gi)
        self.obj = np.concatenate(obj)          # (M, 3)
        self.det = np.concatenate(det)          # (M, 2)
        self.grid = np.concatenate(grid)        # (M, 2)
        self.board_of = np.concatenate(board_of)
        self.slices = slices
        self.n_boards = len(obs)
        self.n_points = len(self.obj)


def _residuals_mats(packed: _Packed, pvec, rmats, tvecs):
    """Residuals (M, 2) with sentinel rows, plus the validity mask.

    Trial steps can push points near the horizon where the high-order radial
    terms overflow; those land as huge finite or inf costs and the step is
    simply rejected.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        pc = transform_points_mats(
            packed.obj, rmats[packed.board_of], tvecs[packed.board_of]
        )
        px, valid = project_many_cam(pc, pvec)
        res = px - packed.det
    valid = valid & np.all(np.isfinite(_np_real(res)), axis=-1)
    res[~valid] = SENTINEL_PX
    return res, valid


def _residuals_raw(packed: _Packed, pvec, rvecs, tvecs):
    with np.errstate(over="ignore", invalid="ignore"):
        rmats = rotations_from_axis_angles(rvecs)
    return _residuals_mats(packed, pvec, rmats, tvecs)


def _np_real(a):
    return a.real if np.iscomplexobj(a) else a


def _cost(res: np.ndarray, huber_delta: float) -> float:
    if huber_delta <= 0:
        return float(np.sum(res * res))
    norms = np.sqrt(np.sum(res * res, axis=-1))
    quad = norms <= huber_delta
    out = np.where(
        quad, norms * norms, 2 * huber_delta * norms - huber_delta * huber_delta
    )
    return float(np.sum(out))


def _robust_sqrt_weights(res: np.ndarray, huber_delta: float) -> np.ndarray | None:
    if huber_delta <= 0:
        return None
    norms = np.sqrt(np.sum(res * res, axis=-1))
    w = np.minimum(1.0, huber_delta / np.maximum(norms, 1e-300))
    return np.sqrt(w)


def _jacobian(packed: _Packed, pvec, rvecs, tvecs, shared_dirs):
    """Exact Jacobian blocks by complex-step differentiation.

    shared_dirs is a (S, 27) array of parameter-space directions; each column
    of the returned J_shared (M, 2, S) is the derivative along one direction.
    Pose columns (M, 2, 6) are each board's own axis-angle and translation
    components (the cross-board blocks are structurally zero, so one pass per
    component covers all boards).
    """
    m = packed.n_points
    shared_dirs = np.asarray(shared_dirs, dtype=float)
    ns = len(shared_dirs)
    js = np.zeros((m, 2, ns))
    for col in range(ns):
        p = pvec.astype(complex)
        p += 1j * _CSTEP * shared_dirs[col]
        res, _ = _residuals_raw(packed, p, rvecs, tvecs)
        js[:, :, col] = res.imag / _CSTEP
    jp = np.zeros((m, 2, 6))
    for k in range(6):
        rv = rvecs.astype(complex)
        tv = tvecs.astype(complex)
        if k < 3:
            rv[:, k] += 1j * _CSTEP
        else:
            tv[:, k - 3] += 1j * _CSTEP
        res, _ = _residuals_raw(packed, pvec, rv, tv)
        jp[:, :, k] = res.imag / _CSTEP
    return js, jp


# ---------------------------------------------------------------------------
# Optimizer chart
#
# The monomial radial basis r^2..r^16 is nearly collinear over an annulus, so
# steps taken directly in k-space explode along the weak directions. The
# optimizer therefore steps in a shifted-Chebyshev polynomial basis spanning
# the same subspace (the model itself keeps its monomial coefficients); the
# chart is a linear map, built per stage from the current spread of squared
# radii on the normalized plane.
# ---------------------------------------------------------------------------

def _cheb_mix(order: int, r2_max: float) -> np.ndarray:
    """(order x order) matrix whose columns are Chebyshev-like polynomials
    in u = r^2 on [0, r2_max], constant term removed, expressed in the
    monomial basis u^1..u^order."""
    mix = np.zeros((order, order))
    for j in range(1, order + 1):
        cheb = np.polynomial.chebyshev.Chebyshev(
            [0.0] * j + [1.0], domain=[0.0, r2_max]
        )
        poly = cheb.convert(kind=np.polynomial.polynomial.Polynomial)
        coeffs = np.zeros(order + 1)
        coeffs[: len(poly.coef)] = poly.coef
        mix[:, j - 1] = coeffs[1:]  # drop the constant so the basis fixes u=0
    return mix


_CHART_GROUPS = (
    tuple(f"k{j}" for j in range(1, 9)),
    ("q1", "q2", "q3"),
    ("s1", "s2"),
    ("s3", "s4"),
)


def _chart_directions(unlocked_idx: np.ndarray, r2_max: float) -> np.ndarray:
    """Step directions (S, 27) for the unlocked parameters.

    Polynomial coefficient groups whose unlocked members form a prefix are
    mixed through the Chebyshev chart; everything else steps along its own
    axis.
    """
    unlocked = [PARAM_NAMES[i] for i in unlocked_idx]
    dirs = []
    grouped: set[str] = set()
    for group in _CHART_GROUPS:
        present = [n for n in group if n in unlocked]
        if len(present) >= 2 and present == list(group[: len(present)]):
            mix = _cheb_mix(len(present), r2_max)
            for j in range(len(present)):
                d = np.zeros(len(PARAM_NAMES))
                for i, name in enumerate(present):
                    d[PARAM_NAMES.index(name)] = mix[i, j]
                dirs.append(d)
            grouped.update(present)
    for i in unlocked_idx:
        if PARAM_NAMES[i] not in grouped:
            d = np.zeros(len(PARAM_NAMES))
            d[i] = 1.0
            dirs.append(d)
    return np.array(dirs)


def _current_r2_max(packed: _Packed, pvec, rvecs, tvecs) -> float:
    """Spread of squared offset-plane radii at the current state."""
    from .model import _IDX, _IDY, _IXI, sphere_project_many

    with np.errstate(over="ignore", invalid="ignore"):
        rmats = rotations_from_axis_angles(rvecs)
        pc = transform_points_mats(
            packed.obj, rmats[packed.board_of], tvecs[packed.board_of]
        )
        nxy, ok = sphere_project_many(pc, pvec[_IXI])
        ox = nxy[:, 0] + pvec[_IDX]
        oy = nxy[:, 1] + pvec[_IDY]
        r2 = ox * ox + oy * oy
    r2 = r2[ok & np.isfinite(r2)]
    if r2.size == 0:
        return 1.0
    return float(max(np.quantile(r2, 0.995), 0.25))


# ---------------------------------------------------------------------------
# Levenberg-Marquardt drivers
# ---------------------------------------------------------------------------

def _damped(diag: np.ndarray, lam: float) -> np.ndarray:
    floor = 1e-12 * (np.max(diag) if diag.size else 1.0) + 1e-300
    return lam * np.maximum(diag, floor)


def _lm_stage(packed: _Packed, pvec, rvecs, tvecs, shared_idx, *, max_iter,
              tol, huber_delta):
    """LM over unlocked shared parameters plus all poses (Schur solve).

    Steps carry a geodesic-acceleration correction: the parameter trade-offs
    of this model leave long curved valleys where plain first-order LM creeps,
    while the second-order term (one extra solve against the already damped
    system) follows them at full speed.

    Returns (pvec, rvecs, tvecs, cost, accepted_steps, converged).
    """
    res, _ = _residuals_raw(packed, pvec, rvecs, tvecs)
    cost = _cost(res, huber_delta)
    lam = 1e-3
    accepted = 0
    converged = cost <= 1e-24

    shared_dirs = _chart_directions(
        shared_idx, _current_r2_max(packed, pvec, rvecs, tvecs)
    )
    ns = len(shared_dirs)
    bi = np.arange(6)

    def apply_step(d_s, d_p, scale=1.0):
        return (
            pvec + scale * (shared_dirs.T @ d_s),
            rvecs + scale * d_p[:, :3],
            tvecs + scale * d_p[:, 3:],
        )

    it = 0
    while it < max_iter and not converged:
        it += 1
        js, jp = _jacobian(packed, pvec, rvecs, tvecs, shared_dirs)
        sw = _robust_sqrt_weights(res, huber_delta)
        res_w = res if sw is None else res * sw[:, None]
        js_w = js if sw is None else js * sw[:, None, None]
        jp_w = jp if sw is None else jp * sw[:, None, None]

        u = np.einsum("mri,mrj->ij", js_w, js_w)
        gs = np.einsum("mri,mr->i", js_w, res_w)
        v = np.zeros((packed.n_boards, 6, 6))
        w = np.zeros((packed.n_boards, ns, 6))
        gp = np.zeros((packed.n_boards, 6))
        for b, (a, z) in enumerate(packed.slices):
            jpb = jp_w[a:z].reshape(-1, 6)
            jsb = js_w[a:z].reshape(-1, ns)
            rb = res_w[a:z].reshape(-1)
            v[b] = jpb.T @ jpb
            w[b] = jsb.T @ jpb
            gp[b] = jpb.T @ rb

        u_diag = np.diag(u).copy()
        v_diag = np.einsum("bii->bi", v).copy()

        improved = False
        while True:
            u_l = u + np.diag(_damped(u_diag, lam))
            v_l = v.copy()
            for b in range(packed.n_boards):
                v_l[b, bi, bi] += _damped(v_diag[b], lam)
            try:
                v_inv = np.linalg.inv(v_l)
                s_mat = u_l - np.einsum("bik,bkl,bjl->ij", w, v_inv, w)
                if ns:
                    # Jacobi scaling keeps the solve well conditioned.
                    sc = 1.0 / np.sqrt(np.maximum(np.diag(s_mat), 1e-300))
                    s_scaled = s_mat * np.outer(sc, sc)

                    def solve(gs_rhs, gp_rhs):
                        rhs = -gs_rhs + np.einsum(
                            "bik,bkl,bl->i", w, v_inv, gp_rhs
                        )
                        d_s = sc * np.linalg.solve(s_scaled, sc * rhs)
                        d_p = -np.einsum(
                            "bkl,bl->bk", v_inv,
                            gp_rhs + np.einsum("bik,i->bk", w, d_s),
                        )
                        return d_s, d_p
                else:
                    def solve(gs_rhs, gp_rhs):
                        d_p = -np.einsum("bkl,bl->bk", v_inv, gp_rhs)
                        return np.zeros(0), d_p

                v_s, v_p = solve(gs, gp)
            except np.linalg.LinAlgError:
                v_s = None
            if v_s is not None:
                # Directional second derivative of the residuals along the
                # velocity, by central differences; then the acceleration
                # from the same damped system.
                h = 0.1
                res_f, _ = _residuals_raw(packed, *apply_step(v_s, v_p, h))
                res_b, _ = _residuals_raw(packed, *apply_step(v_s, v_p, -h))
                with np.errstate(over="ignore", invalid="ignore"):
                    k2 = (res_f - 2.0 * res + res_b) / (h * h)
                k2[~np.isfinite(k2)] = 0.0
                k2_w = k2 if sw is None else k2 * sw[:, None]
                gs_a = np.einsum("mri,mr->i", js_w, k2_w)
                gp_a = np.zeros((packed.n_boards, 6))
                for b, (a, z) in enumerate(packed.slices):
                    gp_a[b] = jp_w[a:z].reshape(-1, 6).T @ k2_w[a:z].reshape(-1)
                a_s, a_p = solve(gs_a, gp_a)
                a_norm = np.sqrt(np.sum(a_s ** 2) + np.sum(a_p ** 2))
                v_norm = np.sqrt(np.sum(v_s ** 2) + np.sum(v_p ** 2))
                if a_norm > 0.75 * v_norm:
                    # Curvature dominates this step length: shorten it.
                    lam *= 10.0
                    if lam > 1e14:
                        break
                    continue
                d_s, d_p = v_s + 0.5 * a_s, v_p + 0.5 * a_p
                p_try, rv_try, tv_try = apply_step(d_s, d_p)
                res_try, _ = _residuals_raw(packed, p_try, rv_try, tv_try)
                cost_try = _cost(res_try, huber_delta)
                if not (np.isfinite(cost_try) and cost_try < cost) and a_norm > 0:
                    # Acceleration overshot: retry this damping plain.
                    p_try, rv_try, tv_try = apply_step(v_s, v_p)
                    res_try, _ = _residuals_raw(packed, p_try, rv_try, tv_try)
                    cost_try = _cost(res_try, huber_delta)
                if np.isfinite(cost_try) and cost_try < cost:
                    rel = (cost - cost_try) / max(cost, 1e-300)
                    pvec, rvecs, tvecs = p_try, rv_try, tv_try
                    res, cost = res_try, cost_try
                    lam = max(lam / 10.0, 1e-15)
                    accepted += 1
                    improved = True
                    # A tiny decrease only counts as convergence when the
                    # damping is low; at high lambda steps are short anyway.
                    if (rel < tol and lam <= 1e-2) or cost <= 1e-24:
                        converged = True
                    break
            lam *= 10.0
            if lam > 1e14:
                break
        if not improved:
            # No descent direction at any damping: local optimum.
            converged = True
    return pvec, rvecs, tvecs, cost, accepted, converged


def _pose_lm_batched(packed: _Packed, pvec, rvecs, tvecs, *, max_iter=30,
                     tol=1e-12):
    """Independent per-board pose refinement with per-board damping."""
    nb = packed.n_boards
    lam = np.full(nb, 1e-3)
    res, _ = _residuals_raw(packed, pvec, rvecs, tvecs)
    cost = np.array([
        np.sum(res[a:z] ** 2) for a, z in packed.slices
    ])
    for _ in range(max_iter):
        prev_total = float(np.sum(cost))
        _, jp = _jacobian(packed, pvec, rvecs, tvecs, np.zeros((0, len(PARAM_NAMES))))
        v = np.zeros((nb, 6, 6))
        gp = np.zeros((nb, 6))
        for b, (a, z) in enumerate(packed.slices):
            jpb = jp[a:z].reshape(-1, 6)
            v[b] = jpb.T @ jpb
            gp[b] = jpb.T @ res[a:z].reshape(-1)
        v_diag = np.einsum("bii->bi", v)
        active = np.ones(nb, dtype=bool)
        for _trial in range(12):
            if not active.any():
                break
            v_l = v.copy()
            bi = np.arange(6)
            for b in np.where(active)[0]:
                v_l[b, bi, bi] += _damped(v_diag[b], lam[b])
            try:
                step = -np.linalg.solve(v_l[active], gp[active][..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = None
            if step is None:
                lam[active] *= 10
                continue
            rv_try = rvecs.copy()
            tv_try = tvecs.copy()
            ai = np.where(active)[0]
            rv_try[ai] += step[:, :3]
            tv_try[ai] += step[:, 3:]
            res_try, _ = _residuals_raw(packed, pvec, rv_try, tv_try)
            cost_try = np.array([
                np.sum(res_try[a:z] ** 2) for a, z in packed.slices
            ])
            better = active & (cost_try < cost)
            rvecs[better] = rv_try[better]
            tvecs[better] = tv_try[better]
            lam[better] = np.maximum(lam[better] / 10, 1e-15)
            worse = active & ~better
            lam[worse] *= 10
            cost[better] = cost_try[better]
            res, _ = _residuals_raw(packed, pvec, rvecs, tvecs)
            active = worse & (lam <= 1e12)
        total = float(np.sum(cost))
        if total <= 1e-24 or prev_total - total < tol * max(prev_total, 1e-300):
            break
    return rvecs, tvecs, cost


# ---------------------------------------------------------------------------
# Pose initialization
# ---------------------------------------------------------------------------

def _orthobasis_from_axis(axis: np.ndarray) -> np.ndarray:
    """Right-handed basis whose third column is the given unit axis."""
    ref = np.array([1.0, 0.0, 0.0])
    if abs(np.dot(ref, axis)) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    b1 = ref - axis * np.dot(ref, axis)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(axis, b1)
    return np.stack([b1, b2, axis], axis=1)


def _seed_poses(packed: _Packed, params: ViewModelParams):
    """Eight deterministic seeds per board: 2 facings x 4 in-plane spins."""
    spec = packed.spec
    center = np.array(
        [(spec.cols - 1) * spec.pitch / 2, (spec.rows - 1) * spec.pitch / 2, 0.0]
    )
    seeds = []
    rays = np.zeros((packed.n_boards, 3))
    dists = np.ones(packed.n_boards)
    for b, (a, z) in enumerate(packed.slices):
        px = packed.det[a:z]
        obj = packed.obj[a:z]
        mean_ray, ok = unproject_pixels(px.mean(axis=0)[None, :], params)
        rays[b] = mean_ray[0] if ok[0] else np.array([0.0, 0.0, 1.0])
        # Distance from the angular extent of the two most separated pixels.
        i = int(np.argmax(np.sum(px, axis=1)))
        j = int(np.argmin(np.sum(px, axis=1)))
        two, ok2 = unproject_pixels(px[[i, j]], params)
        if ok2.all():
            ang = np.arccos(np.clip(np.dot(two[0], two[1]), -1, 1))
            span = np.linalg.norm(obj[i] - obj[j])
            if ang > 1e-6:
                dists[b] = np.clip(span / ang, 0.05, 50.0)

    for facing in (1.0, -1.0):
        for spin in range(4):
            psi = spin * np.pi / 2
            cz, sz = np.cos(psi), np.sin(psi)
            rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1.0]])
            rvecs = np.zeros((packed.n_boards, 3))
            tvecs = np.zeros((packed.n_boards, 3))
            for b in range(packed.n_boards):
                # Board normal along -facing*ray: toward or away from the view.
                basis = _orthobasis_from_axis(-facing * rays[b])
                r = basis @ rz
                rvecs[b] = axis_angle_from_rotation(r)
                tvecs[b] = rays[b] * dists[b] - r @ center
            seeds.append((rvecs, tvecs))
    return seeds


def _collinear(grid: np.ndarray) -> bool:
    g = np.asarray(grid, dtype=float)
    g = g - g.mean(axis=0)
    s = np.linalg.svd(g, compute_uv=False)
    return s[1] < 1e-9 * max(s[0], 1.0)


def _init_poses(packed: _Packed, params: ViewModelParams):
    """Best-of-eight-seeds pose per board, refined by LM."""
    for b, (a, z) in enumerate(packed.slices):
        if _collinear(packed.grid[a:z]):
            raise InitFailure(
                f"observed grid points of {packed.image_ids[b]} are collinear"
            )
    pvec = params.flatten()
    best_cost = np.full(packed.n_boards, np.inf)
    best_rv = np.zeros((packed.n_boards, 3))
    best_tv = np.zeros((packed.n_boards, 3))
    for rvecs, tvecs in _seed_poses(packed, params):
        rv, tv, cost = _pose_lm_batched(packed, pvec, rvecs.copy(), tvecs.copy())
        better = cost < best_cost
        best_rv[better] = rv[better]
        best_tv[better] = tv[better]
        best_cost[better] = cost[better]
    counts = np.array([z - a for a, z in packed.slices])
    rms = np.sqrt(best_cost / counts)
    if np.any(rms > 100.0):
        worst = int(np.argmax(rms))
        raise InitFailure(
            f"pose initialization failed for {packed.image_ids[worst]} "
            f"(rms {rms[worst]:.1f} px)"
        )
    return best_rv, best_tv


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def reprojection_residuals(params: ViewModelParams, poses: dict[str, Pose],
                           corpus: ObservationCorpus) -> np.ndarray:
    """Residual vector (predicted - detected), canonical corpus order.

    Length is twice the point count. Points that violate projection
    preconditions contribute the 1e6 px sentinel; more than 1% of them aborts
    with DegenerateGeometry.
    """
    packed = _Packed(corpus)
    missing = [i for i in packed.image_ids if i not in poses]
    if missing:
        raise InvariantViolation(f"missing poses for image_ids {missing[:5]}")
    rmats = np.array([poses[i].rotation for i in packed.image_ids])
    tvecs = np.array([poses[i].translation for i in packed.image_ids])
    res, valid = _residuals_mats(packed, params.flatten(), rmats, tvecs)
    bad = int(np.sum(~valid))
    if bad > 0.01 * packed.n_points:
        raise DegenerateGeometry(
            f"{bad} of {packed.n_points} points violate projection preconditions"
        )
    return res.reshape(-1)


def init_board_pose(params: ViewModelParams, observation: BoardObservation,
                    spec: BoardSpec) -> Pose:
    """Estimate one board's pose with the model parameters frozen.

    Tries eight deterministic seed orientations (two facing directions, four
    in-plane spins) and refines each by LM; returns the lowest-cost pose.
    """
    if len(observation.points) < 4:
        raise InitFailure("need at least 4 observed points")
    corpus = ObservationCorpus(
        board=spec, sensor_width=10 ** 9, sensor_height=10 ** 9,
        observations=(observation,),
    )
    packed = _Packed(corpus)
    rv, tv = _init_poses(packed, params)
    rv, tv, _ = _pose_lm_batched(packed, params.flatten(), rv, tv, max_iter=60)
    return Pose.from_axis_angle(rv[0], tv[0])


def _stage_indices(config: CalibrationConfig):
    """Cumulative unlocked parameter indices per stage, freeze mask applied."""
    stages = []
    unlocked: list[int] = []
    for stage in config.stage_schedule:
        names = [n for n in stage if n not in config.freeze]
        unlocked = unlocked + [PARAM_NAMES.index(n) for n in names]
        if names:
            stages.append(np.array(unlocked, dtype=int))
    return stages


def _build_result(packed: _Packed, pvec, rvecs, tvecs, converged, iterations
                  ) -> CalibrationResult:
    params = ViewModelParams.unflatten(pvec)
    poses = {
        image_id: Pose.from_axis_angle(rvecs[b], tvecs[b])
        for b, image_id in enumerate(packed.image_ids)
    }
    res, _ = _residuals_raw(packed, pvec, rvecs, tvecs)
    rms = float(np.sqrt(np.mean(np.sum(res ** 2, axis=-1))))
    ids = []
    for b, (a, z) in enumerate(packed.slices):
        ids.extend([packed.image_ids[b]] * (z - a))
    return CalibrationResult(
        params=params,
        board_poses=poses,
        rms_px=rms,
        converged=converged,
        iterations=iterations,
        point_image_ids=tuple(ids),
        point_grid_indices=packed.grid.copy(),
        point_detected=packed.det.copy(),
        point_residuals=res,
    )


def calibrate_view(corpus_view: ObservationCorpus, config: CalibrationConfig
                   ) -> CalibrationResult:
    """Fit one view's 27 parameters and all board poses.

    Runs the stage schedule to convergence; raises NonConvergence (with the
    best-so-far result attached) if any stage exhausts its iteration budget.
    """
    packed = _Packed(corpus_view)
    if packed.n_boards < 3:
        raise InvariantViolation("calibration needs at least 3 boards")

    pvec = config.initial_params().flatten()
    rvecs, tvecs = _init_poses(packed, config.initial_params())

    total_accepted = 0
    final_converged = True
    cost = np.inf
    for shared_idx in _stage_indices(config):
        pvec, rvecs, tvecs, cost, accepted, conv = _lm_stage(
            packed, pvec, rvecs, tvecs, shared_idx,
            max_iter=config.lm_max_iter, tol=config.lm_tol,
            huber_delta=config.huber_delta,
        )
        total_accepted += accepted
        # Intermediate stages are warm starts for the full model; only the
        # last stage's convergence qualifies the result.
        final_converged = conv

    result = _build_result(
        packed, pvec, rvecs, tvecs, final_converged, total_accepted
    )
    if not final_converged:
        raise NonConvergence(
            f"final stage budget exhausted at cost {cost:.6g}", result=result
        )
    return result


def calibrate_truncated(corpus_view: ObservationCorpus, config: CalibrationConfig
                        ) -> CalibrationResult:
    """Baseline ten-parameter fit: extended terms frozen at zero."""
    frozen = CalibrationConfig(
        init_fx=config.init_fx, init_fy=config.init_fy,
        init_cx=config.init_cx, init_cy=config.init_cy,
        init_xi=config.init_xi, stage_schedule=config.stage_schedule,
        lm_max_iter=config.lm_max_iter, lm_tol=config.lm_tol,
        huber_delta=config.huber_delta,
        freeze=config.freeze | frozenset(EXTENDED_PARAMS),
    )
    return calibrate_view(corpus_view, frozen)
