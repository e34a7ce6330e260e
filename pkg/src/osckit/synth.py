"""Ground-truth scenario generator for calibration and ranging tests.

Everything here is reproducible from (scenario, seed) alone: board poses come
from one seeded generator, detections are exact forward projections of circle
centers plus optional Gaussian pixel noise, and floor scenes evaluate an
analytic band-limited texture at exact ray-plane intersections so rendered
pairs carry no rasterization error.

World frame: z up, origin at the upper viewpoint. Both view frames look down
the mirror axis (camera z is world -z); the lower-view viewpoint sits above
the upper-view viewpoint, which orients the common cylinder axis upward and
makes stereo row disparity positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .board import BoardObservation, BoardSpec, ObservationCorpus, board_model_points
from .errors import ExhaustedSampling, InvariantViolation
from .fixtures import SENSOR_HEIGHT, SENSOR_WIDTH, fixture_params
from .model import (
    Pose,
    ViewModelParams,
    project_many_cam,
    rotation_from_axis_angle,
    transform_points_mats,
    unproject_pixels,
)
from .rectify import (
    CylinderFov,
    CylinderSpec,
    RigGeometry,
    build_cylinders,
    cylinder_directions,
    rig_from_pose,
)

# World -> camera for a view looking down the axis.
_R_CAM_WORLD = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True)
class PoseSampler:
    """Board placement bounds: distance, tilt, azimuth and elevation bands."""

    range_m: tuple[float, float] = (0.3, 3.0)
    tilt_max_rad: float = np.radians(45.0)
    azimuth_rad: tuple[float, float] = (-np.radians(135.0), np.radians(135.0))
    # Bands overlap so each view's annulus is covered without radial gaps
    # (gaps leave the high-order polynomial unconstrained between rings).
    elev_shared_rad: tuple[float, float] = (-np.radians(18.0), np.radians(5.0))
    elev_upper_only_rad: tuple[float, float] = (-np.radians(48.0), -np.radians(14.0))


@dataclass(frozen=True)
class SynthScenario:
    """Complete description of a synthetic two-view world."""

    params_upper: ViewModelParams
    params_lower: ViewModelParams
    rig_truth: Pose  # upper-view -> lower-view transform
    board: BoardSpec = BoardSpec(rows=7, cols=10, pitch=0.03)
    n_boards: int = 200  # per view
    n_shared: int = 120
    pose_sampler: PoseSampler = PoseSampler()
    noise_px: float = 0.0
    rng_seed: int = 0
    sensor_width: int = SENSOR_WIDTH
    sensor_height: int = SENSOR_HEIGHT

    def __post_init__(self):
        if self.noise_px < 0:
            raise InvariantViolation("noise_px must be non-negative")
        if self.n_boards < 1:
            raise InvariantViolation("need at least one board per view")
        if not 0 <= self.n_shared <= self.n_boards:
            raise InvariantViolation("n_shared must be within [0, n_boards]")


def default_rig_truth(baseline_m: float = 0.1) -> Pose:
    """Lower viewpoint a baseline above the upper one, slightly rotated."""
    r_rel = rotation_from_axis_angle([0.004, -0.003, 0.002])
    # Lower viewpoint in the upper frame: straight up is -z (camera z is down).
    c_lower = np.array([0.0, 0.0, -baseline_m])
    return Pose(r_rel, -r_rel @ c_lower)


def default_scenario(noise_px: float = 0.0, rng_seed: int = 0,
                     n_boards: int = 200, n_shared: int = 120) -> SynthScenario:
    return SynthScenario(
        params_upper=fixture_params("upper"),
        params_lower=fixture_params("lower"),
        rig_truth=default_rig_truth(),
        n_boards=n_boards,
        n_shared=n_shared,
        noise_px=noise_px,
        rng_seed=rng_seed,
    )


def _sample_board_world_pose(rng, sampler: PoseSampler, elev_band) -> Pose:
    """Random board pose in the world frame, facing roughly back at the rig."""
    dist = rng.uniform(*sampler.range_m)
    theta = rng.uniform(*sampler.azimuth_rad)
    phi = rng.uniform(*elev_band)
    center = dist * np.array(
        [np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)]
    )
    normal = -center / dist
    # Tilt the normal by alpha about a random axis orthogonal to it.
    alpha = rng.uniform(0.0, sampler.tilt_max_rad)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(ref, normal)) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    ax1 = np.cross(normal, ref)
    ax1 /= np.linalg.norm(ax1)
    beta = rng.uniform(0.0, 2 * np.pi)
    tilt_axis = np.cos(beta) * ax1 + np.sin(beta) * np.cross(normal, ax1)
    z_b = rotation_from_axis_angle(tilt_axis * alpha) @ normal
    spin = rng.uniform(0.0, 2 * np.pi)
    x0 = np.cross(z_b, ax1)
    x0 /= np.linalg.norm(x0)
    x_b = np.cos(spin) * x0 + np.sin(spin) * np.cross(z_b, x0)
    y_b = np.cross(z_b, x_b)
    r_wb = np.stack([x_b, y_b, z_b], axis=1)
    return Pose(r_wb, center)


def _view_pose(world_pose: Pose, rig: Pose, view: str) -> Pose:
    """Board pose in a view frame; board center offset folded in."""
    upper = Pose(_R_CAM_WORLD, np.zeros(3)).compose(world_pose)
    if view == "upper":
        return upper
    return rig.compose(upper)


def _project_board(spec_pts, pose: Pose, params: ViewModelParams,
                   sensor_w: int, sensor_h: int):
    # Same transform formulation as residual evaluation, so noiseless
    # detections reproject to exactly zero.
    m = len(spec_pts)
    pc = transform_points_mats(
        spec_pts,
        np.broadcast_to(pose.rotation, (m, 3, 3)),
        np.broadcast_to(pose.translation, (m, 3)),
    )
    px, ok = project_many_cam(pc, params.flatten())
    with np.errstate(invalid="ignore"):
        ok = ok & np.all(np.isfinite(px), axis=-1)
        on = ok & (px[:, 0] >= 0) & (px[:, 0] < sensor_w) \
            & (px[:, 1] >= 0) & (px[:, 1] < sensor_h)
    return px, on


def gen_corpus(scenario: SynthScenario):
    """Render a detection corpus from the scenario.

    Returns (corpus, truth) where truth maps (image_id, view) to the exact
    board pose in that view's frame. Boards keep at least 80% of their
    centers on-sensor in every target view; detections carry iid Gaussian
    noise of scenario.noise_px, with points pushed off-sensor by noise
    dropped.
    """
    rng = np.random.default_rng(scenario.rng_seed)
    spec_pts = board_model_points(scenario.board)
    center_off = spec_pts.mean(axis=0)
    sampler = scenario.pose_sampler
    n_only = scenario.n_boards - scenario.n_shared
    plan = (
        [("b", ("upper", "lower"), sampler.elev_shared_rad)] * scenario.n_shared
        + [("u", ("upper",), sampler.elev_upper_only_rad)] * n_only
        + [("l", ("lower",), sampler.elev_shared_rad)] * n_only
    )
    observations = []
    truth: dict[tuple[str, str], Pose] = {}
    counter = {"b": 0, "u": 0, "l": 0}
    max_attempts = 100 * len(plan) if plan else 0
    attempts = 0
    for tag, views, band in plan:
        while True:
            attempts += 1
            if attempts > max_attempts:
                raise ExhaustedSampling(
                    f"only {len(truth)} placements found in {max_attempts} attempts"
                )
            world_pose = _sample_board_world_pose(rng, sampler, band)
            # Recenter so the sampled point is the board's middle.
            world_pose = Pose(
                world_pose.rotation,
                world_pose.translation - world_pose.rotation @ center_off,
            )
            per_view = {}
            ok_all = True
            for view in views:
                params = getattr(scenario, f"params_{view}")
                pose_v = _view_pose(world_pose, scenario.rig_truth, view)
                px, on = _project_board(
                    spec_pts, pose_v, params,
                    scenario.sensor_width, scenario.sensor_height,
                )
                if on.sum() < max(4, int(np.ceil(0.8 * len(spec_pts)))):
                    ok_all = False
                    break
                per_view[view] = (pose_v, px, on)
            if not ok_all:
                continue
            image_id = f"{tag}{counter[tag]:04d}"
            emitted = []
            for view in views:
                pose_v, px, on = per_view[view]
                keep = np.where(on)[0]
                pix = px[keep]
                if scenario.noise_px > 0:
                    pix = pix + rng.normal(0.0, scenario.noise_px, pix.shape)
                    inside = (
                        (pix[:, 0] >= 0) & (pix[:, 0] < scenario.sensor_width)
                        & (pix[:, 1] >= 0) & (pix[:, 1] < scenario.sensor_height)
                    )
                    keep = keep[inside]
                    pix = pix[inside]
                if len(keep) < 4:
                    emitted = []
                    break
                rows = keep // scenario.board.cols
                cols = keep % scenario.board.cols
                points = tuple(
                    ((int(r), int(c)), (float(u), float(v)))
                    for r, c, (u, v) in zip(rows, cols, pix)
                )
                emitted.append((view, pose_v, points))
            if not emitted:
                continue
            for view, pose_v, points in emitted:
                observations.append(
                    BoardObservation(image_id=image_id, view=view, points=points)
                )
                truth[(image_id, view)] = pose_v
            counter[tag] += 1
            break
    corpus = ObservationCorpus(
        board=scenario.board,
        sensor_width=scenario.sensor_width,
        sensor_height=scenario.sensor_height,
        observations=tuple(observations),
    )
    return corpus, truth


# ---------------------------------------------------------------------------
# Floor scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FloorScene:
    """Rendered floor-plane pair plus the per-pixel true horizontal range.

    Images are cylinder-space (one per view, block-match ready) unless
    rendered in sensor mode, in which case sensor_upper/sensor_lower hold the
    raw sensor images instead. range_true is on the upper cylinder grid; NaN
    where the ray misses the floor.
    """

    spec_upper: CylinderSpec
    spec_lower: CylinderSpec
    rig: RigGeometry
    floor_height: float
    range_true: np.ndarray
    img_upper: np.ndarray | None = None
    img_lower: np.ndarray | None = None
    sensor_upper: np.ndarray | None = None
    sensor_lower: np.ndarray | None = None


class _BandTexture:
    """Analytic band-limited noise texture: a sum of random plane waves."""

    def __init__(self, seed: int, freq_range=(0.4, 2.4), n_waves: int = 48):
        rng = np.random.default_rng(seed)
        ang = rng.uniform(0.0, 2 * np.pi, n_waves)
        mag = rng.uniform(freq_range[0], freq_range[1], n_waves)
        self.fx = 2 * np.pi * mag * np.cos(ang)
        self.fy = 2 * np.pi * mag * np.sin(ang)
        self.phase = rng.uniform(0.0, 2 * np.pi, n_waves)
        self.amp = rng.uniform(0.5, 1.0, n_waves)
        self.amp /= np.sum(self.amp)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Values in roughly [-1, 1] at world positions (meters)."""
        out = np.zeros_like(x, dtype=float)
        for fx, fy, ph, a in zip(self.fx, self.fy, self.phase, self.amp):
            out += a * np.cos(fx * x + fy * y + ph)
        return out * 3.0


def _quantize16(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    scaled = np.clip(30000.0 + values * 14000.0, 0, 60000)
    out = np.where(valid, scaled, 0.0)
    return np.rint(out).astype(np.uint16)


def _floor_hits(spec: CylinderSpec, origin_z: float, floor_height: float):
    """Ray-plane intersection on the cylinder grid from a viewpoint at
    origin_z along the axis. Returns (x, y, s, valid); s is the horizontal
    range from that viewpoint."""
    dirs = cylinder_directions(spec)
    tanphi = dirs[..., 2]
    dz = floor_height - origin_z
    with np.errstate(divide="ignore", invalid="ignore"):
        s = dz / tanphi
    valid = np.isfinite(s) & (s > 0)
    x = s * dirs[..., 0]
    y = s * dirs[..., 1]
    return x, y, s, valid


def gen_floor_scene(scenario: SynthScenario, floor_height: float,
                    texture_seed: int, *, width: int = 2048,
                    fcyl: float | None = None,
                    fov: CylinderFov | None = None,
                    mode: str = "cylinder",
                    sensor_scale: float = 1.0) -> FloorScene:
    """Render a textured floor plane into both views.

    floor_height is the plane's coordinate along the cylinder axis relative
    to the upper viewpoint (negative: below). Cylinder mode evaluates the
    texture exactly at each pixel's ray-floor intersection; sensor mode
    renders the raw sensor images instead (sensor_scale shrinks the sensor
    and focal lengths for affordable tests).
    """
    if floor_height >= 0:
        raise InvariantViolation("floor must lie below the viewpoints")
    rig = rig_from_pose(scenario.rig_truth)
    if fov is None:
        fov = CylinderFov.prototype().intersection()
    spec_u, spec_l = build_cylinders(rig, fov, width=width, fcyl=fcyl)
    texture = _BandTexture(texture_seed)

    x, y, s, valid = _floor_hits(spec_u, 0.0, floor_height)
    range_true = np.where(valid, s, np.nan).astype(np.float32)

    if mode == "cylinder":
        img_u = _quantize16(texture(x, y), valid)
        xl, yl, _, valid_l = _floor_hits(spec_l, rig.baseline_m, floor_height)
        img_l = _quantize16(texture(xl, yl), valid_l)
        return FloorScene(
            spec_upper=spec_u, spec_lower=spec_l, rig=rig,
            floor_height=floor_height, range_true=range_true,
            img_upper=img_u, img_lower=img_l,
        )
    if mode != "sensor":
        raise InvariantViolation(f"unknown floor scene mode {mode!r}")

    sensors = []
    for view, rot, origin_z in (
        ("upper", rig.rot_upper, 0.0), ("lower", rig.rot_lower, rig.baseline_m),
    ):
        params: ViewModelParams = getattr(scenario, f"params_{view}")
        if sensor_scale != 1.0:
            params = params.replace(
                fx=params.fx * sensor_scale, fy=params.fy * sensor_scale,
                cx=params.cx * sensor_scale, cy=params.cy * sensor_scale,
            )
        sw = int(round(scenario.sensor_width * sensor_scale))
        sh = int(round(scenario.sensor_height * sensor_scale))
        uu, vv = np.meshgrid(np.arange(sw, dtype=float), np.arange(sh, dtype=float))
        px = np.stack([uu.ravel(), vv.ravel()], axis=-1)
        img = np.zeros(sw * sh)
        ok = np.zeros(sw * sh, dtype=bool)
        chunk = 1 << 19
        for a in range(0, len(px), chunk):
            rays, good = unproject_pixels(px[a:a + chunk], params, tol=1e-10)
            d_cyl = rays @ rot.T
            tanphi_den = np.sqrt(d_cyl[:, 0] ** 2 + d_cyl[:, 1] ** 2)
            with np.errstate(divide="ignore", invalid="ignore"):
                sdist = (floor_height - origin_z) / (d_cyl[:, 2] / tanphi_den)
            good = good & np.isfinite(sdist) & (sdist > 0)
            gx = sdist * d_cyl[:, 0] / tanphi_den
            gy = sdist * d_cyl[:, 1] / tanphi_den
            vals = np.zeros(len(rays))
            vals[good] = texture(gx[good], gy[good])
            img[a:a + chunk] = vals
            ok[a:a + chunk] = good
        sensors.append(_quantize16(img.reshape(sh, sw), ok.reshape(sh, sw)))
    return FloorScene(
        spec_upper=spec_u, spec_lower=spec_l, rig=rig,
        floor_height=floor_height, range_true=range_true,
        sensor_upper=sensors[0], sensor_lower=sensors[1],
    )
