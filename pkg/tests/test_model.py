"""Tests for the optical model: projections, distortion, tilt, inverses.

Golden values for derived cases were computed with the independent scalar
oracles embedded below and frozen; the oracles never call into the package's
vectorized pipeline.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osckit import (
    NormalizedPoint,
    PARAM_NAMES,
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
from osckit import model as M
from osckit.errors import (
    DegeneratePoint,
    InvariantViolation,
    NoConvergence,
    OutsideModelDomain,
)
from osckit.fixtures import fixture_params


# ---------------------------------------------------------------------------
# Independent scalar oracles
# ---------------------------------------------------------------------------

def oracle_sphere(p, xi):
    n = math.sqrt(p[0] ** 2 + p[1] ** 2 + p[2] ** 2)
    xs = (p[0] / n, p[1] / n, p[2] / n)
    w = xs[2] + xi
    return (xs[0] / w, xs[1] / w)


def oracle_distort(n, t: dict):
    ox, oy = n[0] + t["dxn"], n[1] + t["dyn"]
    r2 = ox * ox + oy * oy
    rad = sum(t[f"k{i}"] * r2 ** i for i in range(1, 9))
    qf = 1 + t["q1"] * r2 + t["q2"] * r2 ** 2 + t["q3"] * r2 ** 3
    dx = ox * rad + (2 * t["p1"] * ox * oy + t["p2"] * (r2 + 2 * ox * ox)) * qf \
        + t["s1"] * r2 + t["s2"] * r2 ** 2
    dy = oy * rad + (t["p1"] * (r2 + 2 * oy * oy) + 2 * t["p2"] * ox * oy) * qf \
        + t["s3"] * r2 + t["s4"] * r2 ** 2
    return (ox + dx, oy + dy)


def _matmul3(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(3)) for j in range(3)]
            for i in range(3)]


def oracle_tilt(d, tx, ty):
    cx, sx, cy, sy = math.cos(tx), math.sin(tx), math.cos(ty), math.sin(ty)
    rx = [[1, 0, 0], [0, cx, sx], [0, -sx, cx]]
    ry = [[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]]
    r = _matmul3(ry, rx)
    proj = [[r[2][2], 0, -r[0][2]], [0, r[2][2], -r[1][2]], [0, 0, 1]]
    m = _matmul3(proj, r)
    h = [m[i][0] * d[0] + m[i][1] * d[1] + m[i][2] for i in range(3)]
    return (h[0] / h[2], h[1] / h[2])


def oracle_project(pw, t: dict):
    n = oracle_sphere(pw, t["xi"])
    d = oracle_distort(n, t)
    ti = oracle_tilt(d, t["taux"], t["tauy"])
    return (t["fx"] * ti[0] + t["skew"] * ti[1] + t["cx"],
            t["fy"] * ti[1] + t["cy"])


@pytest.fixture(scope="module")
def upper():
    return fixture_params("upper")


@pytest.fixture(scope="module")
def lower():
    return fixture_params("lower")


TRIVIAL = ViewModelParams(fx=1.0, fy=1.0, cx=0.0, cy=0.0)


def fov_rays(view: str, n: int, rng) -> np.ndarray:
    """Random unit rays inside a view's field (camera z points down)."""
    lo, hi = {"upper": (-50.0, 9.5), "lower": (-20.0, 10.0)}[view]
    th = rng.uniform(-np.radians(135), np.radians(135), n)
    ph = rng.uniform(np.radians(lo), np.radians(hi), n)
    return np.stack(
        [np.cos(ph) * np.cos(th), -np.cos(ph) * np.sin(th), -np.sin(ph)], axis=-1
    )


# ---------------------------------------------------------------------------
# sphere projection / lift
# ---------------------------------------------------------------------------

class TestSphere:
    def test_on_axis(self):
        assert sphere_project((0, 0, 1), 0.5) == (0.0, 0.0)

    def test_pinhole_degenerate(self):
        x, y = sphere_project((1, 0, 1), 0.0)
        assert x == pytest.approx(1.0, abs=1e-15)
        assert y == 0.0

    def test_hand_stepped_value(self):
        got = sphere_project((3, 4, 5), 0.57583)
        exp = oracle_sphere((3, 4, 5), 0.57583)
        assert exp == pytest.approx((0.3306975643176589, 0.44093008575687853))
        assert got == pytest.approx(exp, abs=1e-15)

    def test_behind_horizon_raises(self):
        with pytest.raises(DegeneratePoint):
            sphere_project((0, 0, -1), 0.5)
        with pytest.raises(DegeneratePoint):
            sphere_project((0, 0, 0), 0.5)

    def test_lift_origin(self):
        for xi in (0.0, 0.3, 1.0):
            assert np.allclose(sphere_lift((0, 0), xi), [0, 0, 1])

    def test_lift_pinhole(self):
        assert np.allclose(sphere_lift((1, 0), 0.0), np.array([1, 0, 1]) / np.sqrt(2))

    def test_lift_domain_error(self):
        # xi > 1 shrinks the liftable disc to r^2 <= 1/(xi^2 - 1).
        with pytest.raises(OutsideModelDomain):
            sphere_lift((2.0, 0.0), 1.5)

    @pytest.mark.parametrize("view", ["upper", "lower"])
    def test_round_trip_1000_rays(self, view, upper, lower):
        xi = {"upper": upper, "lower": lower}[view].xi
        rng = np.random.default_rng(7)
        rays = fov_rays(view, 1000, rng)
        nxy, ok = M.sphere_project_many(rays, xi)
        assert ok.all()
        lifted, ok2 = M.sphere_lift_many(nxy, xi)
        assert ok2.all()
        assert np.abs(lifted - rays).max() < 1e-12


# ---------------------------------------------------------------------------
# distortion
# ---------------------------------------------------------------------------

class TestDistortion:
    def test_zero_is_identity(self):
        assert apply_distortion((0.3, -0.2), TRIVIAL) == (0.3, -0.2)

    def test_k1_only_exact(self):
        p = TRIVIAL.replace(k1=1.0)
        out = apply_distortion((0.1, 0.0), p)
        assert out.x == pytest.approx(0.101, abs=1e-16)
        assert out.y == 0.0

    def test_table_coeffs_vs_oracle(self, upper):
        got = apply_distortion((0.2, 0.1), upper)
        exp = oracle_distort((0.2, 0.1), upper.to_dict())
        assert exp == pytest.approx((0.1317705731202656, 0.01402561317799009))
        assert got == pytest.approx(exp, rel=1e-14)

    def test_zeroed_coeffs_leave_offset_only(self, upper):
        p = upper.replace(**{n: 0.0 for n in PARAM_NAMES[6:23]})
        out = apply_distortion((0.2, 0.1), p)
        assert out == pytest.approx((0.2 + upper.dxn, 0.1 + upper.dyn), abs=1e-16)

    def test_invert_zero_coeffs_one_iteration(self):
        d = np.array([[0.37, -0.41]])
        out, ok, iters = M.invert_distortion_many(d, TRIVIAL.flatten())
        assert ok.all() and iters[0] == 1
        assert np.allclose(out, d, atol=1e-15)

    def test_invert_k1_example(self):
        p = TRIVIAL.replace(k1=1.0)
        n = invert_distortion((0.101, 0.0), p)
        assert n == pytest.approx((0.1, 0.0), abs=1e-12)

    def test_invert_annulus_round_trip(self, lower):
        rng = np.random.default_rng(3)
        rays = fov_rays("lower", 500, rng)
        nxy, _ = M.sphere_project_many(rays, lower.xi)
        p = lower.flatten()
        d = M.distort_many(nxy, p)
        back, ok, _ = M.invert_distortion_many(d, p, tol=1e-12)
        assert ok.all()
        assert np.abs(back - nxy).max() < 1e-10

    def test_invert_far_outside_raises(self, upper):
        with pytest.raises(NoConvergence):
            invert_distortion((120.0, -80.0), upper)


# ---------------------------------------------------------------------------
# tilt
# ---------------------------------------------------------------------------

class TestTilt:
    def test_zero_tilt_exact_identity(self):
        assert tilt_transform((0.4, -0.3), 0.0, 0.0) == (0.4, -0.3)
        assert np.array_equal(M.tilt_matrix(0.0, 0.0), np.eye(3))

    def test_origin_fixed_point(self):
        out = tilt_transform((0.0, 0.0), 0.01, 0.0)
        assert out == pytest.approx((0.0, 0.0), abs=1e-15)

    def test_small_tilt_vs_oracle(self):
        got = tilt_transform((0.3, -0.2), 0.01, 0.0)
        exp = oracle_tilt((0.3, -0.2), 0.01, 0.0)
        assert exp == pytest.approx((0.2994011776837555, -0.1996107655776117))
        assert got == pytest.approx(exp, abs=1e-15)

    def test_table_angles_vs_oracle(self, upper):
        got = tilt_transform((0.25, 0.15), upper.taux, upper.tauy)
        exp = oracle_tilt((0.25, 0.15), upper.taux, upper.tauy)
        assert exp == pytest.approx((0.2442929144663838, 0.14742940555143294))
        assert got == pytest.approx(exp, abs=1e-15)

    def test_inverse_round_trip_grid(self, upper):
        m = M.tilt_matrix(upper.taux, upper.tauy)
        m_inv = np.linalg.inv(m)
        g = np.linspace(-2.0, 2.0, 10)
        pts = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
        fwd, ok1 = M.tilt_apply_many(pts, m)
        back, ok2 = M.tilt_apply_many(fwd, m_inv)
        assert ok1.all() and ok2.all()
        assert np.abs(back - pts).max() < 1e-12


# ---------------------------------------------------------------------------
# camera matrix and full pipeline
# ---------------------------------------------------------------------------

class TestPixels:
    def test_principal_point(self, upper):
        assert to_pixels((0, 0), upper) == (2486.4, 2669.1)

    def test_focal_offset(self):
        p = ViewModelParams(fx=100, fy=100, cx=500, cy=500)
        assert to_pixels((1, 0), p) == (600.0, 500.0)

    def test_skew_row(self, upper):
        got = to_pixels((0, 1), upper)
        assert got == pytest.approx((2482.0232, 3577.3), abs=1e-10)


class TestProjectPoint:
    def test_trivial_pinhole(self):
        assert project_point((0, 0, 1), Pose.identity(), TRIVIAL) == (0.0, 0.0)
        got = project_point((1, 0, 1), Pose.identity(), TRIVIAL)
        assert got == pytest.approx((1.0, 0.0), abs=1e-15)

    def test_full_table1_golden(self, upper):
        got = project_point((1.0, 0.5, 2.0), Pose.identity(), upper)
        exp = oracle_project((1.0, 0.5, 2.0), upper.to_dict())
        assert exp == pytest.approx((2694.764859636248, 2727.7397240242817))
        assert got == pytest.approx(exp, rel=1e-13)

    def test_pose_applied_before_sphere(self, upper):
        rvec = np.array([0.1, -0.2, 0.3])
        pose = Pose.from_axis_angle(rvec, [0.05, -0.02, 0.4])
        pw = np.array([0.3, -0.1, 1.2])
        got = project_point(pw, pose, upper)
        exp = oracle_project(tuple(pose.transform(pw)), upper.to_dict())
        assert got == pytest.approx(exp, rel=1e-12)

    def test_degenerate_propagates(self, upper):
        with pytest.raises(DegeneratePoint):
            project_point((0, 0, -5), Pose.identity(), upper)


class TestUnproject:
    def test_principal_point_trivial(self):
        for xi in (0.0, 0.5, 0.9):
            p = ViewModelParams(fx=300, fy=310, cx=100, cy=120, xi=xi)
            ray = unproject_pixel((100, 120), p)
            assert np.allclose(ray, [0, 0, 1], atol=1e-14)

    def test_round_trip_grid_lower(self, lower):
        rng = np.random.default_rng(11)
        rays = fov_rays("lower", 2500, rng)
        px, ok = M.project_points(rays, Pose.identity(), lower)
        assert ok.all()
        back, ok2 = M.unproject_pixels(px, lower)
        assert ok2.all()
        repix, ok3 = M.project_points(back, Pose.identity(), lower)
        assert ok3.all()
        assert np.abs(repix - px).max() < 1e-6

    def test_far_outside_raises_not_garbage(self, upper):
        with pytest.raises(NoConvergence):
            unproject_pixel((1e6, 1e6), upper)

    @pytest.mark.parametrize("view", ["upper", "lower"])
    def test_round_trip_rays(self, view, upper, lower):
        params = {"upper": upper, "lower": lower}[view]
        rng = np.random.default_rng(5)
        rays = fov_rays(view, 3000, rng)
        px, ok = M.project_points(rays, Pose.identity(), params)
        back, ok2 = M.unproject_pixels(px, params)
        assert ok.all() and ok2.all()
        assert np.linalg.norm(back - rays, axis=-1).max() < 1e-9

    def test_fold_pocket_is_confined(self, upper):
        # The fitted upper-view polynomial folds just inside the nominal
        # field edge; inversion is only guaranteed below 9.9 deg elevation.
        th = np.radians(np.linspace(-135, 135, 271))
        ph = np.radians(np.linspace(-50, 9.9, 120))
        t, p = np.meshgrid(th, ph)
        rays = np.stack(
            [np.cos(p) * np.cos(t), -np.cos(p) * np.sin(t), -np.sin(p)], axis=-1
        ).reshape(-1, 3)
        px, ok = M.project_points(rays, Pose.identity(), upper)
        back, ok2 = M.unproject_pixels(px, upper)
        assert ok.all() and ok2.all()
        assert np.linalg.norm(back - rays, axis=-1).max() < 1e-9


# ---------------------------------------------------------------------------
# degeneracy ladder
# ---------------------------------------------------------------------------

def previous_model_oracle(pw, fx, fy, cx, cy, skew, xi, k1, k2, p1, p2):
    """Unit sphere + 4th-order radial + tangential + camera matrix."""
    x, y = oracle_sphere(pw, xi)
    r2 = x * x + y * y
    rad = k1 * r2 + k2 * r2 ** 2
    dx = x * rad + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    dy = y * rad + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    xd, yd = x + dx, y + dy
    return (fx * xd + skew * yd + cx, fy * yd + cy)


class TestDegeneracyLadder:
    def test_reduces_to_previous_model(self, upper):
        p = upper.replace(
            k3=0, k4=0, k5=0, k6=0, k7=0, k8=0, q1=0, q2=0, q3=0,
            s1=0, s2=0, s3=0, s4=0, dxn=0, dyn=0, taux=0, tauy=0,
        )
        rng = np.random.default_rng(2)
        for pw in rng.uniform(-1, 1, (20, 3)) + [0, 0, 2.0]:
            exp = previous_model_oracle(
                tuple(pw), p.fx, p.fy, p.cx, p.cy, p.skew, p.xi,
                p.k1, p.k2, p.p1, p.p2,
            )
            got = project_point(pw, Pose.identity(), p)
            assert got == pytest.approx(exp, rel=1e-12)

    def test_reduces_to_pinhole_brown(self):
        p = ViewModelParams(
            fx=400, fy=410, cx=320, cy=240, skew=0.5, xi=0.0,
            k1=-0.1, k2=0.02, p1=1e-3, p2=-2e-3,
        )
        rng = np.random.default_rng(4)
        for pw in rng.uniform(-0.3, 0.3, (20, 3)) + [0, 0, 1.5]:
            x, y = pw[0] / pw[2], pw[1] / pw[2]
            r2 = x * x + y * y
            rad = p.k1 * r2 + p.k2 * r2 ** 2
            xd = x + x * rad + 2 * p.p1 * x * y + p.p2 * (r2 + 2 * x * x)
            yd = y + y * rad + p.p1 * (r2 + 2 * y * y) + 2 * p.p2 * x * y
            exp = (p.fx * xd + p.skew * yd + p.cx, p.fy * yd + p.cy)
            got = project_point(pw, Pose.identity(), p)
            assert got == pytest.approx(exp, rel=1e-12)


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------

class TestParams:
    def test_flatten_round_trip(self, upper, lower):
        for p in (upper, lower, TRIVIAL):
            v = p.flatten()
            assert v.shape == (27,)
            assert ViewModelParams.unflatten(v) == p

    @given(st.lists(st.floats(-0.5, 0.5), min_size=27, max_size=27))
    @settings(max_examples=50, deadline=None)
    def test_flatten_bijection_random(self, vals):
        vals[0] = abs(vals[0]) + 0.1
        vals[1] = abs(vals[1]) + 0.1
        vals[5] = abs(vals[5])
        p = ViewModelParams.unflatten(np.array(vals))
        assert np.array_equal(p.flatten(), np.array(vals))

    def test_validation(self):
        with pytest.raises(InvariantViolation):
            ViewModelParams(fx=-1, fy=1, cx=0, cy=0)
        with pytest.raises(InvariantViolation):
            ViewModelParams(fx=1, fy=1, cx=0, cy=0, xi=-0.1)
        with pytest.raises(InvariantViolation):
            ViewModelParams(fx=1, fy=1, cx=float("nan"), cy=0)

    def test_dict_round_trip(self, upper):
        assert ViewModelParams.from_dict(upper.to_dict()) == upper


class TestPose:
    def test_validation(self):
        with pytest.raises(InvariantViolation):
            Pose(np.eye(3) * 1.001, np.zeros(3))
        r = np.eye(3)
        r[0, 0] = -1  # det -1
        with pytest.raises(InvariantViolation):
            Pose(r, np.zeros(3))

    def test_axis_angle_round_trip(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            rv = rng.normal(size=3) * rng.uniform(0, 3)
            pose = Pose.from_axis_angle(rv, rng.normal(size=3))
            rv2 = pose.axis_angle()
            assert np.allclose(
                M.rotation_from_axis_angle(rv2), pose.rotation, atol=1e-10
            )

    def test_compose_inverse(self):
        rng = np.random.default_rng(10)
        a = Pose.from_axis_angle(rng.normal(size=3), rng.normal(size=3))
        b = Pose.from_axis_angle(rng.normal(size=3), rng.normal(size=3))
        pts = rng.normal(size=(5, 3))
        assert np.allclose(a.compose(b).transform(pts), a.transform(b.transform(pts)))
        assert np.allclose(a.compose(a.inverse()).transform(pts), pts, atol=1e-12)


@given(
    st.floats(-60, 9).map(math.radians),
    st.floats(-134, 134).map(math.radians),
    st.floats(0.0, 0.95),
)
@settings(max_examples=200, deadline=None)
def test_sphere_project_lift_property(phi, theta, xi):
    ray = np.array(
        [math.cos(phi) * math.cos(theta), -math.cos(phi) * math.sin(theta),
         -math.sin(phi)]
    )
    if ray[2] + xi <= 1e-6:
        return
    n = sphere_project(ray, xi)
    lifted = sphere_lift(n, xi)
    assert np.abs(lifted - ray).max() < 1e-12
