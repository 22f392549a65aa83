import numpy as np
import pytest

from plio.errors import DegenerateGeometry, NonPositiveInput
from plio.planes import (
    Plane,
    fit_plane,
    fit_planes_batch,
    plane_thickness,
    point_to_plane,
    thickness_variance,
)
from plio.rotations import exp_map, quat_to_mat


def eigen_oracle(points):
    """Independent scatter-matrix eigen fit used to check fit_plane."""
    pts = np.asarray(points, dtype=float)
    c = pts.mean(axis=0)
    scatter = (pts - c).T @ (pts - c)
    w, v = np.linalg.eigh(scatter)
    n = v[:, 0]
    k = np.argmax(np.abs(n))
    if n[k] < 0:
        n = -n
    return n, -float(n @ c)


def test_fit_plane_coordinate_plane():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    plane = fit_plane(pts)
    assert np.allclose(plane.n, [0, 0, 1], atol=1e-12)
    assert np.isclose(plane.d, 0.0, atol=1e-12)


def test_fit_plane_offset_plane():
    pts = np.array([[0.0, 0, 2], [1, 0, 2], [0, 1, 2], [1, 1, 2]])
    plane = fit_plane(pts)
    assert np.allclose(plane.n, [0, 0, 1], atol=1e-12)
    assert np.isclose(plane.d, -2.0, atol=1e-12)
    for p in pts:
        assert abs(plane.n @ p + plane.d) < 1e-12


def test_fit_plane_matches_eigen_oracle():
    rng = np.random.default_rng(21)
    for _ in range(20):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        d = rng.uniform(-2, 2)
        basis = np.linalg.svd(n[None, :])[2][1:]
        uv = rng.uniform(-1, 1, size=(20, 2))
        pts = -d * n + uv @ basis + 1e-3 * rng.normal(size=(20, 1)) * n
        plane = fit_plane(pts)
        n_o, d_o = eigen_oracle(pts)
        assert np.allclose(plane.n, n_o, atol=1e-6)
        assert np.isclose(plane.d, d_o, atol=1e-6)


def test_fit_plane_rejects_collinear():
    t = np.linspace(0, 1, 10)
    pts = np.stack([t, 2 * t, -t], axis=1)
    with pytest.raises(DegenerateGeometry):
        fit_plane(pts)


def test_fit_plane_rigid_invariance():
    rng = np.random.default_rng(33)
    pts = rng.uniform(-1, 1, size=(15, 3))
    pts[:, 2] *= 0.01
    plane = fit_plane(pts)
    r = quat_to_mat(exp_map(rng.normal(size=3)))
    t = rng.normal(size=3)
    moved = pts @ r.T + t
    plane_m = fit_plane(moved)
    # transform the fitted plane back and compare residuals
    n_back = r.T @ plane_m.n
    d_back = plane_m.d + plane_m.n @ t
    k = np.argmax(np.abs(n_back))
    if n_back[k] < 0:
        n_back, d_back = -n_back, -d_back
    assert np.allclose(n_back, plane.n, atol=1e-9)
    assert np.isclose(d_back, plane.d, atol=1e-9)
    assert np.isclose(plane_m.thickness, plane.thickness, atol=1e-12)


def test_point_to_plane():
    plane = Plane(n=np.array([0.0, 0, 1]), d=0.0, thickness=0.0, point_count=3)
    assert point_to_plane(plane, np.array([5.0, 5, 0.3])) == pytest.approx(0.3)
    assert point_to_plane(plane, np.array([1.0, -2, 0.0])) == pytest.approx(0.0)


def test_point_to_plane_matches_projection_oracle():
    rng = np.random.default_rng(4)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    d = 0.7
    plane = Plane(n=n, d=d, thickness=0.0, point_count=5)
    p = rng.normal(size=3)
    # oracle: distance from p to its orthogonal projection on the plane
    proj = p - (n @ p + d) * n
    assert abs(abs(point_to_plane(plane, p)) - np.linalg.norm(p - proj)) < 1e-12


def test_plane_thickness_direct_cases():
    n, d = np.array([0.0, 0, 1]), 0.0
    pts = np.array([[0.0, 0, 0.1], [1, 0, -0.1], [0, 1, 0.1], [1, 1, -0.1]])
    assert plane_thickness((n, d), pts) == pytest.approx(0.01)
    coplanar = np.array([[0.0, 0, 0], [1, 2, 0], [3, -1, 0]])
    assert plane_thickness((n, d), coplanar) == pytest.approx(0.0)


def test_plane_thickness_matches_summation_oracle():
    rng = np.random.default_rng(8)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    d = -0.4
    pts = rng.normal(size=(30, 3))
    expected = sum((n @ p + d) ** 2 for p in pts) / len(pts)
    assert plane_thickness((n, d), pts) == pytest.approx(expected, abs=1e-12)


def test_fit_is_least_squares_optimal():
    rng = np.random.default_rng(12)
    pts = rng.uniform(-1, 1, size=(25, 3))
    pts[:, 2] = 0.3 * pts[:, 0] - 0.1 * pts[:, 1] + 0.02 * rng.normal(size=25)
    best = fit_plane(pts)
    gamma_best = plane_thickness((best.n, best.d), pts)
    for _ in range(100):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        d = rng.uniform(-2, 2)
        assert gamma_best <= plane_thickness((n, d), pts) + 1e-15


@pytest.mark.parametrize(
    "sigma,expected",
    [(0.05, 1.25e-5), (0.1, 2.0e-4), (0.02, 3.2e-7)],
)
def test_thickness_variance_values(sigma, expected):
    assert thickness_variance(sigma) == pytest.approx(expected, rel=1e-12)


def test_thickness_variance_rejects_nonpositive():
    with pytest.raises(NonPositiveInput):
        thickness_variance(0.0)
    with pytest.raises(NonPositiveInput):
        thickness_variance(-0.1)


def test_thickness_monte_carlo_mean():
    """E[thickness vs the true plane] = sigma^2 for independent normal noise."""
    rng = np.random.default_rng(99)
    sigma = 0.05
    n_trials = 10_000
    n_pts = 5
    base = rng.uniform(-1, 1, size=(n_pts, 2))
    gammas = np.empty(n_trials)
    n, d = np.array([0.0, 0, 1]), 0.0
    for i in range(n_trials):
        z = sigma * rng.standard_normal(n_pts)
        pts = np.column_stack([base[:, 0], base[:, 1], z])
        gammas[i] = plane_thickness((n, d), pts)
    stderr = gammas.std(ddof=1) / np.sqrt(n_trials)
    assert abs(gammas.mean() - sigma**2) < 3 * stderr


def test_fit_planes_batch_matches_scalar():
    rng = np.random.default_rng(3)
    stacks = rng.normal(size=(40, 5, 3))
    stacks[:, :, 2] *= 0.05
    n_b, d_b, g_b, ok = fit_planes_batch(stacks)
    for i in range(40):
        if not ok[i]:
            continue
        plane = fit_plane(stacks[i])
        assert np.allclose(n_b[i], plane.n, atol=1e-9)
        assert np.isclose(d_b[i], plane.d, atol=1e-9)
        assert np.isclose(g_b[i], plane.thickness, atol=1e-12)


def test_fit_planes_batch_flags_degenerate():
    line = np.linspace(0, 1, 5)[:, None] * np.array([1.0, 1.0, 0.0])
    good = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.5, 0]])
    _, _, _, ok = fit_planes_batch(np.stack([line, good]))
    assert not ok[0]
    assert ok[1]
