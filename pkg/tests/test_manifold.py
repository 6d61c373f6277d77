import numpy as np
import pytest

from geoxray.manifold import (BUILTIN_MANIFOLDS, CollarError, DegenerateMetricError, MetricChart,
                              boundary_frame, builtin_chart, christoffel, euclidean_disc,
                              flat_torus_example2, hyperbolic_disc, metric_at, sphere_cap)


def test_flat_metric_is_identity(disc):
    g, gi, sq = metric_at(disc, [0.3, -0.2])
    assert np.array_equal(g, np.eye(2)) and np.array_equal(gi, np.eye(2)) and sq == 1.0
    assert np.array_equal(flat_torus_example2().g(np.array([0.1, 0.2, 3.0])), np.eye(3))


def test_sphere_metric_closed_form():
    c = sphere_cap()
    r = 0.7
    np.testing.assert_allclose(c.g(np.array([r, 0.4])), np.diag([1.0, np.sin(r) ** 2]), atol=1e-15)


def test_christoffel_flat_and_sphere(disc):
    assert not np.any(christoffel(disc, [0.2, 0.1]))
    r = 0.9
    G = christoffel(sphere_cap(), [r, 0.3])
    assert G[0, 1, 1] == pytest.approx(-np.sin(r) * np.cos(r), abs=1e-12)
    assert G[1, 0, 1] == pytest.approx(np.cos(r) / np.sin(r), abs=1e-12)


def test_christoffel_fd_matches_analytic():
    # same round metric without the analytic derivative: finite-difference Christoffels converge O(h^2)
    c = sphere_cap()
    fd = MetricChart("sphere_fd", 2, c.bbox, c.metric, c.level_M, c.level_M1)
    x = np.array([0.8, 0.1])
    G = christoffel(c, x)
    np.testing.assert_allclose(christoffel(fd, x), G, atol=1e-6)


def test_degenerate_metric_rejected():
    bad = MetricChart("bad", 2, np.array([[-1.0, -1], [1, 1]]), lambda x: np.zeros(x.shape[:-1] + (2, 2)),
                      lambda x: np.hypot(x[..., 0], x[..., 1]) - 0.5, lambda x: np.hypot(x[..., 0], x[..., 1]) - 0.8)
    with pytest.raises(DegenerateMetricError):
        metric_at(bad, [0.0, 0.0])


def test_boundary_normal_coordinates_disc(disc):
    fr = boundary_frame(disc, 0.15)
    foot, depth = fr.coordinates(np.array([[0.9, 0.0]]))
    np.testing.assert_allclose(foot[0], [1.0, 0.0], atol=1e-8)
    assert depth[0] == pytest.approx(0.1, abs=1e-8)


def test_boundary_normal_torus_depth():
    c = flat_torus_example2()
    fr = boundary_frame(c, 0.15)
    x = np.array([0.9 * np.cos(0.4), 0.9 * np.sin(0.4), 2.0])
    _, depth = fr.coordinates(x[None])
    assert depth[0] == pytest.approx(1 - 0.9, abs=1e-7)


def test_boundary_normal_sphere_points_to_center():
    c = sphere_cap()
    fr = boundary_frame(c, 0.15)
    nu = fr.normal(np.array([[1.2, 0.5]]))[0]
    assert nu[0] < 0 and abs(nu[1]) < 1e-8


def test_collar_too_wide():
    with pytest.raises(CollarError):
        boundary_frame(euclidean_disc(), 1.5)


def test_registry():
    for key in ("euclidean_disc", "sphere_cap", "hyperbolic_disc", "flat_torus_example2",
                "conjugate_strip_example1"):
        assert key in BUILTIN_MANIFOLDS
        assert builtin_chart(key).dim == BUILTIN_MANIFOLDS[key][1]
    with pytest.raises(KeyError, match="klein"):
        builtin_chart("klein")


def test_hyperbolic_metric_conformal():
    c = hyperbolic_disc()
    x = np.array([0.3, 0.1])
    lam = 2 / (1 - x @ x)
    np.testing.assert_allclose(c.g(x), lam**2 * np.eye(2), rtol=1e-12)
