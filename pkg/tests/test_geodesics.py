import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoxray.geodesics import (PhasePoint, conjugate_points, energy, exp_map, is_simple, jacobi, trace,
                               unit_covector)
from geoxray.manifold import euclidean_disc, flat_torus_example2, hyperbolic_disc, sphere_cap


def _start(chart, x, v):
    x = np.asarray(x, dtype=float)
    return PhasePoint(x, unit_covector(chart, x, np.asarray(v, dtype=float)))


def test_straight_chord(disc):
    p = trace(disc, PhasePoint(np.array([-1.0, 0]), np.array([1.0, 0])), (0, 2))
    np.testing.assert_allclose(p.x[-1], [1.0, 0.0], atol=1e-12)
    assert p.length_in_M == pytest.approx(2.0, abs=1e-9)


def test_energy_checked(disc):
    with pytest.raises(ValueError, match="E = 1/2"):
        trace(disc, PhasePoint(np.zeros(2), np.array([2.0, 0])), (0, 1))


def test_torus_perpendicular_rays_periodic():
    c = flat_torus_example2()
    x = np.array([0.3, -0.2, 1.0])
    p = trace(c, PhasePoint(x, np.array([0.0, 0.0, 1.0])), (0, 2 * np.pi))
    np.testing.assert_allclose(c.wrap(p.x[-1])[:2], x[:2], atol=1e-10)
    assert (c.wrap(p.x[-1])[2] - x[2] + np.pi) % (2 * np.pi) - np.pi == pytest.approx(0, abs=1e-9)


def test_sphere_meridian_closed_form():
    c = sphere_cap()
    p = trace(c, _start(c, [0.2, 0.7], [1.0, 0.0]), (0, 1.0))
    np.testing.assert_allclose(p.x[:, 0], 0.2 + p.t, atol=1e-8)
    np.testing.assert_allclose(p.x[:, 1], 0.7, atol=1e-8)


def test_exp_map():
    d = euclidean_disc()
    np.testing.assert_allclose(exp_map(d, [0.1, 0.2], [0.0, 0.0]), [0.1, 0.2])
    np.testing.assert_allclose(exp_map(d, [0.0, 0.0], [0.5, 0.0]), [0.5, 0.0], atol=1e-14)
    # great-circle arc of length pi from the pole ends at the antipode
    c = sphere_cap()
    np.testing.assert_allclose(exp_map(c, [0.0, 0.0], [np.pi, 0.0]), [np.pi, 0.0], atol=1e-6)


def test_jacobi_flat(disc):
    p = trace(disc, _start(disc, [-0.5, 0.0], [1.0, 0.0]), (0, 1.0))
    J0, DJ0 = np.array([0.0, 0.3]), np.array([0.0, -0.7])
    sol = jacobi(p, J0, DJ0)
    np.testing.assert_allclose(sol.J, J0 + sol.t[:, None] * DJ0, atol=1e-10)


@pytest.mark.parametrize("chart, exact", [(sphere_cap(), np.sin), (hyperbolic_disc(), np.sinh)])
def test_jacobi_constant_curvature(chart, exact):
    x = np.array([1.0, 0.0]) if chart.name == "sphere_cap" else np.array([0.0, 0.0])
    v = np.array([0.0, 1.0]) if chart.name == "sphere_cap" else np.array([1.0, 0.0])
    T = 2.5 if chart.name == "sphere_cap" else 1.0
    p = trace(chart, _start(chart, x, v), (0, T))
    # unit normal at the start
    g = chart.g(x)
    nrm = np.array([v[1], -v[0]]) if chart.name == "sphere_cap" else np.array([0.0, 1.0])
    nrm = nrm / np.sqrt(nrm @ g @ nrm)
    sol = jacobi(p, np.zeros(2), nrm)
    gs = chart.g(p.x)
    vel = np.stack([p.xi[:, k] for k in range(2)], -1)
    vel = np.einsum("tij,tj->ti", chart.ginv(p.x), vel)
    # length of the normal part of J
    par = np.einsum("ti,tij,tj->t", sol.J, gs, vel)
    norm2 = np.einsum("ti,tij,tj->t", sol.J, gs, sol.J) - par**2
    np.testing.assert_allclose(np.sqrt(np.maximum(norm2, 0)), np.abs(exact(p.t)), atol=1e-6)


def test_conjugate_points():
    c = sphere_cap()
    p = trace(c, _start(c, [1.0, 0.0], [0.0, 1.0]), (0, 3.5))
    tc = conjugate_points(p)
    assert len(tc) == 1 and abs(tc[0] - np.pi) <= 1e-3
    d = euclidean_disc()
    assert conjugate_points(trace(d, _start(d, [-1.1, 0.0], [1.0, 0.2]), (0, 2.2))) == []
    h = hyperbolic_disc()
    assert conjugate_points(trace(h, _start(h, [-0.6, 0.0], [1.0, 0.0]), (0, 2.0))) == []


def test_is_simple():
    d = euclidean_disc()
    ok, why = is_simple(trace(d, PhasePoint(np.array([-1.1, 0.0]), np.array([1.0, 0.0])), (0, 2.2)))
    assert ok and why == "simple"
    ok, why = is_simple(trace(d, PhasePoint(np.array([-1.0, 0.0]), np.array([1.0, 0.0])), (0, 2.05)))
    assert not ok and why == "endpoint in M"
    c = sphere_cap(r_M=1.2, r_M1=1.5)
    p = trace(c, _start(c, [1.3, 0.0], [0.0, 1.0]), (0, 3.5))
    ok, why = is_simple(p)
    assert not ok


@settings(max_examples=10, deadline=None)
@given(st.floats(0.4, 1.2), st.floats(0, 2 * np.pi), st.floats(0, 2 * np.pi))
def test_energy_conserved_sphere(r, phi, ang):
    c = sphere_cap()
    p = trace(c, _start(c, [r, phi], [np.cos(ang), np.sin(ang) / np.sin(r)]), (0, 1.0))
    assert np.max(np.abs(energy(c, p.z) - 0.5)) < 1e-8
