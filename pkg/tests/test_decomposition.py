import numpy as np
import pytest

from geoxray.decomposition import (boundary_normalize, decompose, divergence, solve_dirichlet, sym_diff,
                                   symdiff_operator)
from geoxray.fields import Grid, OneForm, eval_field, sample_field
from geoxray.manifold import BoundaryNormalFrame, euclidean_chart, sphere_cap


def test_sym_diff_hand_example(disc):
    g = Grid.over(disc, 24)
    v = OneForm(g, np.stack([g.points()[..., 1], np.zeros(g.shape)]), "cubic", disc, "none")
    dv = sym_diff(v)
    x = np.array([[0.1, -0.3], [0.4, 0.2]])
    np.testing.assert_allclose(dv(x), [[0.0, 0.5, 0.0]] * 2, atol=1e-12)
    zero = OneForm(g, np.zeros((2,) + g.shape), "cubic", disc, "none")
    assert not np.any(sym_diff(zero).components)


def test_sym_diff_sphere_hessian():
    # v = d phi(r) with phi = sin(2 r): dv = Hess phi = diag(phi'', sin r cos r phi')
    c = sphere_cap()
    errs = []
    for N in (64, 128):
        g = Grid.over(c, N)
        P = g.points()
        r = P[..., 0]
        v = OneForm(g, np.stack([2 * np.cos(2 * r), np.zeros(g.shape)]), "cubic", c, "none")
        x = np.array([[0.6, 1.0], [0.9, 4.0], [1.1, 2.5]])
        rr = x[:, 0]
        exact = np.stack([-4 * np.sin(2 * rr), 0 * rr, np.sin(rr) * np.cos(rr) * 2 * np.cos(2 * rr)], -1)
        errs.append(np.max(np.abs(sym_diff(v)(x) - exact)))
    assert errs[1] < errs[0] / 3


def test_divergence_constant_and_adjoint(disc):
    g = Grid.over(disc, 20)
    c = sample_field(lambda p: np.broadcast_to([1.0, 2.0, -1.0], p.shape[:-1] + (3,)), 2, g, disc,
                     interp="spline", domain="none")
    op = symdiff_operator(g, disc, "spline", "M")
    # constants only feel the boundary: interior coefficients away from dM vanish
    dc = op.delta(op.space_f.to_vector(c))
    inner = np.linalg.norm(op.space_v.positions(), axis=1) < 0.6
    assert np.max(np.abs(dc[inner])) < 1e-12
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        v = rng.standard_normal(op.space_v.size)
        f = rng.standard_normal(op.space_f.size)
        lhs = op.space_f.inner(op.d(v), f)
        rhs = -op.space_v.inner(v, op.delta(f))
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    assert worst <= 1e-12
    assert isinstance(divergence(op.space_f.to_field(f)), OneForm)


def test_dirichlet_zero_and_symmetry(disc):
    g = Grid.over(disc, 25)
    zero = OneForm(g, np.zeros((2,) + g.shape), "spline", disc)
    assert not np.any(solve_dirichlet(zero, method="direct").components)
    # radial rhs x * b(r): the solution is radial as well, v(R x) = R v(x)
    op = symdiff_operator(g, disc, "spline", "M")
    rhs = op.space_v.to_field(op.space_v.sample(lambda p: p * np.exp(-4 * np.sum(p**2, -1))[..., None]), OneForm)
    v = solve_dirichlet(rhs, disc, method="cg", tol=1e-12)
    x = np.array([[0.3, 0.1]])
    xr = np.array([[-0.1, 0.3]])  # rotated by 90 degrees (grid symmetric under this rotation)
    a, b = v(x)[0], v(xr)[0]
    np.testing.assert_allclose([-a[1], a[0]], b, atol=1e-9)


def test_decompose_potential_and_solenoidal(disc):
    g = Grid.over(disc, 24)
    op = symdiff_operator(g, disc, "spline", "M")
    rng = np.random.default_rng(3)
    v0 = op.space_v.sample(lambda p: np.maximum(1 - np.sum(p**2, -1), 0)[..., None] ** 3 * np.array([1.0, -0.5]))
    f = op.space_f.to_field(op.d(v0))
    dec = decompose(f, disc, method="direct")
    assert dec.residual["norm_fs"] <= 1e-2 * dec.residual["norm_f"]
    # a discretely solenoidal field is left untouched
    h = rng.standard_normal(op.space_f.size)
    x = op.solve_K(op.D.T @ (op.space_f.weights * h), "direct")
    fs = op.space_f.to_field(h - op.D @ x)
    dec2 = decompose(fs, disc, method="direct")
    assert dec2.residual["norm_dv"] <= 1e-10 * dec2.residual["norm_f"]
    assert dec2.residual["orthogonality"] <= 1e-10 or dec2.residual["norm_dv"] == 0
    dec3 = decompose(op.space_f.to_field(h), disc, method="direct")
    assert dec3.residual["orthogonality"] <= 1e-10


def _half_plane():
    c = euclidean_chart("half_plane", [[-2.0, -1.0], [2.0, 1.0]], lambda x: -x[..., 1],
                        lambda x: -x[..., 1] - 0.5)
    return c, BoundaryNormalFrame(c, 0.5, 1e-3, 1e-8)


def test_boundary_normalize_half_plane():
    c, fr = _half_plane()
    g = Grid.over(c, (81, 41))
    f = sample_field(lambda p: np.broadcast_to([0.0, 0.0, 1.0], p.shape[:-1] + (3,)), 2, g, c, domain="none")
    curve = lambda s: np.stack([s, np.zeros_like(s)], -1)  # noqa: E731
    v0, ft = boundary_normalize(f, fr, curve=curve, s_range=(-1.0, 1.0), periodic=False, n_s=21)
    # grid nodes whose difference stencils stay inside the uncut inner half of the collar
    x = np.array([[0.1, 0.1], [-0.3, 0.1], [0.5, 0.15]])
    np.testing.assert_allclose(v0(x)[:, 1], x[:, 1], atol=1e-8)
    np.testing.assert_allclose(ft(x)[:, 2], 0.0, atol=1e-8)
    zero = sample_field(lambda p: np.zeros(p.shape[:-1] + (3,)), 2, g, c, domain="none")
    v0, ft = boundary_normalize(zero, fr, curve=curve, s_range=(-1.0, 1.0), periodic=False, n_s=21)
    assert not np.any(v0.components) and not np.any(ft.components)


def test_boundary_normalize_random_smooth(disc):
    from geoxray.manifold import boundary_frame
    from geoxray.decomposition import normal_gauge
    fr = boundary_frame(disc, 0.15)
    rng = np.random.default_rng(8)
    C = rng.standard_normal((3, 3))
    f = lambda p: np.stack([C[k, 0] + C[k, 1] * p[..., 0] + C[k, 2] * np.sin(p[..., 1]) for k in range(3)], -1)  # noqa: E731
    from geoxray.fields import AnalyticField
    gauge = normal_gauge(AnalyticField(2, f, disc, "none"), fr, n_s=32)
    assert gauge.defect <= 1e-6
