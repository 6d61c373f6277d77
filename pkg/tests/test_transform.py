import numpy as np
import pytest

from geoxray.decomposition import symdiff_operator
from geoxray.family import fan_family
from geoxray.fields import AnalyticField, Grid, sample_field
from geoxray.manifold import boundary_frame
from geoxray.transform import (assemble, h2_norm, htilde2_norm, kernel_normal, normal_apply, ray_quadrature,
                               xray)


def _alpha_len(fam):
    return (np.concatenate([fc.alpha.ravel() for fc in fam.charts]),
            np.concatenate([fc.length_in_M.ravel() for fc in fam.charts]))


def _metric_field(p):
    return np.broadcast_to(np.array([1.0, 0.0, 1.0]), p.shape[:-1] + (3,))


def test_metric_gives_length(disc, fan):
    f = sample_field(_metric_field, 2, Grid.over(disc, 32), disc)
    u = xray(f, fan)
    a, L = _alpha_len(fan)
    np.testing.assert_allclose(u.values, a * L, atol=1e-10)


def test_exact_differential_vanishes(disc, fan):
    # f = d phi with phi = 0 on the boundary: the integral telescopes
    phi_grad = lambda p: np.stack([-2 * p[..., 0], -2 * p[..., 1]], -1)  # phi = 1 - |x|^2  # noqa: E731
    u = xray(AnalyticField(1, phi_grad, disc), fan)
    a, _ = _alpha_len(fan)
    assert np.max(np.abs(u.values)) <= 1e-9 * np.max(a)


def test_matrix_matches_xray_and_zero(disc, fan):
    g = Grid.over(disc, 24)
    f = sample_field(lambda p: np.stack([np.sin(p[..., 0]), p[..., 1] ** 2, np.cos(p[..., 1])], -1), 2, g, disc)
    A = assemble(fan, g, 2)
    assert np.max(np.abs(A.apply(f).values - xray(f, fan).values)) <= 1e-12
    assert not np.any(A.apply(np.zeros(A.space.size)).values)
    with pytest.raises(ValueError, match="order mismatch"):
        xray(f, fan, order=1)


def test_quadrature_self_convergence(disc):
    bump = AnalyticField(0, lambda p: ((1 - np.sum(p**2, -1)) ** 3 * np.cos(p[..., 0]))[..., None], disc)
    errs = []
    fams = [fan_family(disc, n_s=8, n_psi=8, h_ode=h) for h in (0.04, 0.02)]
    ref = xray(bump, fan_family(disc, n_s=8, n_psi=8, h_ode=0.002), n_gauss=8).values
    for fam in fams:
        errs.append(np.max(np.abs(xray(bump, fam, rule="trapezoid").values - ref)))
    assert errs[0] / errs[1] >= 2.0


def test_backprojection_sparsity(disc, fan):
    g = Grid.over(disc, 24)
    A = assemble(fan, g, 2)
    r = int(np.nonzero(A.matrix.getnnz(axis=1))[0][100])
    u = np.zeros(A.shape[0])
    u[r] = 1.0
    out = A.adjoint(u)
    assert set(np.nonzero(out)[0]) <= set(A.matrix[r].indices)


def test_normal_positive_and_kills_potentials(disc, fan):
    g = Grid.over(disc, 16)
    A = assemble(fan, g, 2, layout="spline")
    rng = np.random.default_rng(4)
    for _ in range(100):
        f = rng.standard_normal(A.space.size)
        assert A.space.inner(A.normal(f), f) >= -1e-12 * A.space.norm(f) ** 2
    op = symdiff_operator(g, disc, "spline", "M")
    dv = op.D @ rng.standard_normal(op.space_v.size)
    assert A.space.norm(A.normal(dv)) <= 1e-10 * A.space.norm(dv)


def test_kernel_zero_and_decay(disc, fan):
    g = Grid.over(disc, 33)
    zero = sample_field(lambda p: np.zeros(p.shape[:-1] + (1,)), 0, g, disc)
    assert not np.any(kernel_normal(disc, zero, fan).components)
    # point source at the origin (node 16, 16): N f ~ 1/rho in 2D where |alpha#| = 1
    arr = np.zeros((1,) + g.shape)
    arr[0, 16, 16] = 1.0
    from geoxray.fields import SymmetricTensorField
    f = SymmetricTensorField(0, g, arr, "cubic", disc)
    Nf = kernel_normal(disc, f, fan).components[0]
    rho = np.array([3, 4, 5, 6]) * g.spacing[0]
    vals = np.array([Nf[16 + k, 16] for k in (3, 4, 5, 6)])
    prod = vals * rho
    np.testing.assert_allclose(prod, prod[0], rtol=1e-6)


def test_kernel_requires_flat(fan):
    from geoxray.manifold import sphere_cap
    c = sphere_cap()
    f = sample_field(lambda p: np.ones(p.shape[:-1] + (1,)), 0, Grid.over(c, 8), c)
    with pytest.raises(ValueError, match="flat"):
        kernel_normal(c, f, fan)


def test_htilde2_basic(disc):
    fr = boundary_frame(disc, 0.15)
    g = Grid.over(disc, 64)
    one = sample_field(lambda p: np.ones(p.shape[:-1] + (1,)), 0, g, disc, domain="M1")
    assert htilde2_norm(one, fr) == pytest.approx(np.sqrt(np.pi * 1.2**2), rel=2e-3)
    zero = sample_field(lambda p: np.zeros(p.shape[:-1] + (1,)), 0, g, disc, domain="M1")
    assert htilde2_norm(zero, fr) == 0.0


def test_htilde2_bounded_where_h2_blows_up(disc):
    fr = boundary_frame(disc, 0.15)
    g = Grid.over(disc, 128)
    res = []
    for eps in (0.08, 0.04, 0.02):
        f = sample_field(lambda p: (eps * np.log1p(np.exp((1 - np.hypot(p[..., 0], p[..., 1])) / eps)))[..., None],
                         0, g, disc, domain="M1")
        res.append((htilde2_norm(f, fr), h2_norm(f)))
    res = np.array(res)
    growth_t = res[-1, 0] / res[0, 0]
    growth_h = res[-1, 1] / res[0, 1]
    assert growth_t < 1.25 and growth_h > 1.3 and growth_h > growth_t
