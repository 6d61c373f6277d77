import numpy as np
import pytest

from geoxray.analysis import (injectivity_probe, random_solenoidal, reconstruct, solenoidal_basis,
                              stability_constant)
from geoxray.decomposition import projectors, symdiff_operator
from geoxray.fields import Grid
from geoxray.transform import assemble


@pytest.fixture(scope="module")
def setup16(disc, fan):
    g = Grid.over(disc, 16)
    return g, solenoidal_basis(disc, g), assemble(fan, g, 2, layout="spline")


def test_basis_dimension_and_orthonormality(disc, setup16):
    g, basis, _ = setup16
    op = symdiff_operator(g, disc, "spline", "M")
    rank = np.linalg.matrix_rank(op.D.toarray())
    assert rank == op.space_v.size  # interior potentials are independent
    assert basis.dim == op.space_f.size - rank
    W = basis.space.weights
    G = basis.B.T @ (W[:, None] * basis.B)
    np.testing.assert_allclose(G, np.eye(basis.dim), atol=1e-12)
    _, S = projectors(g, disc, method="direct")
    for k in range(basis.dim):
        b = basis.B[:, k]
        assert basis.space.norm(S(b) - b) <= 1e-10


def test_probe_separates(setup16):
    _, basis, A = setup16
    rep = injectivity_probe(A, basis)
    assert rep.sigma_min > 0 and rep.separation <= 1e-3
    assert len(rep.tail) == 20 and "sigma_min" in rep.summary()


def test_gapped_family_loses_injectivity(gapped_disc, gapped, setup16):
    _, _, A = setup16
    full = injectivity_probe(A, setup16[1]).sigma_min
    g = Grid.over(gapped_disc, 16)
    rep = injectivity_probe(assemble(gapped, g, 2, layout="spline"), solenoidal_basis(gapped_disc, g))
    assert rep.sigma_min < 1e-2 * full


def test_reconstruction_clean_and_potential(disc, setup16):
    g, basis, A = setup16
    rng = np.random.default_rng(1)
    f = random_solenoidal(basis, rng)[:, 0]
    rec = reconstruct(A, A.apply(f), truth=f)
    assert rec.converged and rec.rel_error <= 0.05
    op = symdiff_operator(g, disc, "spline", "M")
    dv = op.D @ rng.standard_normal(op.space_v.size)
    rp = reconstruct(A, A.matrix @ dv)
    assert A.space.norm(rp.coefficients) <= 1e-2 * A.space.norm(dv)


def test_noise_bounded_by_stability_constant(disc, fan):
    g = Grid.over(disc, 16)
    A = assemble(fan, g, 0, layout="spline")
    basis = solenoidal_basis(disc, g, 0)
    rep = stability_constant(A, disc, trials=10, basis=basis)
    assert np.isfinite(rep.C) and rep.norm == "H1"
    f = random_solenoidal(basis, np.random.default_rng(2))[:, 0]
    errs = []
    for level in (0.01, 0.02):
        r = reconstruct(A, A.matrix @ f, noise=level, truth=f, rng=np.random.default_rng(5))
        e = r.coefficients - f
        assert rep.ratio(e) <= rep.C * (1 + 1e-9)
        errs.append(r.rel_error)
    assert 1.5 <= errs[1] / errs[0] <= 2.5


def test_order_mismatch_rejected(disc, fan, setup16):
    g, basis, _ = setup16
    A0 = assemble(fan, g, 0, layout="spline")
    with pytest.raises(ValueError, match="different spaces"):
        injectivity_probe(A0, basis)
