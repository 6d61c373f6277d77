import numpy as np
import pytest

from geoxray.family import (CoordinateSurface, build_chart, completeness_check, cosphere_grid, fan_family, mu_weight,
                            torus_family)
from geoxray.manifold import flat_torus_example2, sphere_cap


def test_fan_all_simple(fan):
    fc = fan.charts[0]
    assert fan.n_rays == 1600
    assert np.all(fc.simple)
    assert np.count_nonzero(fc.alpha > 0) == np.count_nonzero(fc.alpha_raw > 0)
    assert np.all(fc.alpha >= 0)


def test_mu_weight_cosine(fan):
    fc = fan.charts[0]
    gnu = np.einsum("zi,zti->zt", fc.nu, fc.theta)
    it = int(np.argmax(gnu[0]))
    ratio = mu_weight(fc, (0, it)) / gnu[0, it]
    for j in range(fc.n_theta):
        assert mu_weight(fc, (0, j)) == pytest.approx(ratio * abs(gnu[0, j]), rel=1e-12)


def test_torus_lengths():
    fam = torus_family(flat_torus_example2())
    for fc in fam.charts:
        assert np.all(fc.simple[fc.alpha > 0])
        assert fc.length_in_M[fc.alpha > 0].max() <= 2 + 0.2


def test_cap_conjugate_rays_cut():
    c = sphere_cap(r_M=1.2, r_M1=2.0)
    # rays passing near the pole (an even node count avoids the chart singularity itself):
    # length 2.8 stays short of pi, length 3.3 passes it
    lp = lambda z, th, s, psi: np.where(psi[..., 0] > 0, 3.3, 2.8)  # noqa: E731
    with pytest.warns(RuntimeWarning, match="conjugate"):
        fc = build_chart(c, _cap_surface(c), [8], [(-0.4, 0.4)], [6], 0.0, lp, h_ode=1e-3, label="cap")
    long = (fc.l_plus > 3.0) & (fc.alpha_raw > 0)
    assert long.any() and np.all(fc.alpha[long] == 0)
    assert np.all(fc.reasons[long] == "conjugate points")
    short = (fc.l_plus < 3.0) & (fc.alpha_raw > 0)
    assert short.any() and np.all(fc.simple[short])


def _cap_surface(c):
    # the circle r = 1.35 in M1 minus M, rays pointing into the cap
    return CoordinateSurface(axis=0, value=1.35, ranges=[(0.0, 2 * np.pi)], sign=-1.0, dim=2, periodic=(True,))


def test_coverage(disc, fan, gapped_disc, gapped):
    x, xi = cosphere_grid(disc, 8, 12)
    h = 2.5 / 31
    rep = completeness_check(fan, disc, x, xi, dist_tol=2 * h)
    assert rep.fraction == 1.0
    x2, xi2 = cosphere_grid(gapped_disc, 8, 12)
    rep2 = completeness_check(gapped, gapped_disc, x2, xi2, dist_tol=2 * h)
    assert rep2.fraction < 1.0
    # rays are near-horizontal, so the uncovered covectors are near-horizontal too
    dirs = xi2[~rep2.covered.reshape(xi2.shape[:2])]
    assert np.all(np.degrees(np.arctan2(np.abs(dirs[:, 1]), np.abs(dirs[:, 0]))) < 65.0)
    rep0 = completeness_check(None, disc, x, xi, dist_tol=2 * h)
    assert rep0.fraction == 0.0
