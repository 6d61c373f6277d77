import numpy as np
import pytest

from geoxray.family import cosphere_grid
from geoxray.symbols import ellipticity_check, ellipticity_scan, principal_symbol, solenoidal_frame


def test_two_point_reduction(disc, fan):
    # xi = e2: only theta = +-e1 contribute, so the form is c * f_11^2
    s = principal_symbol(disc, fan, [0.0, 0.0], [0.0, 1.0])
    T = s.tensor
    assert T[0, 0, 0, 0] > 0
    mask = np.ones_like(T, dtype=bool)
    mask[0, 0, 0, 0] = False
    assert np.max(np.abs(T[mask])) <= 1e-14 * T[0, 0, 0, 0]
    f = np.array([[0.0, 0.7], [0.7, -0.4]])
    assert s.form(f) == pytest.approx(0.0, abs=1e-14)
    ok, lam = ellipticity_check(s, disc)
    assert ok and lam > 0


def test_empty_support_gives_zero(disc):
    s = principal_symbol(disc, None, [0.1, 0.2], [0.3, 0.4])
    assert not np.any(s.tensor)
    ok, lam = ellipticity_check(s, disc)
    assert not ok and lam <= 1e-10


def test_potential_directions_vanish(disc, fan, rng):
    for _ in range(10):
        xi = rng.standard_normal(2)
        w = rng.standard_normal(2)
        f = 0.5 * (np.outer(xi, w) + np.outer(w, xi))
        s = principal_symbol(disc, fan, rng.uniform(-0.5, 0.5, 2), xi)
        assert abs(s.form(f)) <= 1e-12 * np.abs(s.tensor).max() * np.sum(f**2)


@pytest.mark.parametrize("order", [0, 1, 2])
def test_solenoidal_frame(disc, order):
    xi = np.array([0.6, 0.8])
    F = solenoidal_frame(disc, [0.0, 0.0], xi, order)
    # in 2D the solenoidal fibre is one-dimensional: the powers of xi-perp
    assert F.shape == (1,) + (2,) * order
    b = F[0]
    assert np.sum(b * b) == pytest.approx(1.0)
    if order >= 1:
        assert np.max(np.abs(np.tensordot(xi, b, axes=1))) < 1e-12


def test_scans(disc, fan, gapped_disc, gapped):
    X, XI = cosphere_grid(disc, 8, 8)
    sc = ellipticity_scan(disc, fan, X, XI, dist_tol=0.1)
    assert sc.fraction_elliptic == 1.0 and sc.global_min >= -1e-12 and sc.agreement >= 0.98
    X2, XI2 = cosphere_grid(gapped_disc, 8, 8)
    sc2 = ellipticity_scan(gapped_disc, gapped, X2, XI2, dist_tol=0.1)
    assert sc2.fraction_elliptic < 1.0 and sc2.agreement >= 0.98 and sc2.global_min >= -1e-12
    sc0 = ellipticity_scan(disc, None, X, XI)
    assert sc0.fraction_elliptic == 0.0
    header, rows = sc.rows()
    assert header[-3:] == ["min_eig", "is_elliptic", "covered"] and len(rows) == XI.shape[0] * XI.shape[1]


def test_xi_zero_rejected(disc, fan):
    with pytest.raises(ValueError):
        principal_symbol(disc, fan, [0.0, 0.0], [0.0, 0.0])
