"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with its timing.

Family construction is shared between criteria through session fixtures and
is timed inside the first criterion that needs it.
"""

import time

import numpy as np
import pytest

from geoxray.analysis import injectivity_probe, random_solenoidal, reconstruct, solenoidal_basis, stability_constant
from geoxray.decomposition import projectors, solve_dirichlet, symdiff_operator
from geoxray.family import completeness_check, cosphere_grid, fan_family, torus_family
from geoxray.fields import Grid, sample_field
from geoxray.geodesics import PhasePoint, conjugate_points, trace, unit_covector
from geoxray.manifold import euclidean_disc, flat_torus_example2, sphere_cap
from geoxray.symbols import ellipticity_scan, principal_symbol
from geoxray.transform import assemble, kernel_normal, normal_apply


def _bump_potential(coef):
    def v(p):
        x, y = p[..., 0], p[..., 1]
        b = np.maximum(1 - x * x - y * y, 0) ** 3
        return np.stack([b * sum(coef[i, a, c] * x**a * y**c for a in range(3) for c in range(3))
                         for i in range(2)], -1)
    return v


def test_potential_annihilation(criterion, disc):
    rec = criterion("1 potential annihilation")
    fam = fan_family(disc)
    g = Grid.over(disc, 64)
    op = symdiff_operator(g, disc, "spline", "M")
    A = assemble(fam, g, 2, layout="spline")
    absA = abs(A.matrix)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        v = op.space_v.sample(_bump_potential(rng.standard_normal((2, 3, 3))))
        f = op.d(v)
        u = A.matrix @ f
        worst = max(worst, np.max(np.abs(u)) / np.max(absA @ np.abs(f)))
    rec.check("rays", fam.n_rays, ">=", 1600)
    rec.check("max relative ray value", worst, "<=", 1e-4)
    ok, line = rec.finish(30.0)
    assert ok, line


def test_adjoint_defect(criterion, disc, fan):
    rec = criterion("2 discrete adjoint")
    rng = np.random.default_rng(7)
    worst = 0.0
    for order, layout in ((0, "cubic"), (1, "cubic"), (2, "cubic"), (2, "spline")):
        A = assemble(fan, Grid.over(disc, 24), order, layout=layout)
        for _ in range(25):
            f = rng.standard_normal(A.space.size)
            u = rng.standard_normal(A.shape[0])
            lhs = np.sum(A.mu * (A.matrix @ f) * u)
            rhs = A.space.inner(f, A.adjoint(u))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    rec.check("relative defect (100 pairs)", worst, "<=", 1e-12)
    ok, line = rec.finish(5.0)
    assert ok, line


def test_conjugate_point_on_cap(criterion):
    rec = criterion("3 conjugate point on the +1 cap")
    c = sphere_cap()
    x = np.array([1.0, 0.0])
    path = trace(c, PhasePoint(x, unit_covector(c, x, np.array([0.0, 1.0]))), (0.0, 3.5), h_ode=1e-3)
    tc = conjugate_points(path)
    err = abs(tc[0] - np.pi) if tc else np.inf
    rec.check("|t* - pi|", err, "<=", 1e-3)
    ok, line = rec.finish(1.0)
    assert ok, line


def test_torus_example(criterion):
    rec = criterion("4 flat solid torus")
    c = flat_torus_example2()
    fam = torus_family(c)
    L = max(fc.length_in_M[fc.alpha > 0].max() for fc in fam.charts)
    rec.check("max length_in_M over supp alpha", L, "<=", 2.25)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(8):
        r, a = np.sqrt(rng.uniform(0, 0.95)), rng.uniform(0, 2 * np.pi)
        x = np.array([r * np.cos(a), r * np.sin(a), rng.uniform(0, 2 * np.pi)])
        p = trace(c, PhasePoint(x, np.array([0.0, 0.0, 1.0])), (0.0, 2 * np.pi), h_ode=1e-3)
        d = c.wrap(p.x[-1]) - c.wrap(x)
        d[2] = (d[2] + np.pi) % (2 * np.pi) - np.pi
        worst = max(worst, np.max(np.abs(d)), np.max(np.abs(p.xi[-1] - p.xi[0])))
    rec.check("periodicity defect", worst, "<=", 1e-6)
    ok, line = rec.finish(10.0)
    assert ok, line


P_MANUF = 6


def _vstar(p):
    x, y = p[..., 0], p[..., 1]
    b = np.maximum(1 - x * x - y * y, 0) ** P_MANUF
    return np.stack([b * (1 + x - 0.5 * y), b * (0.3 + x * y)], -1)


def _vstar_jet(p):
    """Exact ``(delta^s d v*)_i = 1/2 (Lap v*_i + d_i div v*)`` by fourth-order central differences of the closed form."""
    e = 1e-3

    def d(fun, k, q):
        s = np.zeros(2)
        s[k] = e
        return (-fun(q + 2 * s) + 8 * fun(q + s) - 8 * fun(q - s) + fun(q - 2 * s)) / (12 * e)

    out = np.zeros(p.shape)
    for i in range(2):
        lap = sum(d(lambda q: d(lambda r: _vstar(r)[..., i], k, q), k, p) for k in range(2))
        ddiv = d(lambda q: sum(d(lambda r: _vstar(r)[..., j], j, q) for j in range(2)), i, p)
        out[..., i] = 0.5 * (lap + ddiv)
    return out


def test_decomposition_structure(criterion, disc):
    rec = criterion("5 decomposition structure")
    rng = np.random.default_rng(11)
    idem = orth = 0.0
    errs = []
    for N in (16, 32):
        g = Grid.over(disc, N)
        op = symdiff_operator(g, disc, "spline", "M")
        P, S = projectors(g, disc, method="direct")
        sf = op.space_f
        for _ in range(3):
            f = rng.standard_normal(sf.size)
            Sf, Pf = S(f), P(f)
            idem = max(idem, sf.norm(S(Sf) - Sf) / sf.norm(f))
            orth = max(orth, abs(sf.inner(Sf, Pf)) / (sf.norm(Sf) * sf.norm(Pf)))
        rhs = op.space_v.to_field(op.space_v.sample(_vstar_jet))
        v = solve_dirichlet(rhs, disc, method="direct")
        vs = op.space_v.sample(_vstar)
        errs.append(op.space_v.norm(op.space_v.to_vector(v) - vs) / op.space_v.norm(vs))
    rate = np.log2(errs[0] / errs[1])
    rec.check("|S S f - S f| / |f|", idem, "<=", 1e-10)
    rec.check("<Sf, Pf> relative", orth, "<=", 1e-10)
    rec.check("observed order 16->32", rate, ">=", 1.7)
    ok, line = rec.finish(60.0)
    assert ok, line


def test_kernel_vs_composition(criterion, disc):
    rec = criterion("6 kernel vs composition")
    fam = fan_family(disc, n_s=80, n_psi=80)
    g = Grid.over(disc, 32)

    def fn(p):
        phi = np.maximum(1 - np.sum(p**2, -1), 0) ** 2
        return phi[..., None] * np.array([1.0, 0.0, 1.0])

    f = sample_field(fn, 2, g, disc)
    A = assemble(fam, g, 2)
    A1 = assemble(fam, g, 2, domain="M1")
    Nc = normal_apply(A, f, A1)
    Nk = kernel_normal(disc, f, fam)
    inM = disc.level_M(g.points().reshape(-1, 2)) <= 0
    a = Nc.components.reshape(3, -1)[:, inM]
    b = Nk.components.reshape(3, -1)[:, inM]
    rec.check("relative L2 difference on M", np.linalg.norm(a - b) / np.linalg.norm(b), "<=", 0.05)
    ok, line = rec.finish(60.0)
    assert ok, line


def test_symbol_suite(criterion, disc, fan, gapped_disc, gapped):
    rec = criterion("7 symbol suite")
    rng = np.random.default_rng(5)
    pot = 0.0
    neg = np.inf
    for _ in range(20):
        x = rng.uniform(-0.6, 0.6, 2)
        xi = rng.standard_normal(2)
        w = rng.standard_normal(2)
        s = principal_symbol(disc, fan, x, xi)
        f = 0.5 * (np.outer(xi, w) + np.outer(w, xi))
        pot = max(pot, abs(s.form(f)) / (np.linalg.norm(s.tensor) * np.linalg.norm(f) ** 2))
        perp = np.array([-xi[1], xi[0]])
        for _ in range(5):
            h = np.outer(perp, perp) * rng.standard_normal()
            neg = min(neg, s.form(h) / (np.linalg.norm(s.tensor) * np.linalg.norm(h) ** 2))
    rec.check("symbol on potential directions (relative)", pot, "<=", 1e-12)
    rec.check("symbol on solenoidal tensors (relative)", neg, ">=", -1e-12)
    for name, c, fam in (("complete", disc, fan), ("gapped", gapped_disc, gapped)):
        X, XI = cosphere_grid(c, 12, 12)
        scan = ellipticity_scan(c, fam, X, XI, dist_tol=0.1)
        rec.check(f"{name} flag agreement", scan.agreement, ">=", 0.98)
        if name == "gapped":
            rec.check("gapped non-elliptic fraction", 1 - scan.fraction_elliptic, ">", 0.0)
    ok, line = rec.finish(30.0)
    assert ok, line


def test_injectivity_and_reconstruction(criterion, disc, fan):
    rec = criterion("8 s-injectivity probe + reconstruction")
    g = Grid.over(disc, 16)
    basis = solenoidal_basis(disc, g)
    A = assemble(fan, g, 2, layout="spline")
    rep = injectivity_probe(A, basis)
    rec.check("sigma_min(solenoidal)", rep.sigma_min, ">", 0.0)
    rec.check("sigma_max ratio potential/solenoidal", rep.separation, "<=", 1e-3)
    rng = np.random.default_rng(99)
    f = random_solenoidal(basis, rng)[:, 0]
    r = reconstruct(A, A.matrix @ f, truth=f)
    rec.check("reconstruction relative L2 error", r.rel_error, "<=", 0.05)
    op = symdiff_operator(g, disc, "spline", "M")
    dv = op.D @ rng.standard_normal(op.space_v.size)
    rp = reconstruct(A, A.matrix @ dv)
    w = A.space.weights
    rec.check("reconstruction from potential data (relative)",
              np.sqrt(np.sum(w * rp.coefficients**2) / np.sum(w * dv**2)), "<=", 1e-2)
    ok, line = rec.finish(300.0)
    assert ok, line


def test_stability_constant(criterion, disc, fan, gapped_disc, gapped):
    rec = criterion("9 stability constant")
    Cs = {}
    worst = 0.0
    rng = np.random.default_rng(31)
    for name, c, fam in (("complete", disc, fan), ("gapped", gapped_disc, gapped)):
        for N in (12, 16):
            A = assemble(fam, Grid.over(c, N), 0, layout="spline")
            basis = solenoidal_basis(c, A.space.grid, 0)
            r = stability_constant(A, c, trials=0, basis=basis)
            Cs[name, N] = r.C
            for f in random_solenoidal(basis, rng, 200).T:
                worst = max(worst, r.ratio(f) / r.C)
    drift = abs(Cs["complete", 16] / Cs["complete", 12] - 1)
    growth = Cs["gapped", 16] / Cs["gapped", 12]
    rec.check("max |f|/(C |Nf|) over 4x200 fresh fields", worst, "<=", 1.0)
    rec.check("complete C change 12->16", drift, "<=", 0.25)
    rec.check("gapped C growth 12->16", growth, ">=", 4.0)
    ok, line = rec.finish(300.0)
    assert ok, line
