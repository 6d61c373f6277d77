"""Weighted geodesic X-ray transform, its exact discrete adjoint, and the normal operator.

Rays are integrated with Gauss-Legendre rules on the pieces between the
breakpoints of the interpolant (grid or knot lines and, for masked layouts,
crossings of the domain boundary), so for piecewise-polynomial fields on
straight rays the quadrature is exact.  The composite trapezoid rule at the
tracing step is available as ``rule="trapezoid"``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from .family import FamilyChart, GeodesicFamily, _g_frame
from .fields import (AnalyticField, DofSpace, Grid, SymmetricTensorField, _domain_level,
                     components, eval_field, monomials, multiplicity)
from .geodesics import _crossings, hamilton_rhs, trace_batch, unit_covector
from .manifold import BoundaryNormalFrame, CollarError, MetricChart

N_GAUSS = 4
MAX_NNZ = 2e8


# ----------------------------------------------------------------------
@dataclass
class RayQuadrature:
    """Quadrature points of all rays with nonzero weight.

    Attributes
    ----------
    rows : ndarray of int, shape (Q,)
        Global ray index of each point.
    x, v : ndarray, shape (Q, n)
        Positions (wrapped into the chart) and contravariant velocities.
    w : ndarray, shape (Q,)
        Quadrature weights in arc length (``alpha`` not included).
    """

    rows: np.ndarray
    x: np.ndarray
    v: np.ndarray
    w: np.ndarray
    n_rays: int


def _line_crossings(bundle, rays, lo, spacing):
    """Parameters where rays cross the lattice lines ``lo_k + j * spacing_k``."""
    n = bundle.chart.dim
    z = bundle.z[rays][..., :n]
    K = bundle.K[rays]
    steps = np.arange(z.shape[1] - 1)[None, :] < K[:, None]
    out_r, out_t = [], []
    for k in range(n):
        f = np.floor((z[..., k] - lo[k]) / spacing[k])
        ri, ii = np.nonzero(steps & (f[:, 1:] != f[:, :-1]))
        if ri.size == 0:
            continue
        f0, f1 = f[ri, ii], f[ri, ii + 1]
        cnt = np.abs(f1 - f0).astype(int)
        rep = np.repeat(np.arange(ri.size), cnt)
        within = np.arange(rep.size) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        c = lo[k] + (np.minimum(f0, f1)[rep] + 1 + within) * spacing[k]
        rr, i0 = rays[ri[rep]], ii[rep]
        h = bundle.h[rr]
        a0, a1 = bundle.z[rr, i0, k] - c, bundle.z[rr, i0 + 1, k] - c
        d0, d1 = bundle.dz[rr, i0, k] * h, bundle.dz[rr, i0 + 1, k] * h
        lo_s, hi_s = np.zeros(rr.size), np.ones(rr.size)
        sgn = np.sign(a0)
        for _ in range(52):
            s = 0.5 * (lo_s + hi_s)
            s2, s3 = s * s, s * s * s
            val = (2 * s3 - 3 * s2 + 1) * a0 + (s3 - 2 * s2 + s) * d0 \
                + (-2 * s3 + 3 * s2) * a1 + (s3 - s2) * d1
            same = np.sign(val) == sgn
            lo_s = np.where(same, s, lo_s)
            hi_s = np.where(same, hi_s, s)
        out_r.append(rr)
        out_t.append(bundle.t0[rr] + (i0 + 0.5 * (lo_s + hi_s)) * h)
    if not out_r:
        return np.zeros(0, dtype=int), np.zeros(0)
    return np.concatenate(out_r), np.concatenate(out_t)


def _domain_window(bundle, rays, level, cross):
    """Parameter window ``[a, b]`` of each ray spanning its visits to ``{level <= 0}``."""
    n = bundle.chart.dim
    chart = bundle.chart
    t0, t1 = bundle.t0[rays], bundle.t1[rays]
    z_start = bundle.z[rays, 0, :n]
    z_end = bundle.z[rays, bundle.K[rays], :n]
    in0 = level(chart.wrap(z_start)) <= 0
    in1 = level(chart.wrap(z_end)) <= 0
    a = np.where(in0, t0, np.nan)
    b = np.where(in1, t1, np.nan)
    for j, r in enumerate(rays):
        c = cross[r]
        if len(c):
            if not in0[j]:
                a[j] = c[0]
            if not in1[j]:
                b[j] = c[-1]
    return a, b


def _chart_quadrature(fc: FamilyChart, grid: Grid, domain: str, breaks: str, n_gauss: int,
                      rule: str):
    chart = fc.chart
    bundle = fc.bundle
    n = chart.dim
    rays = np.nonzero(fc.alpha.ravel() > 0)[0]
    if rays.size == 0:
        return (np.zeros(0, dtype=int),) + (np.zeros((0, n)),) * 2 + (np.zeros(0),)
    if rule == "trapezoid":
        valid = bundle.valid()[rays]
        rr, ii = np.nonzero(valid)
        r = rays[rr]
        w = bundle.h[r].copy()
        w[(ii == 0) | (ii == bundle.K[r])] *= 0.5
        z = bundle.z[r, ii]
        v = bundle.dz[r, ii, :n]
        return r, chart.wrap(z[:, :n]), v, w
    if rule != "gauss":
        raise ValueError(f"unknown quadrature rule {rule!r}")
    level = _domain_level(chart, domain)
    cross = bundle.cross_M if domain == "M" else bundle.cross_M1
    a, b = _domain_window(bundle, rays, level, cross)
    keep = np.isfinite(a) & np.isfinite(b) & (b > a)
    rays, a, b = rays[keep], a[keep], b[keep]
    spacing = grid.spacing * (0.5 if breaks == "half" else 1.0)
    er, et = _line_crossings(bundle, rays, grid.bbox[0], spacing)
    ev_r = [rays, rays, er]
    ev_t = [a, b, et]
    if breaks != "half":
        cr = [np.full(len(cross[r]), r) for r in rays]
        ev_r.append(np.concatenate(cr) if cr else np.zeros(0, dtype=int))
        ev_t.append(np.concatenate([cross[r] for r in rays]) if cr else np.zeros(0))
    ev_r = np.concatenate(ev_r)
    ev_t = np.concatenate(ev_t)
    # clip events to each ray's window
    pos = np.searchsorted(rays, ev_r)
    pos = np.clip(pos, 0, len(rays) - 1)
    ok = (rays[pos] == ev_r) & (ev_t >= a[pos]) & (ev_t <= b[pos])
    ev_r, ev_t = ev_r[ok], ev_t[ok]
    order = np.lexsort((ev_t, ev_r))
    ev_r, ev_t = ev_r[order], ev_t[order]
    same = ev_r[1:] == ev_r[:-1]
    ta, tb, pr = ev_t[:-1][same], ev_t[1:][same], ev_r[:-1][same]
    long = tb - ta > 1e-13
    ta, tb, pr = ta[long], tb[long], pr[long]
    gx, gw = np.polynomial.legendre.leggauss(n_gauss)
    half = 0.5 * (tb - ta)
    t = (ta[:, None] + half[:, None] * (gx + 1)).ravel()
    w = (half[:, None] * gw).ravel()
    r = np.repeat(pr, n_gauss)
    x = np.empty((t.size, n))
    v = np.empty((t.size, n))
    for s in range(0, t.size, 200000):
        z = bundle.dense(r[s:s + 200000], t[s:s + 200000])
        x[s:s + 200000] = chart.wrap(z[:, :n])
        v[s:s + 200000] = hamilton_rhs(chart, z)[:, :n]
    return r, x, v, w


def ray_quadrature(family: GeodesicFamily, grid: Grid, domain: str = "M", layout: str = "cubic",
                   n_gauss: int = N_GAUSS, rule: str = "gauss") -> RayQuadrature:
    """Quadrature points for integrating fields of a layout along all rays (cached on ``family``)."""
    breaks = "node" if layout == "cubic" else "half"
    key = ("quad", grid.identity(), domain, breaks, n_gauss, rule)
    if key in family.cache:
        return family.cache[key]
    parts = []
    for off, fc in zip(family.row_offsets, family.charts):
        r, x, v, w = _chart_quadrature(fc, grid, domain, breaks, n_gauss, rule)
        parts.append((r + off, x, v, w))
    q = RayQuadrature(*(np.concatenate([p[i] for p in parts]) for i in range(4)),
                      n_rays=family.n_rays)
    family.cache[key] = q
    return q


def _family_alpha(family: GeodesicFamily) -> np.ndarray:
    return np.concatenate([fc.alpha.ravel() for fc in family.charts])


def _family_mu(family: GeodesicFamily) -> np.ndarray:
    return np.concatenate([fc.mu.ravel() for fc in family.charts])


# ----------------------------------------------------------------------
@dataclass
class RayData:
    """Transform values on every ray of a family.

    Attributes
    ----------
    family : GeodesicFamily
    values : ndarray, shape (n_rays,)
        Values in family row order (chart-major, then ``iz * n_theta + itheta``).
    order : int
    """

    family: GeodesicFamily
    values: np.ndarray
    order: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.family.n_rays,):
            raise ValueError(f"ray data needs {self.family.n_rays} values, got {self.values.shape}")

    @property
    def mu(self) -> np.ndarray:
        return _family_mu(self.family)

    @property
    def per_chart(self) -> list:
        """Values as ``(n_z, n_theta)`` arrays, one per family chart."""
        off = self.family.row_offsets
        return [self.values[off[m]:off[m + 1]].reshape(fc.n_z, fc.n_theta)
                for m, fc in enumerate(self.family.charts)]

    def inner(self, other: "RayData") -> float:
        """``<u, w>_mu = sum mu u w``."""
        return float(np.sum(self.mu * self.values * other.values))

    def norm(self) -> float:
        return float(np.sqrt(self.inner(self)))

    def rows(self) -> tuple[list, list]:
        """CSV header and rows: ``chart, iz, itheta, alpha, mu, value``."""
        header = ["chart", "iz", "itheta", "alpha", "mu", "value"]
        out = []
        for m, (fc, vals) in enumerate(zip(self.family.charts, self.per_chart)):
            for iz in range(fc.n_z):
                for it in range(fc.n_theta):
                    out.append([m, iz, it, float(fc.alpha[iz, it]), float(fc.mu[iz, it]),
                                float(vals[iz, it])])
        return header, out


def _check_family(family):
    if not isinstance(family, GeodesicFamily) or any(fc.bundle is None for fc in family.charts):
        raise ValueError("family is not traced")


def xray(field: Union[SymmetricTensorField, AnalyticField], family: GeodesicFamily,
         order: Optional[int] = None, n_gauss: int = N_GAUSS, rule: str = "gauss") -> RayData:
    """Weighted X-ray transform ``alpha * int <f(gamma), gamma_dot^m> dt`` on every ray.

    Parameters
    ----------
    field : SymmetricTensorField or AnalyticField
        Covariant field of order 0, 1 or 2, zero off its domain.
    family : GeodesicFamily
    order : int, optional
        Expected order; a mismatch raises ``ValueError``.
    """
    _check_family(family)
    if order is not None and order != field.order:
        raise ValueError(f"order mismatch: field has order {field.order}, expected {order}")
    if field.order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    if isinstance(field, AnalyticField):
        grid = Grid.over(family.chart, 33)
        q = ray_quadrature(family, grid, field.domain, "spline", n_gauss, rule)
        vals = field(q.x)
    else:
        q = ray_quadrature(family, field.grid, field.domain, field.interp, n_gauss, rule)
        vals = eval_field(field, q.x)
    mono = monomials(field.order, q.v)
    contrib = q.w * np.sum(vals * mono, axis=1)
    out = np.bincount(q.rows, contrib, minlength=family.n_rays)
    return RayData(family, out * _family_alpha(family), field.order)


# ----------------------------------------------------------------------
@dataclass
class TransformMatrix:
    """Sparse discretization ``A`` of the weighted transform on a coefficient space.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix, shape (n_rays, space.size)
    space : DofSpace
        Column space; its lumped weights define the grid inner product.
    family : GeodesicFamily
    mu : ndarray
        Row weights ``dmu``.
    """

    matrix: sp.csr_matrix
    space: DofSpace
    family: GeodesicFamily
    mu: np.ndarray

    @property
    def order(self) -> int:
        return self.space.order

    @property
    def shape(self) -> tuple:
        return self.matrix.shape

    @property
    def col_weights(self) -> np.ndarray:
        return self.space.weights

    def _vec(self, f) -> np.ndarray:
        if isinstance(f, SymmetricTensorField):
            return self.space.to_vector(f)
        f = np.asarray(f, dtype=float)
        if f.shape != (self.space.size,):
            raise ValueError(f"shape mismatch: expected {self.space.size} coefficients, got {f.shape}")
        return f

    def _rays(self, u) -> np.ndarray:
        if isinstance(u, RayData):
            if u.family is not self.family and u.values.shape != (self.shape[0],):
                raise ValueError("shape mismatch: ray data from another family")
            u = u.values
        u = np.asarray(u, dtype=float)
        if u.shape != (self.shape[0],):
            raise ValueError(f"shape mismatch: expected {self.shape[0]} ray values, got {u.shape}")
        return u

    def apply(self, f) -> RayData:
        return RayData(self.family, self.matrix @ self._vec(f), self.order)

    def adjoint(self, u) -> np.ndarray:
        """Coefficients of ``A* u = W^{-1} A^T (mu u)``."""
        return (self.matrix.T @ (self.mu * self._rays(u))) / self.space.weights

    def normal(self, f) -> np.ndarray:
        return self.adjoint(self.matrix @ self._vec(f))

    def normal_matrix(self) -> sp.csr_matrix:
        """``A^T W_mu A`` (the normal operator times the column weights)."""
        return (self.matrix.T @ sp.diags(self.mu) @ self.matrix).tocsr()

    def metadata(self) -> dict:
        return {"family": self.family.identity(), "space": self.space.identity(),
                "rows": int(self.shape[0]), "cols": int(self.shape[1]), "nnz": int(self.matrix.nnz)}


def assemble(family: GeodesicFamily, grid: Grid, order: int, layout: str = "cubic",
             domain: str = "M", space: Optional[DofSpace] = None, n_gauss: int = N_GAUSS,
             rule: str = "gauss", max_nnz: float = MAX_NNZ) -> TransformMatrix:
    """Assemble the transform matrix row by row from the ray quadrature.

    Each quadrature point adds ``stencil weight * quadrature weight * alpha *
    gamma_dot`` monomial to its ray's row.
    """
    _check_family(family)
    if space is None:
        space = DofSpace(grid, order, family.chart, layout, domain)
    q = ray_quadrature(family, space.grid, space.domain, space.layout, n_gauss, rule)
    alpha = _family_alpha(family)
    nc = len(space.comps)
    S = 4 ** grid.n if space.layout == "cubic" else 3 ** grid.n
    est = q.rows.size * nc * S
    if est > max_nnz:
        raise MemoryError(f"transform assembly needs ~{est:.2e} entries (limit {max_nnz:.0e}); "
                          "use a coarser grid or fewer rays")
    A = sp.csr_matrix((family.n_rays, space.size))
    chunk = max(1, int(4e6 // (nc * S)))
    for s in range(0, q.rows.size, chunk):
        sl = slice(s, s + chunk)
        rows = q.rows[sl]
        coef = alpha[rows] * q.w[sl]
        mono = monomials(order, q.v[sl])
        R, C, V = [], [], []
        for c in range(nc):
            gidx, w = space.stencil(q.x[sl], c)
            val = w * (coef * mono[:, c])[:, None]
            keep = (gidx >= 0) & (val != 0)
            R.append(np.broadcast_to(rows[:, None], gidx.shape)[keep])
            C.append(gidx[keep])
            V.append(val[keep])
        A = A + sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
                              shape=A.shape)
    A.sum_duplicates()
    return TransformMatrix(A.tocsr(), space, family, _family_mu(family))


def adjoint_apply(A: TransformMatrix, u) -> SymmetricTensorField:
    """Exact adjoint of ``A`` between ``<., .>_mu`` on rays and the weighted grid inner product."""
    return A.space.to_field(A.adjoint(u))


def normal_apply(A: TransformMatrix, f, A_out: Optional[TransformMatrix] = None) -> SymmetricTensorField:
    """Normal operator ``A*^T W_mu A f``.

    ``A_out`` optionally supplies a different column space (same family) for
    the adjoint, e.g. fields on ``M1`` when ``f`` lives on ``M``.
    """
    Bo = A if A_out is None else A_out
    if Bo.family is not A.family:
        raise ValueError("shape mismatch: both matrices must use the same family")
    return Bo.space.to_field(Bo.adjoint(A.matrix @ A._vec(f)))


# ----------------------------------------------------------------------
def _interp_table(fc: FamilyChart, table: np.ndarray):
    """Multilinear interpolant of a per-node table over (surface params, psi)."""
    axes, data = [], table.reshape(fc.s_shape + fc.psi_shape)
    for k, (nodes, per) in enumerate(zip(fc.s_nodes, fc.s_periodic)):
        nodes = np.asarray(nodes)
        if per:
            lo, hi = fc.s_ranges[k]
            nodes = np.append(nodes, nodes[0] + (hi - lo))
            data = np.concatenate([data, np.take(data, [0], axis=k)], axis=k)
        axes.append(nodes)
    for p in fc.psi_nodes:
        axes.append(np.asarray(p))
    axes = [a if len(a) > 1 else np.array([a[0] - 1e-9, a[0] + 1e-9]) for a in axes]
    for k, a in enumerate(axes):
        if data.shape[k] == 1:
            data = np.repeat(data, 2, axis=k)
    return RegularGridInterpolator(axes, data, bounds_error=False, fill_value=0.0)


def _alpha_tilde(fc: FamilyChart, x: np.ndarray, theta: np.ndarray, t_back: float = 6.0,
                 h_ode: float = 1e-2) -> np.ndarray:
    """``alpha`` of the family ray passing through ``x`` with velocity ``theta`` (0 if none)."""
    chart = fc.chart
    n = chart.dim
    surf = fc.surface
    P = len(x)
    if chart.flat:
        t = surf.backtrace_flat(x, theta)
        ok = np.isfinite(t)
        z = x - np.where(ok, t, 0.0)[:, None] * theta
        th_z = theta
    else:
        xi = unit_covector(chart, x, -theta)
        b = trace_batch(chart, x, xi, np.zeros(P), np.full(P, t_back), h_ode)
        cr = _crossings(b, surf.level)
        t = np.array([c[0] if len(c) else np.nan for c in cr])
        ok = np.isfinite(t)
        zz = b.dense(np.arange(P), np.where(ok, t, 0.0))
        z = zz[:, :n]
        th_z = -hamilton_rhs(chart, zz)[:, :n]
    out = np.zeros(P)
    if not np.any(ok):
        return out
    z, th_z, t = z[ok], th_z[ok], t[ok]
    p = surf.param_of(z)
    J = surf.jacobian(p)
    nu, tau, _ = _g_frame(chart, z, J, surf.hint(p))
    g = chart.g(z)
    gth = np.einsum("pij,pj->pi", g, th_z)
    c_nu = np.einsum("pi,pi->p", gth, nu)
    c_tau = np.einsum("pi,pki->pk", gth, tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.arctan(c_tau / c_nu[:, None])
    pts = np.concatenate([p, psi], axis=1)
    a = _interp_table(fc, fc.alpha)(pts)
    lp = _interp_table(fc, fc.l_plus)(pts)
    lm = _interp_table(fc, fc.l_minus)(pts)
    span = (t <= lp + 1e-9) & (t >= lm - 1e-9) & (c_nu > 0)
    out[ok] = np.where(span, a, 0.0)
    return out


def alpha_sharp_sq(family: GeodesicFamily, x, theta) -> np.ndarray:
    """``|alpha^#(x, theta)|^2``: squared weights of the family rays through ``x`` along ``+-theta``.

    ``alpha`` is extended as constant along each ray and read off the node
    table by multilinear interpolation in the family parameters.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    x, theta = np.broadcast_arrays(x, theta)
    g = family.chart.g(family.chart.wrap(x))
    theta = theta / np.sqrt(np.einsum("pi,pij,pj->p", theta, g, theta))[:, None]
    out = np.zeros(len(x))
    for fc in family.charts:
        out += _alpha_tilde(fc, x, theta) ** 2 + _alpha_tilde(fc, x, -theta) ** 2
    return out


def _sphere_dirs(n: int, count: int):
    """Quadrature directions and weights on the unit sphere ``S^{n-1}``."""
    if n == 2:
        a = 2 * np.pi * (np.arange(count) + 0.5) / count
        return np.stack([np.cos(a), np.sin(a)], axis=-1), np.full(count, 2 * np.pi / count)
    k = np.arange(count) + 0.5
    zc = 1 - 2 * k / count
    ph = np.pi * (1 + 5 ** 0.5) * k
    r = np.sqrt(1 - zc * zc)
    return np.stack([r * np.cos(ph), r * np.sin(ph), zc], axis=-1), np.full(count, 4 * np.pi / count)


def kernel_normal(chart: MetricChart, f: SymmetricTensorField, family: GeodesicFamily,
                  targets: str = "M1", n_center: int = 256) -> SymmetricTensorField:
    """Normal operator from its integral kernel on a Euclidean chart.

    ``N f(x) = int |alpha^#(x, theta)|^2 f(y)(theta^m) theta^m / |x - y|^{n-1} dy``
    with ``theta = (y - x)/|y - x|``, evaluated as a node sum over the grid of
    ``f``.  The cell containing ``x`` is replaced by the closed-form radial
    integral over the cell against ``f(x)``.

    Parameters
    ----------
    targets : str
        Output nodes: ``"M"`` or ``"M1"`` (others are set to zero).
    """
    if not chart.flat:
        raise ValueError("kernel oracle requires flat metric")
    if f.interp != "cubic":
        raise ValueError("kernel oracle needs nodal (cubic layout) samples")
    grid = f.grid
    n = grid.n
    m = f.order
    h = grid.spacing
    if not np.allclose(h, h[0]):
        raise ValueError("kernel oracle needs a uniform grid")
    h = float(h[0])
    pts = grid.points().reshape(-1, n)
    vals = f.components.reshape(len(f.components), -1).T
    src = np.nonzero(np.any(vals != 0, axis=1) & (chart.level_M(pts) <= 0))[0]
    tgt_level = _domain_level(chart, targets)
    tgt = np.nonzero(tgt_level(pts) <= 0)[0]
    out = np.zeros_like(vals)
    fy = vals[src]
    ys = pts[src]
    dirs, dw = _sphere_dirs(n, n_center)
    R = 0.5 * h / np.max(np.abs(dirs), axis=1)
    mono_c = monomials(m, dirs) / np.array([multiplicity(i) for i in components(m, n)])
    for i in tgt:
        x = pts[i]
        d = ys - x
        rho = np.linalg.norm(d, axis=1)
        far = rho > 0.5 * h
        th = d[far] / rho[far, None]
        a2 = alpha_sharp_sq(family, np.broadcast_to(x, th.shape), th)
        proj = np.sum(fy[far] * monomials(m, th), axis=1)
        w = h ** n * a2 * proj / rho[far] ** (n - 1)
        out[i] = w @ (monomials(m, th) / np.array([multiplicity(c) for c in components(m, n)]))
        # centre cell: int_cell |a#|^2 theta^m theta^m / rho^{n-1} dy = int_S |a#|^2 theta.. R(theta) dtheta
        if np.any(vals[i] != 0):
            a2c = alpha_sharp_sq(family, np.broadcast_to(x, dirs.shape), dirs)
            proj_c = np.sum(vals[i] * monomials(m, dirs), axis=1)
            out[i] += (dw * a2c * proj_c * R) @ mono_c
    arr = out.T.reshape((len(components(m, n)),) + grid.shape)
    return SymmetricTensorField(m, grid, arr, "cubic", chart, "M1")


# ----------------------------------------------------------------------
# boundary-adapted norms
# ----------------------------------------------------------------------
def _orthonormal_frame(chart: MetricChart, x: np.ndarray) -> np.ndarray:
    """g-orthonormal frame ``(Q, n, n)`` (rows are vectors) from the coordinate basis."""
    g = chart.g(x)
    lam, U = np.linalg.eigh(g)
    return np.einsum("qij,qj->qji", U, 1.0 / np.sqrt(lam))


def collar_geometry(frame: BoundaryNormalFrame, x: np.ndarray):
    """Depth and frames at points ``x``.

    Returns ``(in_collar, depth, F)`` where ``F[q]`` has rows forming a
    g-orthonormal frame: tangential directions first and the interior normal
    last inside the collar ``{|x^n| <= w_collar}``, the eigenframe of ``g``
    elsewhere.  The normal is taken at the foot point (exact for flat charts).
    """
    if frame is None:
        raise CollarError("collar undefined: no boundary frame supplied")
    chart = frame.chart
    n = chart.dim
    w = frame.w_collar
    x = np.atleast_2d(x)
    F = _orthonormal_frame(chart, chart.wrap(x))
    depth = np.full(len(x), np.nan)
    cand = np.nonzero(np.abs(chart.level_M(chart.wrap(x))) <= 3 * w)[0]
    if cand.size:
        foot, d = frame.coordinates(x[cand])
        ok = np.abs(d) <= w
        idx = cand[ok]
        depth[idx] = d[ok]
        if idx.size:
            fo = foot[ok]
            nu = frame.normal(fo)
            T = frame.tangents(fo)
            g = chart.g(fo)
            rows = []
            for a in range(n - 1):
                t = T[:, a]
                t = t - np.einsum("qi,qij,qj->q", t, g, nu)[:, None] * nu
                for r in rows:
                    t = t - np.einsum("qi,qij,qj->q", t, g, r)[:, None] * r
                t = t / np.sqrt(np.einsum("qi,qij,qj->q", t, g, t))[:, None]
                rows.append(t)
            F[idx] = np.stack(rows + [nu], axis=1)
    return ~np.isnan(depth), depth, F


def _htilde_terms(frame, x):
    """Quadratic terms of the boundary-adapted norm at points ``x``.

    Returns ``(groups, F)``: ``groups[0]`` lists ``(weight, dirs)`` terms of
    ``|f|_{H~1(M1)}^2`` and ``groups[1 + j]`` those of ``|d_j f|_{H~1(V)}^2``;
    ``dirs`` index rows of ``F`` applied as directional derivatives.
    """
    inV, depth, F = collar_geometry(frame, x)
    n = F.shape[1]
    one = np.ones(len(x))
    V = inV.astype(float)
    dn2 = np.where(inV, depth, 0.0) ** 2
    g0 = [(one, ())]
    for k in range(n):
        w_in = dn2 if k == n - 1 else one
        g0.append((np.where(inV, w_in, 1.0), (k,)))
    groups = [g0]
    for j in range(n):
        gj = [(V, (j,))]
        for k in range(n):
            gj.append((V * (dn2 if k == n - 1 else one), (k, j)))
        groups.append(gj)
    return groups, F


def _dense_scale(c, a):
    return c[:, None] * a


def _sparse_scale(c, a):
    return sp.diags(c) @ a


def _directional(vals: dict, F: np.ndarray, dirs: tuple, scale=_dense_scale):
    """Directional derivative from coordinate derivatives ``vals[multi-index]``.

    ``scale(c, a)`` multiplies the per-point coefficients ``c`` into ``a``
    (dense arrays or sparse evaluation matrices).
    """
    n = F.shape[1]
    if not dirs:
        return vals[(0,) * n]
    out = 0
    if len(dirs) == 1:
        for k in range(n):
            e = [0] * n
            e[k] = 1
            out = out + scale(F[:, dirs[0], k], vals[tuple(e)])
        return out
    for k in range(n):
        for l in range(n):
            e = [0] * n
            e[k] += 1
            e[l] += 1
            out = out + scale(F[:, dirs[0], k] * F[:, dirs[1], l], vals[tuple(e)])
    return out


def _multi_indices(n: int):
    out = [(0,) * n]
    for k in range(n):
        e = [0] * n
        e[k] = 1
        out.append(tuple(e))
    for k in range(n):
        for l in range(k, n):
            e = [0] * n
            e[k] += 1
            e[l] += 1
            out.append(tuple(e))
    return out


def htilde2_norm(field: SymmetricTensorField, frame: BoundaryNormalFrame, n_gauss: int = 3) -> float:
    """Boundary-adapted second-order norm of a field on ``M1``.

    ``|f|_{H~2} = sum_j |d_j f|_{H~1(V)} + |f|_{H~1(M1)}`` with
    ``|u|^2_{H~1} = int |d_{x'} u|^2 + |x^n d_n u|^2 + |u|^2`` on the collar
    ``V`` and the plain ``H^1`` integrand elsewhere.  Derivatives are taken
    along the boundary-normal frame; derivatives of the frame itself are
    dropped (they only add lower-order terms).

    Raises
    ------
    CollarError
        If ``frame`` is missing or boundary normal coordinates fail in the collar.
    """
    from .fields import _metric_factor, cell_quadrature

    if field.chart is None:
        raise ValueError("field needs its chart")
    chart = field.chart
    X, W = cell_quadrature(field.grid, n_gauss)
    keep = chart.level_M1(chart.wrap(X)) <= 0
    X, W = X[keep], W[keep]
    sq, C, _ = _metric_factor(chart, X, field.order)
    wq = W * sq
    groups, F = _htilde_terms(frame, X)
    fM1 = SymmetricTensorField(field.order, field.grid, field.components, field.interp, chart, "M1")
    vals = {mi: eval_field(fM1, X, mi) for mi in _multi_indices(chart.dim)}
    total = 0.0
    for grp in groups:
        s = 0.0
        for w, dirs in grp:
            d = _directional(vals, F, dirs)
            s += np.sum(wq * w * np.einsum("qa,qab,qb->q", d, C, d))
        total += np.sqrt(max(s, 0.0))
    return float(total)


def h2_norm(field: SymmetricTensorField, n_gauss: int = 3) -> float:
    """Plain ``H^2(M1)`` norm ``(int |f|^2 + |grad f|^2 + |hess f|^2)^{1/2}`` (coordinate derivatives)."""
    from .fields import _metric_factor, cell_quadrature

    chart = field.chart
    X, W = cell_quadrature(field.grid, n_gauss)
    keep = chart.level_M1(chart.wrap(X)) <= 0
    X, W = X[keep], W[keep]
    sq, C, _ = _metric_factor(chart, X, field.order)
    fM1 = SymmetricTensorField(field.order, field.grid, field.components, field.interp, chart, "M1")
    s = 0.0
    for mi in _multi_indices(chart.dim):
        d = eval_field(fM1, X, mi)
        mult = 1.0 if sum(mi) < 2 or max(mi) == 2 else 2.0
        s += mult * np.sum(W * sq * np.einsum("qa,qab,qb->q", d, C, d))
    return float(np.sqrt(s))


def htilde2_gram(space: DofSpace, frame: BoundaryNormalFrame, n_gauss: int = 3) -> sp.csr_matrix:
    """Quadratic form ``G`` with ``c^T G c = sum`` of all squared terms of :func:`htilde2_norm`.

    Equivalent to the squared norm within a factor ``n + 1``.
    """
    from .fields import _metric_factor, cell_quadrature

    chart = space.chart
    X, W = cell_quadrature(space.grid, n_gauss)
    keep = chart.level_M1(chart.wrap(X)) <= 0
    X, W = X[keep], W[keep]
    sq, C, _ = _metric_factor(chart, X, space.order)
    wq = W * sq
    groups, F = _htilde_terms(frame, X)
    nc = len(space.comps)
    E = {mi: [space.eval_matrix(X, c, mi) for c in range(nc)] for mi in _multi_indices(chart.dim)}
    G = sp.csr_matrix((space.size, space.size))
    for grp in groups:
        for w, dirs in grp:
            Dc = [_directional({mi: E[mi][c] for mi in E}, F, dirs, _sparse_scale) for c in range(nc)]
            for a in range(nc):
                for b in range(nc):
                    cw = wq * w * C[:, a, b]
                    if np.any(cw != 0):
                        G = G + Dc[a].T @ sp.diags(cw) @ Dc[b]
    return G.tocsr()
