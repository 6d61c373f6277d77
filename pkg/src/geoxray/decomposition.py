"""Symmetric differential, divergence, and the Dirichlet solenoidal/potential split.

The discrete ``d`` is a sparse matrix ``D`` between coefficient spaces and the
divergence is its weighted transpose, ``delta = -W_v^{-1} D^T W_f``, so
``<d v, f> = -<v, delta f>`` holds to rounding and ``Delta^s = delta d`` is
symmetric negative definite.  On the ``spline`` layout in a flat chart ``D`` is
the exact symmetric differential of the spline one-form.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline, RectBivariateSpline

from .family import smoothstep
from .fields import (DofSpace, Grid, OneForm, SymmetricTensorField, _domain_level,
                     _support_inside, component_degrees, components, dof_positions, sample_field,
                     to_full)
from .geodesics import hamilton_rhs, trace_batch, unit_covector
from .manifold import BoundaryNormalFrame, CollarError, MetricChart, christoffel

TOL_CG = 1e-10
TOL_BNORM = 1e-6


class SolverError(RuntimeError):
    """Conjugate gradients did not converge; ``history`` holds relative residuals."""

    def __init__(self, msg: str, history):
        super().__init__(msg)
        self.history = list(history)


# ----------------------------------------------------------------------
def _d1(kind, N: int, h: float, periodic: bool) -> sp.csr_matrix:
    """One-axis derivative between coefficient arrays of length ``N``."""
    if kind == "cubic":
        main = np.ones(N - 1) / (2 * h)
        D = sp.diags([-main, main], [-1, 1], shape=(N, N)).tolil()
        if periodic:
            D[0, N - 1] = -1 / (2 * h)
            D[N - 1, 0] = 1 / (2 * h)
        else:
            D[0, :3] = np.array([-3, 4, -1]) / (2 * h)
            D[N - 1, N - 3:] = np.array([1, -4, 3]) / (2 * h)
        return D.tocsr()
    if kind == 1:
        # hat coefficients at nodes -> box coefficients at midpoints
        D = sp.diags([-np.ones(N), np.ones(N - 1)], [0, 1], shape=(N, N)).tolil()
        D[N - 1, N - 1] = 0.0
        return D.tocsr() / h
    if kind == 2:
        # quadratic coefficients at midpoints -> hat coefficients at nodes
        D = sp.diags([np.ones(N), -np.ones(N - 1)], [0, -1], shape=(N, N)).tolil()
        D[:, N - 1] = 0.0
        return D.tocsr() / h
    raise ValueError(f"no exact derivative for kind {kind!r}")


def _lower(kind):
    return kind if kind == "cubic" else kind - 1


def _partial(grid: Grid, kinds, axis: int) -> tuple:
    """Full-grid matrix of ``d/dx_axis`` for a component with per-axis ``kinds``."""
    mats = []
    out = list(kinds)
    for k in range(grid.n):
        if k == axis:
            mats.append(_d1(kinds[k], grid.shape[k], grid.spacing[k], grid.periods[k] > 0))
            out[k] = _lower(kinds[k])
        else:
            mats.append(sp.identity(grid.shape[k], format="csr"))
    M = mats[0]
    for m in mats[1:]:
        M = sp.kron(M, m, format="csr")
    return M, tuple(out)


def _selection(active: np.ndarray) -> sp.csr_matrix:
    idx = np.nonzero(active.ravel())[0]
    return sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)),
                         shape=(idx.size, active.size))


# ----------------------------------------------------------------------
def tensor_space(grid: Grid, chart: MetricChart, layout: str = "spline",
                 domain: str = "M", order: int = 2) -> DofSpace:
    """Tensor space for the decomposition (``cubic``: nodes inside the domain)."""
    if layout == "cubic":
        level = _domain_level(chart, domain)
        act = level(chart.wrap(grid.points())) <= 0
        return DofSpace(grid, order, chart, "cubic", domain, [act] * len(components(order, grid.n)))
    return DofSpace(grid, order, chart, layout, domain)


def vector_space(grid: Grid, chart: MetricChart, layout: str = "spline",
                 domain: str = "M", order: int = 1) -> DofSpace:
    """Potential space (one-forms, or scalars with ``order=0``) with the staircase Dirichlet condition.

    A coefficient is active when its support lies inside the domain; for the
    ``cubic`` layout a node is active when the box of one cell around it does.
    """
    level = _domain_level(chart, domain)
    kinds = component_degrees(order, grid.n, layout)
    if layout == "cubic":
        pos = chart.wrap(grid.points())
        h = grid.spacing
        act = np.ones(grid.shape, dtype=bool)
        for o in np.ndindex(*(3,) * grid.n):
            act &= level(chart.wrap(pos + (np.array(o) - 1) * h)) <= 0
        active = [act] * len(kinds)
    else:
        active = [_support_inside(level, grid, kd) for kd in kinds]
    return DofSpace(grid, order, chart, layout, domain, active)


class SymDiff:
    """Sparse symmetric differential ``D: V -> F`` and its weighted transpose.

    ``V`` holds order ``m - 1`` potentials and ``F`` order-``m`` tensors:
    ``(D v)_{i1..im} = (1/m) sum_k nabla_{ik} v_{i1..(ik omitted)..im}``, the
    gradient for ``m = 1`` and ``(nabla_i v_j + nabla_j v_i)/2`` for ``m = 2``.

    Parameters
    ----------
    space_v : DofSpace
        Potential space (Dirichlet coefficients excluded).
    space_f : DofSpace
        Tensor space on the same grid and layout, order one higher.
    """

    def __init__(self, space_v: DofSpace, space_f: DofSpace):
        if space_v.grid != space_f.grid or space_v.layout != space_f.layout:
            raise ValueError("potential and tensor spaces must share grid and layout")
        if space_f.order != space_v.order + 1:
            raise ValueError("tensor order must exceed the potential order by one")
        grid, chart = space_v.grid, space_v.chart
        n = grid.n
        m = space_f.order
        if space_v.layout == "spline2":
            raise ValueError("the spline2 layout has no exact symmetric differential")
        vk = space_v.kinds
        vpos = {c: k for k, c in enumerate(space_v.comps)}
        blocks = []
        for idx, fk in zip(space_f.comps, space_f.kinds):
            row = [None] * len(space_v.comps)
            for k in range(m):
                a = idx[k]
                b = vpos[tuple(sorted(idx[:k] + idx[k + 1:]))]
                M, out = _partial(grid, vk[b], a)
                if out != tuple(fk):
                    raise AssertionError("derivative kinds do not match tensor layout")
                row[b] = M / m if row[b] is None else row[b] + M / m
            blocks.append([sp.csr_matrix((grid.size, grid.size)) if r is None else r for r in row])
        Dfull = sp.bmat(blocks, format="csr")
        Pv = sp.block_diag([_selection(a) for a in space_v.active], format="csr")
        D = Dfull @ Pv.T
        if not chart.flat and m == 2:
            rows = []
            for (i, j), fk in zip(space_f.comps, space_f.kinds):
                pos = dof_positions(grid, fk).reshape(-1, n)
                G = christoffel(chart, chart.wrap(pos))
                term = sp.csr_matrix((len(pos), space_v.size))
                for k in range(n):
                    term = term - sp.diags(G[:, k, i, j]) @ space_v.eval_matrix(pos, k)
                rows.append(term)
            D = D + sp.vstack(rows, format="csr")
        Pf = sp.block_diag([_selection(a) for a in space_f.active], format="csr")
        # keep only potential coefficients whose image stays in active tensor coefficients
        inactive_rows = np.ones(D.shape[0], dtype=bool)
        inactive_rows[np.concatenate([np.nonzero(a.ravel())[0] + c * grid.size
                                      for c, a in enumerate(space_f.active)])] = False
        leak = np.asarray(abs(D[inactive_rows]).sum(axis=0)).ravel() > 0
        if np.any(leak):
            act = [a.copy() for a in space_v.active]
            for c in range(len(act)):
                sl = slice(space_v.offsets[c], space_v.offsets[c + 1])
                act[c][act[c]] = ~leak[sl]
            self.__init__(DofSpace(grid, m - 1, chart, space_v.layout, space_v.domain, act), space_f)
            return
        self.space_v = space_v
        self.space_f = space_f
        self.D = (Pf @ D).tocsr()
        self._K = None
        self._lu = None

    @property
    def K(self) -> sp.csr_matrix:
        """``D^T W_f D``: symmetric positive definite stiffness of ``-Delta^s``."""
        if self._K is None:
            self._K = (self.D.T @ sp.diags(self.space_f.weights) @ self.D).tocsr()
        return self._K

    def d(self, v: np.ndarray) -> np.ndarray:
        return self.D @ v

    def delta(self, f: np.ndarray) -> np.ndarray:
        return -(self.D.T @ (self.space_f.weights * f)) / self.space_v.weights

    def solve_K(self, b: np.ndarray, method: str = "cg", tol: float = TOL_CG,
                max_iter: Optional[int] = None) -> np.ndarray:
        """Solve ``K x = b`` by conjugate gradients (Jacobi preconditioned) or a sparse LU."""
        if not np.any(b):
            return np.zeros_like(b)
        if method == "direct":
            if self._lu is None:
                self._lu = spla.splu(self.K.tocsc())
            return self._lu.solve(b)
        if method != "cg":
            raise ValueError(f"unknown solver {method!r}")
        hist = []
        nb = np.linalg.norm(b)
        K = self.K

        def cb(xk):
            hist.append(np.linalg.norm(b - K @ xk) / nb)

        Minv = sp.diags(1.0 / K.diagonal())
        max_iter = max_iter or 20 * K.shape[0]
        x, info = spla.cg(K, b, rtol=tol, atol=0.0, maxiter=max_iter, M=Minv, callback=cb)
        res = np.linalg.norm(b - K @ x) / nb
        if info != 0 or res > 10 * tol:
            raise SolverError(f"CG did not converge in {max_iter} iterations "
                              f"(relative residual {res:.3e})", hist)
        return x


@lru_cache(maxsize=16)
def symdiff_operator(grid: Grid, chart: MetricChart, layout: str = "spline",
                     domain: str = "M", order: int = 2) -> SymDiff:
    """Cached :class:`SymDiff` onto order-``order`` tensors (2: one-forms, 1: scalars)."""
    return SymDiff(vector_space(grid, chart, layout, domain, order - 1),
                   tensor_space(grid, chart, layout, domain, order))


def _operator_for(field, order: int = 2) -> SymDiff:
    if field.chart is None:
        raise ValueError("field needs its chart")
    return symdiff_operator(field.grid, field.chart, field.interp, field.domain, order)


def _central_sym_diff(v: OneForm) -> SymmetricTensorField:
    grid, chart = v.grid, v.chart
    n = grid.n
    d = [[_partial(grid, ("cubic",) * n, a)[0] @ v.components[b].ravel() for b in range(n)]
         for a in range(n)]
    out = []
    G = None if chart is None or chart.flat else christoffel(chart, chart.wrap(grid.points().reshape(-1, n)))
    for i, j in components(2, n):
        val = 0.5 * (d[i][j] + d[j][i])
        if G is not None:
            val = val - np.einsum("pk,kp->p", G[:, :, i, j], v.components.reshape(n, -1))
        out.append(val.reshape(grid.shape))
    return SymmetricTensorField(2, grid, np.array(out), "cubic", chart, v.domain)


def sym_diff(v: SymmetricTensorField) -> SymmetricTensorField:
    """Symmetric differential ``(dv)_ij = (nabla_i v_j + nabla_j v_i)/2``.

    ``cubic`` one-forms use centered differences of nodal values plus the
    Christoffel correction.  ``spline`` one-forms use the exact spline
    derivative and return a ``spline`` tensor; only the active (Dirichlet)
    coefficients of ``v`` enter.
    """
    if v.order != 1:
        raise ValueError("sym_diff expects a one-form")
    if v.interp == "cubic":
        return _central_sym_diff(v)
    op = _operator_for(v)
    return op.space_f.to_field(op.d(op.space_v.to_vector(v)))


def divergence(f: SymmetricTensorField) -> OneForm:
    """``delta f = -W_v^{-1} D^T W_f f``, the exact negative adjoint of :func:`sym_diff`.

    Defined on the Dirichlet one-form space of the field's grid, layout and
    domain (the cubic layout uses the centered-difference ``D``).
    """
    if f.order != 2:
        raise ValueError("divergence expects an order-2 tensor")
    op = _operator_for(f)
    return op.space_v.to_field(op.delta(op.space_f.to_vector(f)), OneForm)


def solve_dirichlet(rhs: OneForm, chart: Optional[MetricChart] = None, method: str = "cg",
                    tol: float = TOL_CG, max_iter: Optional[int] = None) -> OneForm:
    """Solve ``Delta^s v = delta d v = rhs`` with ``v = 0`` on the Dirichlet coefficients.

    Raises
    ------
    SolverError
        If conjugate gradients fail to reach ``tol``; carries the residual history.
    """
    if rhs.order != 1:
        raise ValueError("rhs must be a one-form")
    if rhs.grid.n != 2:
        raise ValueError("the Dirichlet solver is implemented for n = 2")
    if chart is not None and rhs.chart is not chart:
        rhs = type(rhs)(rhs.grid, rhs.components, rhs.interp, chart, rhs.domain)
    op = _operator_for(rhs)
    b = op.space_v.to_vector(rhs)
    x = op.solve_K(-op.space_v.weights * b, method, tol, max_iter)
    return op.space_v.to_field(x, OneForm)


@dataclass
class Decomposition:
    """``f = f_s + d v`` with ``v`` vanishing on the Dirichlet coefficients.

    Attributes
    ----------
    f_s : SymmetricTensorField
    v : OneForm
    residual : dict
        ``norm_f``, ``norm_fs``, ``norm_dv``, ``norm_delta_fs`` (relative to
        ``norm_f``) and ``orthogonality`` (``<f_s, dv> / (|f_s| |dv|)``).
    """

    f_s: SymmetricTensorField
    v: OneForm
    residual: dict

    @property
    def dv(self) -> SymmetricTensorField:
        return sym_diff(self.v)

    def summary(self) -> str:
        r = self.residual
        return (f"|f| = {r['norm_f']:.6g}, |f_s| = {r['norm_fs']:.6g}, |dv| = {r['norm_dv']:.6g}, "
                f"|delta f_s|/|f| = {r['norm_delta_fs']:.3e}, orthogonality = {r['orthogonality']:.3e}")


def decompose(f: SymmetricTensorField, chart: Optional[MetricChart] = None, domain: Optional[str] = None,
              method: str = "cg", tol: float = TOL_CG) -> Decomposition:
    """Solenoidal/potential decomposition on ``M`` or ``M1``.

    ``v = (Delta^s_D)^{-1} delta f`` and ``f_s = f - d v``.  Only the active
    coefficients of ``f`` (support inside the domain) take part; with
    ``domain="M1"`` a field on ``M`` is extended by zero first.
    """
    if f.order != 2:
        raise ValueError("decompose expects an order-2 tensor")
    chart = chart or f.chart
    domain = domain or f.domain
    if f.grid.n != 2:
        raise ValueError("the decomposition is implemented for n = 2")
    op = symdiff_operator(f.grid, chart, f.interp, domain)
    fv = op.space_f.to_vector(SymmetricTensorField(2, f.grid, f.components, f.interp, chart, domain))
    Wf = op.space_f.weights
    x = op.solve_K(op.D.T @ (Wf * fv), method, tol)
    dv = op.D @ x
    fs = fv - dv
    nf = np.sqrt(fv @ (Wf * fv))
    nfs = np.sqrt(fs @ (Wf * fs))
    ndv = np.sqrt(dv @ (Wf * dv))
    dfs = op.delta(fs)
    res = {
        "norm_f": float(nf), "norm_fs": float(nfs), "norm_dv": float(ndv),
        "norm_delta_fs": float(op.space_v.norm(dfs) / nf) if nf > 0 else 0.0,
        "orthogonality": float(abs(fs @ (Wf * dv)) / (nfs * ndv)) if nfs * ndv > 0 else 0.0,
    }
    return Decomposition(op.space_f.to_field(fs), op.space_v.to_field(x, OneForm), res)


def projectors(grid: Grid, chart: MetricChart, layout: str = "spline", domain: str = "M",
               method: str = "direct", order: int = 2):
    """Return ``(P, S)`` acting on coefficient vectors of the order-``order`` tensor space.

    ``P = d (Delta^s_D)^{-1} delta`` and ``S = I - P``; the direct solver makes
    them projections to rounding, CG to about ``tol_cg`` times a condition factor.
    """
    op = symdiff_operator(grid, chart, layout, domain, order)
    Wf = op.space_f.weights

    def P(f):
        return op.D @ op.solve_K(op.D.T @ (Wf * f), method)

    def S(f):
        return f - P(f)

    return P, S


# ----------------------------------------------------------------------
def closed_boundary(chart: MetricChart, center=None) -> Callable:
    """Parametrize ``dM`` by the polar angle about ``center`` (bisection along rays)."""
    c = 0.5 * (chart.bbox[0] + chart.bbox[1]) if center is None else np.asarray(center, float)
    R = float(np.min(chart.bbox[1] - chart.bbox[0]))

    def curve(s):
        s = np.asarray(s, dtype=float)
        d = np.stack([np.cos(s), np.sin(s)], axis=-1)
        lo, hi = np.zeros(s.shape), np.full(s.shape, 0.5 * R)
        for _ in range(70):
            mid = 0.5 * (lo + hi)
            inside = chart.level_M(c + mid[..., None] * d) <= 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return c + (0.5 * (lo + hi))[..., None] * d

    return curve


@dataclass
class NormalGauge:
    """Boundary-normal gauge data on an ``(s, x^n)`` table.

    ``vn, vs`` are the components ``v(nu)`` and ``v(E)`` with ``E = dX/ds``;
    ``defect`` is the largest ``|f_ni - (d v)_ni|`` (unit frame) over the inner
    half of the collar.
    """

    s: np.ndarray
    depth: np.ndarray
    X: np.ndarray
    nu: np.ndarray
    E: np.ndarray
    vn: np.ndarray
    vs: np.ndarray
    defect: float


def _pair(f, X, a, b):
    vals = f(X)
    full = to_full(f.order, vals, X.shape[-1])
    return np.einsum("...i,...ij,...j->...", a, full, b)


def normal_gauge(f, frame: BoundaryNormalFrame, n_s: int = 64, curve: Optional[Callable] = None,
                 s_range=(0.0, 2 * np.pi), periodic: bool = True, eps: float = 1e-5) -> NormalGauge:
    """Integrate ``nabla_n v_i + nabla_i v_n = 2 f_in`` inward from ``v = 0`` on ``dM`` (n = 2)."""
    chart = frame.chart
    if chart.dim != 2:
        raise ValueError("boundary normalization is implemented for n = 2")
    w = frame.w_collar
    curve = curve or closed_boundary(chart)
    s = (s_range[0] + (s_range[1] - s_range[0]) * np.arange(n_s) / n_s if periodic
         else np.linspace(*s_range, n_s))
    S3 = np.concatenate([s - eps, s, s + eps])
    xb = frame.project(curve(S3))
    nu0 = frame.normal(xb)
    xi0 = unit_covector(chart, xb, nu0)
    P = len(S3)
    half = frame.h_ode / 2
    steps = int(np.ceil(w / half / 2)) * 2
    b = trace_batch(chart, xb, xi0, np.zeros(P), np.full(P, steps * half), half)
    if np.any(b.escaped) or np.any(b.K < steps):
        raise CollarError("normal geodesics leave the chart inside the collar")
    z = b.z[:, : steps + 1]
    n = 2
    X = z[..., :n]
    vel = hamilton_rhs(chart, z)[..., :n]
    depth = b.h[0] * np.arange(steps + 1)
    Xm, X0, Xp = X[:n_s], X[n_s:2 * n_s], X[2 * n_s:]
    E = (Xp - Xm) / (2 * eps)
    dE = (vel[2 * n_s:] - vel[:n_s]) / (2 * eps)
    nu = vel[n_s:2 * n_s]
    g = chart.g(X0)
    dg = np.einsum("...kij,...k->...ij", chart.dg(X0), nu)
    gss = np.einsum("...i,...ij,...j->...", E, g, E)
    dgss = 2 * np.einsum("...i,...ij,...j->...", E, g, dE) + np.einsum("...i,...ij,...j->...", E, dg, E)
    gam = 0.5 * dgss / gss
    fnn3 = _pair(f, X, vel, vel)
    fns = _pair(f, X0, nu, E)

    def integrate(rhs_fn, y0):
        """RK4 over depth with step 2*half using the half-step samples."""
        ys = [y0]
        y = y0
        for k in range(0, steps, 2):
            k1 = rhs_fn(k, y)
            k2 = rhs_fn(k + 1, y + half * k1)
            k3 = rhs_fn(k + 1, y + half * k2)
            k4 = rhs_fn(k + 2, y + 2 * half * k3)
            y = y + (2 * half / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            ys.append(y)
        return np.stack(ys, axis=-1)

    vn3 = integrate(lambda k, y: fnn3[:, k], np.zeros(P))
    dvn_ds = (vn3[2 * n_s:] - vn3[:n_s]) / (2 * eps)
    # tangential component on the coarse depth grid; d_s v_n interpolated to half steps
    dep_c = depth[::2]
    dvs_spline = CubicSpline(dep_c, dvn_ds, axis=1)
    dvn_half = dvs_spline(depth)
    vs = integrate(lambda k, y: 2 * fns[:, k] - dvn_half[:, k] + 2 * gam[:, k] * y, np.zeros(n_s))
    vn = vn3[n_s:2 * n_s]
    # defect on the inner half of the collar
    inner = dep_c <= 0.5 * w + 1e-12
    Xc, nuc, Ec = X0[:, ::2], nu[:, ::2], E[:, ::2]
    ne = np.sqrt(gss[:, ::2])
    d_vn = CubicSpline(dep_c, vn, axis=1)(dep_c, 1)
    d_vs = CubicSpline(dep_c, vs, axis=1)(dep_c, 1)
    dv_nn = d_vn
    dv_ns = 0.5 * (d_vs + dvn_ds) - gam[:, ::2] * vs
    f_nn = fnn3[n_s:2 * n_s, ::2]
    f_ns = fns[:, ::2]
    defect = max(np.max(np.abs(f_nn - dv_nn)[:, inner]), np.max((np.abs(f_ns - dv_ns) / ne)[:, inner]))
    return NormalGauge(s, dep_c, Xc, nuc, Ec, vn, vs, float(defect))


def boundary_normalize(f, frame: BoundaryNormalFrame, grid: Optional[Grid] = None, n_s: int = 64,
                       curve: Optional[Callable] = None, s_range=(0.0, 2 * np.pi),
                       periodic: bool = True, tol: float = TOL_BNORM):
    """Gauge ``f`` so that its normal components vanish near ``dM``.

    Solves ``d_n v_n = f_nn`` and ``d_n v_a - 2 Gamma^b_na v_b = 2 f_na - d_a v_n``
    along inward normals from ``v = 0``, cuts ``v`` off smoothly over the outer
    half of the collar, and returns ``(v0, f - d v0)`` on the grid (``cubic``
    layout; ``v0`` is zero outside ``M``).

    Raises
    ------
    CollarError
        If the collar is invalid or ``|f~_ni|`` exceeds ``tol`` in its inner half.
    """
    chart = frame.chart
    gauge = normal_gauge(f, frame, n_s, curve, s_range, periodic)
    if gauge.defect > tol:
        raise CollarError(f"normal components not removed: max |f~_ni| = {gauge.defect:.3e} > {tol:g}")
    grid = grid or f.grid
    w = frame.w_collar
    cut = _collar_cut(gauge.depth, w)
    # covector with v(nu) = vn, v(E) = vs
    B = np.stack([gauge.nu, gauge.E], axis=-2)  # rows are nu, E
    rhs = np.stack([gauge.vn * cut, gauge.vs * cut], axis=-1)
    vcov = np.linalg.solve(B, rhs[..., None])[..., 0]
    pts = grid.points().reshape(-1, 2)
    vals = np.zeros((len(pts), 2))
    wp = chart.wrap(pts)
    near = (chart.level_M(wp) <= 0)
    cand = np.nonzero(near)[0]
    if cand.size:
        try:
            foot, dep = frame.coordinates(wp[cand])
            ok = (dep >= 0) & (dep <= w)
        except CollarError:
            foot, dep, ok = _coordinates_lenient(frame, wp[cand], w)
        c2 = cand[ok]
        ctr = 0.5 * (chart.bbox[0] + chart.bbox[1])
        sp_ = np.arctan2(foot[ok, 1] - ctr[1], foot[ok, 0] - ctr[0]) if curve is None else \
            _invert_curve(curve, foot[ok], gauge.s)
        if periodic:
            lo, hi = s_range
            sp_ = lo + np.mod(sp_ - lo, hi - lo)
            s_ext = np.append(gauge.s, hi)
            tab = np.concatenate([vcov, vcov[:1]], axis=0)
        else:
            s_ext, tab = gauge.s, vcov
        inside = (sp_ >= s_ext[0]) & (sp_ <= s_ext[-1])
        for a in range(2):
            # RectBivariateSpline solves the interpolation system directly (the cubic
            # RegularGridInterpolator uses an iterative solver and loses ~1e-7)
            itp = RectBivariateSpline(s_ext, gauge.depth, tab[..., a], kx=3, ky=3, s=0)
            vals[c2[inside], a] = itp.ev(sp_[inside], dep[ok][inside])
    v0 = OneForm(grid, vals.T.reshape((2,) + grid.shape), "cubic", chart, "M")
    fg = f if isinstance(f, SymmetricTensorField) and f.interp == "cubic" else _sample_callable(f, grid, chart)
    return v0, fg - _central_sym_diff(v0)


def _collar_cut(depth, w):
    """Quintic smoothstep from 1 (inner half of the collar) to 0 at depth ``w``."""
    return 1.0 - smoothstep((depth - 0.5 * w) / (0.5 * w))


def _coordinates_lenient(frame, x, w):
    foot = np.zeros_like(x)
    dep = np.full(len(x), np.inf)
    ok = np.zeros(len(x), dtype=bool)
    for i in range(len(x)):
        try:
            fo, de = frame.coordinates(x[i:i + 1])
            foot[i], dep[i] = fo[0], de[0]
            ok[i] = 0 <= de[0] <= w
        except CollarError:
            pass
    return foot, dep, ok


def _invert_curve(curve, pts, s_nodes):
    c = curve(s_nodes)
    j = np.argmin(np.linalg.norm(pts[:, None, :] - c[None], axis=-1), axis=1)
    s = s_nodes[j].astype(float)
    ds = 1e-6
    for _ in range(30):
        p = curve(s)
        t = (curve(s + ds) - curve(s - ds)) / (2 * ds)
        s = s - np.sum((p - pts) * t, axis=-1) / np.sum(t * t, axis=-1)
    return s


def _sample_callable(f, grid, chart):
    return sample_field(f, f.order, grid, chart, "cubic", "M")
