"""Hamiltonian geodesic flow, Jacobi fields and the simple-geodesic predicate.

Geodesics are bicharacteristics of ``E(x, xi) = 1/2 g^{ij}(x) xi_i xi_j``::

    dx^i/dt  =  g^{ij} xi_j
    dxi_k/dt = -1/2 d_k g^{ij} xi_i xi_j

integrated with classical fixed-step RK4.  Each ray gets its own step
``h = L / ceil(L / h_ode)`` so that both ends of ``[t0, t1]`` are samples.
Everything is vectorized over rays; :func:`trace` is the one-ray wrapper.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .manifold import MetricChart, christoffel

__all__ = [
    "PhasePoint",
    "GeodesicPath",
    "PathBundle",
    "JacobiSolution",
    "IntegratorFailure",
    "unit_covector",
    "hamilton_rhs",
    "energy",
    "trace",
    "trace_batch",
    "flow_to",
    "exp_map",
    "jacobi",
    "conjugate_points",
    "conjugate_points_batch",
    "is_simple",
]

TOL_E = 1e-8
TOL_CROSS = 1e-10
FD_STEP = 1e-6
_EYE_FD = {m: FD_STEP * np.eye(m) for m in (4, 6)}


class IntegratorFailure(RuntimeError):
    """Energy drift exceeded ten times the tolerance."""


@dataclass(frozen=True)
class PhasePoint:
    """A point ``x`` with momentum covector ``xi``."""

    x: np.ndarray
    xi: np.ndarray

    def energy(self, chart: MetricChart) -> float:
        return float(energy(chart, np.concatenate([self.x, self.xi])))


def unit_covector(chart: MetricChart, x, v) -> np.ndarray:
    """Lower the vector ``v`` at ``x`` and normalize so that ``E = 1/2``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    g = chart.g(x)
    xi = np.einsum("...ij,...j->...i", g, v)
    nrm = np.sqrt(np.einsum("...i,...i->...", xi, v))
    return xi / nrm[..., None]


def hamilton_rhs(chart: MetricChart, z: np.ndarray) -> np.ndarray:
    n = chart.dim
    x = z[..., :n]
    xi = z[..., n:]
    if chart.inv_diag is not None:
        # diagonal inverse metric: built-in charts accept unwrapped coordinates
        d, dd = chart.inv_diag(x)
        xdot = d * xi
        xidot = -0.5 * (dd @ (xi * xi)[..., None])[..., 0]
        return np.concatenate([xdot, xidot], axis=-1)
    gi, dgi = chart.ginv_dginv(x)
    xdot = (gi @ xi[..., :, None])[..., 0]
    q = (dgi @ xi[..., None, :, None])[..., 0]
    xidot = -0.5 * np.sum(q * xi[..., None, :], axis=-1)
    return np.concatenate([xdot, xidot], axis=-1)


def energy(chart: MetricChart, z: np.ndarray) -> np.ndarray:
    n = chart.dim
    xi = z[..., n:]
    return 0.5 * np.einsum("...i,...ij,...j->...", xi, chart.ginv(z[..., :n]), xi)


def _rk4(chart, z, h):
    """One RK4 step; ``h`` broadcasts against the leading axes of ``z``."""
    h = np.asarray(h)[..., None]
    k1 = hamilton_rhs(chart, z)
    k2 = hamilton_rhs(chart, z + 0.5 * h * k1)
    k3 = hamilton_rhs(chart, z + 0.5 * h * k2)
    k4 = hamilton_rhs(chart, z + h * k3)
    return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _steps(length: np.ndarray, h_ode: float):
    length = np.asarray(length, dtype=float)
    K = np.maximum(np.ceil(length / h_ode - 1e-9).astype(int), 1)
    return K, length / K


def flow_to(chart: MetricChart, x, xi, T, h_ode: float = 1e-3) -> np.ndarray:
    """Endpoint ``x(T)`` of the flow from ``(x, xi)``, vectorized over leading axes."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    T = np.broadcast_to(np.asarray(T, dtype=float), x.shape[:-1])
    shape = x.shape[:-1]
    z = np.concatenate([x, xi], axis=-1).reshape(-1, 2 * chart.dim)
    K, h = _steps(T.ravel(), h_ode)
    h = np.where(T.ravel() > 0, h, 0.0)
    for k in range(int(K.max()) if K.size else 0):
        act = k < K
        if not act.any():
            break
        z[act] = _rk4(chart, z[act], h[act])
    return z[:, : chart.dim].reshape(shape + (chart.dim,))


# ----------------------------------------------------------------------
@dataclass
class PathBundle:
    """Samples of many rays traced together (padded arrays).

    Attributes
    ----------
    t0, h : ndarray, shape (R,)
        Start parameter and step per ray.
    K : ndarray of int, shape (R,)
        Number of completed steps; samples ``0..K`` are valid.
    z, dz : ndarray, shape (R, Kmax + 1, 2n)
        Phase-space samples and flow field values.
    escaped : ndarray of bool
        Ray left the chart box and was truncated.
    """

    chart: MetricChart
    t0: np.ndarray
    h: np.ndarray
    K: np.ndarray
    z: np.ndarray
    dz: np.ndarray
    escaped: np.ndarray
    energy_drift: np.ndarray
    cross_M: list = field(default_factory=list)
    cross_M1: list = field(default_factory=list)

    @property
    def n_rays(self) -> int:
        return len(self.t0)

    @property
    def t1(self) -> np.ndarray:
        return self.t0 + self.K * self.h

    def valid(self) -> np.ndarray:
        return np.arange(self.z.shape[1])[None, :] <= self.K[:, None]

    def times(self, r: int) -> np.ndarray:
        return self.t0[r] + self.h[r] * np.arange(self.K[r] + 1)

    def dense(self, rays: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Cubic Hermite interpolation of ``z`` at parameters ``t`` on rays ``rays``."""
        rays = np.asarray(rays, dtype=int)
        t = np.asarray(t, dtype=float)
        h = self.h[rays]
        u = (t - self.t0[rays]) / h
        i = np.clip(np.floor(u).astype(int), 0, np.maximum(self.K[rays] - 1, 0))
        s = (u - i)[..., None]
        z0 = self.z[rays, i]
        z1 = self.z[rays, np.minimum(i + 1, self.K[rays])]
        d0 = self.dz[rays, i] * h[..., None]
        d1 = self.dz[rays, np.minimum(i + 1, self.K[rays])] * h[..., None]
        s2 = s * s
        s3 = s2 * s
        return ((2 * s3 - 3 * s2 + 1) * z0 + (s3 - 2 * s2 + s) * d0
                + (-2 * s3 + 3 * s2) * z1 + (s3 - s2) * d1)

    def path(self, r: int) -> "GeodesicPath":
        n = self.chart.dim
        K = int(self.K[r])
        z = self.z[r, : K + 1]
        return GeodesicPath(
            chart=self.chart, t=self.times(r), x=z[:, :n].copy(), xi=z[:, n:].copy(),
            dz=self.dz[r, : K + 1].copy(), h=float(self.h[r]),
            cross_M=self.cross_M[r], cross_M1=self.cross_M1[r],
            escaped=bool(self.escaped[r]), energy_drift=float(self.energy_drift[r]),
        )


def trace_batch(chart: MetricChart, x0, xi0, t0, t1, h_ode: float = 1e-3,
                tol_E: float = TOL_E, check_energy: bool = True) -> PathBundle:
    """Trace many geodesics over ``[t0_r, t1_r]``.

    Parameters
    ----------
    chart : MetricChart
    x0, xi0 : array_like, shape (R, n)
        Start points and unit covectors at parameter ``t0``.
    t0, t1 : array_like, shape (R,)
    h_ode : float
        Maximal step.

    Raises
    ------
    IntegratorFailure
        If the energy drift of any ray exceeds ``10 * tol_E``.
    """
    n = chart.dim
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
    R = x0.shape[0]
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (R,)).copy()
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (R,)).copy()
    if np.any(t1 < t0):
        raise ValueError("trace_batch requires t1 >= t0")
    K, h = _steps(t1 - t0, h_ode)
    h = np.where(t1 > t0, h, 0.0)
    Kmax = int(K.max()) if R else 0
    z = np.zeros((R, Kmax + 1, 2 * n))
    z[:, 0, :n] = x0
    z[:, 0, n:] = xi0
    K_done = np.zeros(R, dtype=int)
    escaped = np.zeros(R, dtype=bool)
    cur = z[:, 0].copy()
    for k in range(Kmax):
        act = (k < K) & ~escaped
        if not act.any():
            break
        nxt = _rk4(chart, cur[act], h[act])
        inside = chart.in_bbox(nxt[:, :n], tol=1e-9)
        idx = np.nonzero(act)[0]
        good = idx[inside]
        z[good, k + 1] = nxt[inside]
        cur[good] = nxt[inside]
        K_done[good] = k + 1
        escaped[idx[~inside]] = True
    dz = np.zeros_like(z)
    val = np.arange(Kmax + 1)[None, :] <= K_done[:, None]
    dz[val] = hamilton_rhs(chart, z[val])
    E = np.zeros(z.shape[:2])
    E[val] = energy(chart, z[val])
    drift = np.where(val, np.abs(E - 0.5), 0.0).max(axis=1) if Kmax >= 0 else np.zeros(R)
    if check_energy and np.any(drift > 10 * tol_E):
        r = int(np.argmax(drift))
        raise IntegratorFailure(f"integrator failure: energy drift {drift[r]:.2e} on ray {r} "
                                f"starting at x={x0[r].tolist()} (h={h[r]:.3g})")
    bundle = PathBundle(chart, t0, h, K_done, z, dz, escaped, drift)
    bundle.cross_M = _crossings(bundle, chart.level_M)
    bundle.cross_M1 = _crossings(bundle, chart.level_M1)
    return bundle


def _crossings(bundle: PathBundle, level) -> list:
    """Parameter values where ``level`` changes sign, located by bisection on RK4 substeps."""
    chart = bundle.chart
    n = chart.dim
    R, S = bundle.z.shape[:2]
    out = [np.zeros(0) for _ in range(R)]
    if S < 2:
        return out
    val = bundle.valid()
    L = np.full((R, S), np.nan)
    L[val] = level(chart.wrap(bundle.z[val][:, :n]))
    ins = L <= 0
    pair = val[:, 1:] & val[:, :-1]
    ev_r, ev_i = np.nonzero(pair & (ins[:, 1:] != ins[:, :-1]))
    if ev_r.size == 0:
        return out
    z0 = bundle.z[ev_r, ev_i]
    hh = bundle.h[ev_r]
    lo = np.zeros(ev_r.size)
    hi = hh.copy()
    left_in = ins[ev_r, ev_i]
    while np.max(hi - lo) > TOL_CROSS * 1e-2:
        mid = 0.5 * (lo + hi)
        zm = _rk4(chart, z0, mid)
        m_in = level(chart.wrap(zm[:, :n])) <= 0
        same = m_in == left_in
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    tc = bundle.t0[ev_r] + ev_i * hh + 0.5 * (lo + hi)
    for r in np.unique(ev_r):
        out[r] = np.sort(tc[ev_r == r])
    return out


# ----------------------------------------------------------------------
@dataclass
class GeodesicPath:
    """Arc-length samples of one geodesic with boundary metadata.

    Attributes
    ----------
    t : ndarray, shape (K + 1,)
        Uniform parameter samples (step ``h``).
    x, xi : ndarray, shape (K + 1, n)
    cross_M, cross_M1 : ndarray
        Parameters of crossings of ``dM`` and ``dM1``.
    escaped : bool
        The trace left the chart box and was truncated.
    """

    chart: MetricChart
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    dz: np.ndarray
    h: float
    cross_M: np.ndarray
    cross_M1: np.ndarray
    escaped: bool = False
    energy_drift: float = 0.0

    @property
    def samples(self):
        return [(float(t), PhasePoint(x, xi)) for t, x, xi in zip(self.t, self.x, self.xi)]

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x, self.xi], axis=1)

    @property
    def t_enter(self) -> Optional[float]:
        ins = self.chart.in_M(self.x[0])
        if ins:
            return float(self.t[0])
        return float(self.cross_M[0]) if self.cross_M.size else None

    @property
    def t_exit(self) -> Optional[float]:
        ins = self.chart.in_M(self.x[-1])
        if ins:
            return float(self.t[-1])
        return float(self.cross_M[-1]) if self.cross_M.size else None

    @property
    def endpoint_flags(self) -> tuple[bool, bool]:
        c = self.chart
        ends = self.x[[0, -1]]
        ok = (c.level_M(c.wrap(ends)) > 0) & (c.level_M1(c.wrap(ends)) < 0)
        return bool(ok[0]), bool(ok[1])

    @property
    def length_in_M(self) -> float:
        b = np.concatenate([[self.t[0]], self.cross_M, [self.t[-1]]])
        mids = 0.5 * (b[1:] + b[:-1])
        xm = self.dense(mids)[:, : self.chart.dim]
        inside = self.chart.in_M(xm)
        return float(np.sum(np.diff(b)[inside]))

    def dense(self, t) -> np.ndarray:
        """Hermite-interpolated phase point(s) at parameter(s) ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        K = len(self.t) - 1
        if K == 0:
            return np.repeat(self.z[:1], len(t), axis=0)
        u = (t - self.t[0]) / self.h
        i = np.clip(np.floor(u).astype(int), 0, K - 1)
        s = (u - i)[:, None]
        z = self.z
        d = self.dz * self.h
        s2, s3 = s * s, s * s * s
        return ((2 * s3 - 3 * s2 + 1) * z[i] + (s3 - 2 * s2 + s) * d[i]
                + (-2 * s3 + 3 * s2) * z[i + 1] + (s3 - s2) * d[i + 1])

    def velocity(self) -> np.ndarray:
        return self.dz[:, : self.chart.dim]


def trace(chart: MetricChart, start: PhasePoint, t_span: Sequence[float],
          h_ode: float = 1e-3, tol_E: float = TOL_E) -> GeodesicPath:
    """Trace one geodesic from ``start`` over ``t_span``.

    Examples
    --------
    >>> from geoxray.manifold import euclidean_disc
    >>> p = trace(euclidean_disc(), PhasePoint(np.array([-1.0, 0]), np.array([1.0, 0])), (0, 2))
    >>> round(p.length_in_M, 12)
    2.0
    """
    x = np.asarray(start.x, dtype=float)
    xi = np.asarray(start.xi, dtype=float)
    e = float(energy(chart, np.concatenate([x, xi])))
    if abs(e - 0.5) > 1e3 * tol_E:
        raise ValueError(f"start point must satisfy E = 1/2, got {e:.6g}")
    b = trace_batch(chart, x[None], xi[None], t_span[0], t_span[1], h_ode, tol_E)
    return b.path(0)


def exp_map(chart: MetricChart, x, eta, h_ode: float = 1e-3) -> np.ndarray:
    """Riemannian exponential ``exp_x(eta)``."""
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    g = chart.g(x)
    nrm = float(np.sqrt(eta @ g @ eta))
    if nrm == 0.0:
        return x.copy()
    xi = g @ eta / nrm
    return flow_to(chart, x, xi, nrm, h_ode)


# ----------------------------------------------------------------------
def _flow_and_jacobian(chart: MetricChart, z: np.ndarray):
    """Flow field and its Jacobian (shape (..., 2n, 2n)) in one stacked evaluation.

    Centered differences with step 1e-6; exact for flat charts, where the
    flow field is linear.
    """
    m = z.shape[-1]
    n = m // 2
    if chart.flat:
        F = hamilton_rhs(chart, z)
        D = np.zeros(z.shape[:-1] + (m, m))
        D[..., np.arange(n), n + np.arange(n)] = 1.0
        return F, D
    E = _EYE_FD[m]
    zz = np.concatenate([z[..., None, :], z[..., None, :] + E, z[..., None, :] - E], axis=-2)
    FF = hamilton_rhs(chart, zz)
    D = np.swapaxes(FF[..., 1: m + 1, :] - FF[..., m + 1:, :], -1, -2) / (2 * FD_STEP)
    return FF[..., 0, :], D


def _rk4_aug(chart, z, Z, h):
    """RK4 step of the flow together with its variational equation ``Z' = DF(z) Z``."""
    hh = np.asarray(h)[..., None]
    hz = hh[..., None]

    def f(z, Z):
        F, D = _flow_and_jacobian(chart, z)
        return F, D @ Z

    k1, K1 = f(z, Z)
    k2, K2 = f(z + 0.5 * hh * k1, Z + 0.5 * hz * K1)
    k3, K3 = f(z + 0.5 * hh * k2, Z + 0.5 * hz * K2)
    k4, K4 = f(z + hh * k3, Z + hz * K3)
    return (z + hh / 6 * (k1 + 2 * k2 + 2 * k3 + k4),
            Z + hz / 6 * (K1 + 2 * K2 + 2 * K3 + K4))


def _initial_variation(chart, z0, J0, DJ0):
    """Phase-space variation ``(dx, dxi)`` reproducing ``J(0) = J0``, ``DJ(0) = DJ0``."""
    n = chart.dim
    x = z0[..., :n]
    xdot = hamilton_rhs(chart, z0)[..., :n]
    g = chart.g(x)
    dg = chart.dg(x)
    gam = christoffel(chart, x)
    # dx' = DJ - Gamma(xdot, J);  dxi = g dx' + (d_J g) xdot
    dxdot = DJ0 - np.einsum("...kij,...i,...jp->...kp", gam, xdot, J0)
    dxi = np.einsum("...ij,...jp->...ip", g, dxdot) + np.einsum("...kij,...kp,...j->...ip", dg, J0, xdot)
    return np.concatenate([J0, dxi], axis=-2)


def _covariant_derivative(chart, z, Z):
    n = chart.dim
    x = z[..., :n]
    xi = z[..., n:]
    J = Z[..., :n, :]
    dxi = Z[..., n:, :]
    gi = chart.ginv(x)
    dgi = chart.dginv(x)
    xdot = np.einsum("...ij,...j->...i", gi, xi)
    dxdot = np.einsum("...ij,...jp->...ip", gi, dxi) + np.einsum("...kij,...kp,...j->...ip", dgi, J, xi)
    gam = christoffel(chart, x)
    return dxdot + np.einsum("...kij,...i,...jp->...kp", gam, xdot, J)


@dataclass
class JacobiSolution:
    """Jacobi fields along a path (columns of ``J``)."""

    base: GeodesicPath
    t: np.ndarray
    J: np.ndarray
    DJ: np.ndarray
    conjugate_times: list


def jacobi(path: GeodesicPath, J0, DJ0) -> JacobiSolution:
    """Integrate Jacobi fields with given initial data along ``path``.

    The variational equations are obtained by differentiating the Hamiltonian
    flow field (finite differences, step 1e-6), not via the curvature tensor.

    Parameters
    ----------
    path : GeodesicPath
    J0, DJ0 : array_like, shape (n,) or (n, p)
        Initial values and covariant derivatives (columns are fields).
    """
    chart = path.chart
    n = chart.dim
    J0 = np.asarray(J0, dtype=float)
    DJ0 = np.asarray(DJ0, dtype=float)
    vec = J0.ndim == 1
    if vec:
        J0, DJ0 = J0[:, None], DJ0[:, None]
    z = path.z[0].copy()
    Z = _initial_variation(chart, z, J0, DJ0)
    K = len(path.t) - 1
    Js = np.empty((K + 1, n, J0.shape[1]))
    DJs = np.empty_like(Js)
    Js[0], DJs[0] = J0, DJ0
    for k in range(K):
        z, Z = _rk4_aug(chart, z, Z, path.h)
        Js[k + 1] = Z[:n]
        DJs[k + 1] = _covariant_derivative(chart, z, Z)
    conj = []
    if J0.shape[1] == n - 1 and np.all(J0 == 0):
        conj = conjugate_points(path)
    if vec:
        Js, DJs = Js[..., 0], DJs[..., 0]
    return JacobiSolution(path, path.t, Js, DJs, conj)


def _normal_frame(chart, z0):
    """g-orthonormal basis of the complement of the velocity, shape (..., n, n-1)."""
    n = chart.dim
    x = z0[..., :n]
    g = chart.g(x)
    v = hamilton_rhs(chart, z0)[..., :n]
    basis = [v]
    out = []
    for a in range(n):
        e = np.zeros(z0.shape[:-1] + (n,))
        e[..., a] = 1.0
        for b in basis + out:
            nb = np.einsum("...i,...ij,...j->...", b, g, b)
            e = e - (np.einsum("...i,...ij,...j->...", e, g, b) / nb)[..., None] * b
        ne = np.sqrt(np.einsum("...i,...ij,...j->...", e, g, e))
        if np.all(ne > 1e-6):
            out.append(e / ne[..., None])
        if len(out) == n - 1:
            break
    return np.stack(out, axis=-1)


def _monitor(chart, z, Z):
    n = chart.dim
    v = hamilton_rhs(chart, z)[..., :n]
    mat = np.concatenate([v[..., :, None], Z[..., :n, :]], axis=-1)
    return chart.sqrt_det(z[..., :n]) * np.linalg.det(mat)


def _step_propagators(chart, z0, z1, dz0, dz1, h):
    """RK4 propagators of the variational equation over steps ``z0 -> z1``.

    The base flow at the half step comes from cubic Hermite interpolation,
    so all Jacobians are evaluated in one vectorized pass.
    """
    m = z0.shape[-1]
    hh = h[..., None]
    zmid = 0.5 * (z0 + z1) + 0.125 * hh * (dz0 - dz1)
    _, A = _flow_and_jacobian(chart, np.stack([z0, zmid, z1]))
    A1, A2, A3 = A
    I = np.eye(m)
    hz = hh[..., None]
    K1 = A1
    K2 = A2 @ (I + 0.5 * hz * K1)
    K3 = A2 @ (I + 0.5 * hz * K2)
    K4 = A3 @ (I + hz * K3)
    return I + hz / 6 * (K1 + 2 * K2 + 2 * K3 + K4)


def conjugate_points_batch(bundle: PathBundle, rays=None, dip_tol: float = 1e-6):
    """Conjugate times (to the ray start) for many rays at once.

    Returns
    -------
    times : list of ndarray
        Parameter offsets from each ray's start.
    dips : list of ndarray
        Offsets of near-zero dips of the monitor without sign change.
    """
    chart = bundle.chart
    n = chart.dim
    m = 2 * n
    rays = np.arange(bundle.n_rays) if rays is None else np.asarray(rays, dtype=int)
    R = len(rays)
    zr = bundle.z[rays]
    dzr = bundle.dz[rays]
    K = bundle.K[rays]
    h = bundle.h[rays]
    Kmax = int(K.max()) if K.size else 0
    Z = _initial_variation(chart, zr[:, 0], np.zeros((R, n, n - 1)), _normal_frame(chart, zr[:, 0]))
    D = np.zeros((R, Kmax + 1))
    events = []  # (ray position, step index, Z at step start)
    chunk = max(16, int(4e6 // max(R * m * m, 1)))
    for c0 in range(0, Kmax, chunk):
        c1 = min(c0 + chunk, Kmax)
        P = _step_propagators(chart, zr[:, c0:c1], zr[:, c0 + 1:c1 + 1], dzr[:, c0:c1],
                              dzr[:, c0 + 1:c1 + 1], np.broadcast_to(h[:, None], (R, c1 - c0)))
        P[np.arange(c0, c1)[None, :] >= K[:, None]] = np.eye(m)
        Zc = np.empty((c1 - c0 + 1, R, m, n - 1))
        Zc[0] = Z
        for k in range(c1 - c0):
            Zc[k + 1] = P[:, k] @ Zc[k]
        Z = Zc[-1]
        zz = np.swapaxes(zr[:, c0:c1 + 1], 0, 1)
        v = np.swapaxes(dzr[:, c0:c1 + 1, :n], 0, 1)
        mat = np.concatenate([v[..., :, None], Zc[:, :, :n, :]], axis=-1)
        Dc = chart.sqrt_det(zz[..., :n]) * np.linalg.det(mat)
        D[:, c0:c1 + 1] = Dc.T
        s = np.sign(Dc)
        kk, jj = np.nonzero(s[1:] * s[:-1] < 0)
        for k, j in zip(kk, jj):
            if c0 + k >= 1 and c0 + k < K[j]:
                events.append((j, c0 + k, Zc[k, j].copy()))
    times = [[] for _ in range(R)]
    for j, i, Z0 in events:
        z0 = zr[j, i]
        lo, hi = 0.0, h[j]
        d0 = D[j, i]
        while hi - lo > TOL_CROSS:
            mid = 0.5 * (lo + hi)
            zm, Zm = _rk4_aug(chart, z0[None], Z0[None], np.array([mid]))
            if np.sign(_monitor(chart, zm, Zm)[0]) == np.sign(d0):
                lo = mid
            else:
                hi = mid
        times[j].append(i * h[j] + 0.5 * (lo + hi))
    times = [np.sort(np.array(t, dtype=float)) for t in times]
    dips = [np.zeros(0) for _ in rays]
    for j in range(R):
        d = D[j, 1: K[j] + 1]
        if d.size < 3:
            continue
        s = np.sign(d)
        a = np.abs(d)
        runmax = np.maximum.accumulate(a)
        loc = np.nonzero((a[1:-1] <= a[:-2]) & (a[1:-1] <= a[2:]) & (a[1:-1] < dip_tol * runmax[1:-1]))[0] + 1
        loc = [i for i in loc if not (s[i - 1] * s[i + 1] < 0 or s[i] == 0)]
        dips[j] = (np.array(loc, dtype=float) + 1) * h[j]
    return times, dips


def conjugate_points(path: GeodesicPath) -> list:
    """Parameters ``t*`` conjugate to the path start.

    Monitors ``D(t) = sqrt(det g) det[xdot, J_1, ..., J_{n-1}]`` with
    ``J(0) = 0`` and ``DJ(0)`` a g-orthonormal frame of the velocity
    complement, and bisects every sign change to ``1e-10``.  Near-zero dips
    without sign change are reported as warnings.  By the Morse index theorem
    a segment is free of conjugate pairs iff no point is conjugate to its start.
    """
    b = PathBundle(path.chart, np.array([path.t[0]]), np.array([path.h]),
                   np.array([len(path.t) - 1]), path.z[None], path.dz[None],
                   np.array([path.escaped]), np.array([path.energy_drift]))
    times, dips = conjugate_points_batch(b)
    if dips[0].size:
        warnings.warn(f"near-zero Jacobi determinant without sign change at t="
                      f"{(path.t[0] + dips[0]).tolist()}", RuntimeWarning, stacklevel=2)
    return [float(path.t[0] + t) for t in times[0]]


def is_simple(path: GeodesicPath, chart: Optional[MetricChart] = None) -> tuple[bool, str]:
    """Simple-geodesic predicate: endpoints in ``M1^int minus M`` and no conjugate points."""
    chart = chart or path.chart
    if path.escaped:
        return False, "escaped chart"
    c = chart
    ends = c.wrap(path.x[[0, -1]])
    if np.any(c.level_M(ends) <= 0):
        return False, "endpoint in M"
    if np.any(c.level_M1(ends) >= 0):
        return False, "endpoint outside M1"
    if conjugate_points(path):
        return False, "conjugate points"
    return True, "simple"
