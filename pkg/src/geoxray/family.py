"""Hypersurface-parametrized families of simple geodesics with smooth cutoffs.

A family chart ``H_m`` is a hypersurface ``z(s)`` inside ``M1^int`` together
with a window of directions ``theta`` transversal to it.  The ray through
``(z, theta)`` is traced over ``l^-(z, theta) <= t <= l^+(z, theta)``; its
weight is ``alpha(z, theta)``, and the family carries the measure
``dmu = |<nu(z), theta>_g| dS_z dtheta``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .geodesics import PathBundle, conjugate_points_batch, hamilton_rhs, trace_batch
from .manifold import MetricChart

__all__ = [
    "smoothstep",
    "cutoff_profile",
    "Surface",
    "Circle",
    "CoordinateSurface",
    "Cylinder",
    "FamilyChart",
    "GeodesicFamily",
    "build_chart",
    "mu_weight",
    "completeness_check",
    "CoverageReport",
    "cosphere_grid",
    "fan_family",
    "wall_family",
    "torus_family",
]


def smoothstep(t):
    """Quintic smoothstep ``S(t) = t^3 (10 - 15 t + 6 t^2)`` clipped to ``[0, 1]`` (C^2)."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


def cutoff_profile(p, lo: float, hi: float, inner: float = 0.5):
    """One-parameter cutoff: 1 on the middle ``inner`` fraction of ``[lo, hi]``, 0 at the ends."""
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    q = np.abs((np.asarray(p, dtype=float) - mid) / half)
    return smoothstep((1.0 - q) / (1.0 - inner))


# ----------------------------------------------------------------------
# hypersurfaces
# ----------------------------------------------------------------------
class Surface:
    """Parametrized hypersurface ``z(p)``, ``p`` in a box of ``n - 1`` parameters."""

    dim: int
    ranges: list
    periodic: tuple
    names: tuple

    def point(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hint(self, p: np.ndarray) -> np.ndarray:
        """Euclidean vector on the side the rays are launched into."""
        raise NotImplementedError

    def jacobian(self, p: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        """``dz/dp`` by centered differences, shape ``(..., n, n-1)``."""
        p = np.asarray(p, dtype=float)
        cols = []
        for a in range(p.shape[-1]):
            dp = np.zeros(p.shape[-1])
            dp[a] = eps
            cols.append((self.point(p + dp) - self.point(p - dp)) / (2 * eps))
        return np.stack(cols, axis=-1)

    def level(self, x: np.ndarray) -> np.ndarray:
        """Signed function vanishing on the surface."""
        raise NotImplementedError

    def param_of(self, z: np.ndarray) -> np.ndarray:
        """Parameters of surface points ``z`` (inverse of :meth:`point`)."""
        raise NotImplementedError

    def backtrace_flat(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Parameter ``t >= 0`` with ``x - t theta`` on the surface, entering along ``theta``.

        Straight lines only (flat charts); ``nan`` where no such point exists.
        """
        raise NotImplementedError

    def spec(self) -> dict:
        return {"type": type(self).__name__}


def _circle_backtrace(xp, tp, c, R):
    d = xp - c
    a = np.sum(tp * tp, axis=-1)
    b = np.sum(tp * d, axis=-1)
    q = np.sum(d * d, axis=-1) - R * R
    disc = b * b - a * q
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (b + np.sqrt(disc)) / a
    return np.where((disc >= 0) & (a > 0) & (t >= 0), t, np.nan)


@dataclass
class Circle(Surface):
    """Euclidean circle in a 2D chart; rays point toward the center."""

    radius: float
    center: Sequence[float] = (0.0, 0.0)
    s_range: tuple = (0.0, 2 * np.pi)

    def __post_init__(self):
        self.dim = 2
        self.ranges = [tuple(self.s_range)]
        full = np.isclose(self.s_range[1] - self.s_range[0], 2 * np.pi)
        self.periodic = (bool(full),)
        self.names = ("s",)

    def point(self, p):
        s = np.asarray(p, dtype=float)[..., 0]
        c = np.asarray(self.center, dtype=float)
        return c + self.radius * np.stack([np.cos(s), np.sin(s)], axis=-1)

    def hint(self, p):
        return np.asarray(self.center, dtype=float) - self.point(p)

    def level(self, x):
        return np.linalg.norm(np.asarray(x)[..., :2] - np.asarray(self.center), axis=-1) - self.radius

    def param_of(self, z):
        d = np.asarray(z)[..., :2] - np.asarray(self.center)
        s = np.arctan2(d[..., 1], d[..., 0])
        lo = self.s_range[0]
        return (lo + np.mod(s - lo, 2 * np.pi))[..., None]

    def backtrace_flat(self, x, theta):
        return _circle_backtrace(x, theta, np.asarray(self.center, dtype=float), self.radius)

    def spec(self):
        return {"type": "circle", "radius": self.radius, "center": list(self.center),
                "s_range": list(self.s_range)}


@dataclass
class CoordinateSurface(Surface):
    """Coordinate hyperplane ``x^axis = value``; rays point along ``sign * e_axis``.

    The parameters are the remaining coordinates, with ranges ``ranges`` and
    periodic flags ``periodic`` (default: none periodic).
    """

    axis: int
    value: float
    ranges: list
    sign: float = 1.0
    dim: int = 2
    periodic: tuple = ()

    def __post_init__(self):
        self.ranges = [tuple(r) for r in self.ranges]
        if len(self.ranges) != self.dim - 1:
            raise ValueError("CoordinateSurface needs one range per remaining axis")
        self.periodic = tuple(self.periodic) or (False,) * (self.dim - 1)
        self.names = tuple(f"x{k}" for k in range(self.dim) if k != self.axis)

    def point(self, p):
        p = np.asarray(p, dtype=float)
        cols = []
        j = 0
        for k in range(self.dim):
            if k == self.axis:
                cols.append(np.full(p.shape[:-1], float(self.value)))
            else:
                cols.append(p[..., j])
                j += 1
        return np.stack(cols, axis=-1)

    def jacobian(self, p, eps=1e-6):
        p = np.asarray(p, dtype=float)
        J = np.zeros(p.shape[:-1] + (self.dim, self.dim - 1))
        others = [k for k in range(self.dim) if k != self.axis]
        for j, k in enumerate(others):
            J[..., k, j] = 1.0
        return J

    def hint(self, p):
        e = np.zeros(self.dim)
        e[self.axis] = self.sign
        return np.broadcast_to(e, np.asarray(p).shape[:-1] + (self.dim,))

    def level(self, x):
        return self.sign * (np.asarray(x)[..., self.axis] - self.value)

    def param_of(self, z):
        others = [k for k in range(self.dim) if k != self.axis]
        return np.asarray(z)[..., others]

    def backtrace_flat(self, x, theta):
        ta = theta[..., self.axis]
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (x[..., self.axis] - self.value) / ta
        return np.where((self.sign * ta > 0) & (t >= 0), t, np.nan)

    def spec(self):
        return {"type": "coordinate", "axis": self.axis, "value": self.value,
                "ranges": [list(r) for r in self.ranges], "sign": self.sign}


@dataclass
class Cylinder(Surface):
    """``{(x1, x2) on a circle} x (periodic third axis)`` in a 3D chart; rays point inward."""

    radius: float
    period: float = 2 * np.pi
    center: Sequence[float] = (0.0, 0.0)

    def __post_init__(self):
        self.dim = 3
        self.ranges = [(0.0, 2 * np.pi), (0.0, float(self.period))]
        self.periodic = (True, True)
        self.names = ("s", "theta")

    def point(self, p):
        p = np.asarray(p, dtype=float)
        c = np.asarray(self.center, dtype=float)
        return np.stack([c[0] + self.radius * np.cos(p[..., 0]),
                         c[1] + self.radius * np.sin(p[..., 0]), p[..., 1]], axis=-1)

    def hint(self, p):
        z = self.point(p)
        out = np.zeros_like(z)
        out[..., :2] = np.asarray(self.center) - z[..., :2]
        return out

    def level(self, x):
        return np.linalg.norm(np.asarray(x)[..., :2] - np.asarray(self.center), axis=-1) - self.radius

    def param_of(self, z):
        z = np.asarray(z)
        d = z[..., :2] - np.asarray(self.center)
        s = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * np.pi)
        return np.stack([s, np.mod(z[..., 2], self.period)], axis=-1)

    def backtrace_flat(self, x, theta):
        return _circle_backtrace(x[..., :2], theta[..., :2], np.asarray(self.center, dtype=float),
                                 self.radius)

    def spec(self):
        return {"type": "cylinder", "radius": self.radius, "period": self.period}


# ----------------------------------------------------------------------
def _param_nodes(lo: float, hi: float, count: int, periodic: bool):
    """Node values and cell width for one family parameter."""
    if periodic:
        d = (hi - lo) / count
        return lo + d * np.arange(count), d
    if count == 1:
        return np.array([0.5 * (lo + hi)]), hi - lo
    return np.linspace(lo, hi, count), (hi - lo) / (count - 1)


def _g_frame(chart: MetricChart, z: np.ndarray, J: np.ndarray, hint: np.ndarray):
    """g-unit normal (oriented along ``hint``) and g-orthonormal tangents at ``z``."""
    n = chart.dim
    g = chart.g(z)
    gi = chart.ginv(z)
    if n == 2:
        t = J[..., :, 0]
        cov = np.stack([-t[..., 1], t[..., 0]], axis=-1)
    else:
        cov = np.cross(J[..., :, 0], J[..., :, 1])
    nu = np.einsum("...ij,...j->...i", gi, cov)
    nu /= np.sqrt(np.einsum("...i,...ij,...j->...", nu, g, nu))[..., None]
    flip = np.einsum("...i,...i->...", nu, np.einsum("...ij,...j->...i", g, hint)) < 0
    nu = np.where(flip[..., None], -nu, nu)
    taus = []
    for a in range(n - 1):
        t = J[..., :, a].copy()
        for b in [nu] + taus:
            t = t - np.einsum("...i,...ij,...j->...", t, g, b)[..., None] * b
        t /= np.sqrt(np.einsum("...i,...ij,...j->...", t, g, t))[..., None]
        taus.append(t)
    # induced area element sqrt(det(J^T g J))
    ind = np.einsum("...ia,...ij,...jb->...ab", J, g, J)
    dS = np.sqrt(np.linalg.det(ind))
    return nu, np.stack(taus, axis=-2), dS


@dataclass
class FamilyChart:
    """One traced family chart ``H_m``.

    Arrays are indexed by ``(iz, itheta)``: ``iz`` runs over the flattened
    surface-parameter grid, ``itheta`` over the flattened direction grid.
    Ray ``(iz, itheta)`` is row ``iz * n_theta + itheta`` of :attr:`bundle`.
    """

    chart: MetricChart
    surface: Surface
    s_nodes: list
    psi_nodes: list
    s_periodic: tuple
    inner: float
    z: np.ndarray
    nu: np.ndarray
    theta: np.ndarray
    l_minus: np.ndarray
    l_plus: np.ndarray
    alpha: np.ndarray
    alpha_raw: np.ndarray
    simple: np.ndarray
    reasons: np.ndarray
    length_in_M: np.ndarray
    mu: np.ndarray
    bundle: PathBundle
    s_ranges: list = field(default_factory=list)
    psi_ranges: list = field(default_factory=list)
    label: str = ""

    @property
    def n_z(self) -> int:
        return self.z.shape[0]

    @property
    def n_theta(self) -> int:
        return self.theta.shape[1]

    @property
    def n_rays(self) -> int:
        return self.n_z * self.n_theta

    @property
    def s_shape(self) -> tuple:
        return tuple(len(s) for s in self.s_nodes)

    @property
    def psi_shape(self) -> tuple:
        return tuple(len(p) for p in self.psi_nodes)

    def ray(self, iz: int, itheta: int):
        """Traced :class:`GeodesicPath` of node ``(iz, itheta)``."""
        return self.bundle.path(iz * self.n_theta + itheta)

    def manifest(self) -> dict:
        return {
            "label": self.label,
            "surface": self.surface.spec(),
            "s_ranges": [list(map(float, r)) for r in self.s_ranges],
            "s_counts": list(self.s_shape),
            "psi_ranges_deg": [[float(np.degrees(a)), float(np.degrees(b))] for a, b in self.psi_ranges],
            "psi_counts": list(self.psi_shape),
            "l_minus": [float(self.l_minus.min()), float(self.l_minus.max())],
            "l_plus": [float(self.l_plus.min()), float(self.l_plus.max())],
            "inner_fraction": self.inner,
            "rays": self.n_rays,
            "rays_in_support": int(np.sum(self.alpha > 0)),
        }


@dataclass
class GeodesicFamily:
    """Union of family charts over one manifold."""

    charts: list
    label: str = "family"
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.charts:
            raise ValueError("a geodesic family needs at least one chart")
        first = self.charts[0].chart
        if any(c.chart is not first for c in self.charts):
            raise ValueError("all family charts must share the manifold")

    @property
    def chart(self) -> MetricChart:
        return self.charts[0].chart

    @property
    def n_rays(self) -> int:
        return sum(c.n_rays for c in self.charts)

    @property
    def row_offsets(self) -> np.ndarray:
        return np.cumsum([0] + [c.n_rays for c in self.charts])

    def identity(self) -> str:
        return f"{self.label}:{self.n_rays}"

    def __add__(self, other: "GeodesicFamily") -> "GeodesicFamily":
        return GeodesicFamily(self.charts + other.charts, f"{self.label}+{other.label}")


# ----------------------------------------------------------------------
LType = Union[float, Callable, str, None]


def _eval_l(l: LType, z, theta, s, psi, default):
    if l is None:
        return np.full(theta.shape[:-1], float(default))
    if callable(l):
        return np.broadcast_to(np.asarray(l(z, theta, s, psi), dtype=float), theta.shape[:-1]).copy()
    return np.full(theta.shape[:-1], float(l))


def _shoot(chart, x, xi, T, h_ode):
    """Phase point after flowing ``(x, xi)`` for time ``T >= 0`` (vectorized)."""
    b = trace_batch(chart, x, xi, 0.0, T, h_ode, check_energy=False)
    return b.z[np.arange(b.n_rays), b.K]


def _auto_l_plus(chart, x0, xi0, t0, h_ode, t_max):
    """Stop half-way between the last exit from ``M`` and the exit from ``M1``."""
    b = trace_batch(chart, x0, xi0, t0, t0 + t_max, h_ode, check_energy=False)
    out = np.empty(b.n_rays)
    for r in range(b.n_rays):
        cm1 = b.cross_M1[r]
        t_m1 = cm1[0] if cm1.size else b.t1[r]
        cm = b.cross_M[r]
        cm = cm[cm < t_m1]
        t_m = cm[-1] if cm.size else t0[r]
        out[r] = t_m + 0.5 * (t_m1 - t_m)
    return out


def build_chart(chart: MetricChart, surface: Surface, s_counts: Sequence[int],
                psi_ranges: Sequence[tuple], psi_counts: Sequence[int],
                l_minus: LType = 0.0, l_plus: LType = "auto", inner: float = 0.5,
                h_ode: Optional[float] = None, c_transv: float = 1e-3,
                check_conjugate: Optional[bool] = None, label: str = "",
                t_max: Optional[float] = None) -> FamilyChart:
    """Trace a family chart and build its cutoff.

    Parameters
    ----------
    chart : MetricChart
    surface : Surface
        Hypersurface ``H`` inside ``M1^int``.
    s_counts : sequence of int
        Nodes per surface parameter.
    psi_ranges, psi_counts
        Direction window: ``theta`` is the g-normalization of
        ``nu + sum_k tan(psi_k) tau_k`` with ``psi_k`` in the given ranges (radians).
    l_minus, l_plus
        Ray parameter bounds: constants, callables ``l(z, theta, s, psi)``
        broadcasting over nodes, or ``"auto"`` for ``l_plus`` (half-way between
        the last exit from ``M`` and the exit from ``M1``).
    inner : float
        Fraction of each non-periodic parameter range where ``alpha = 1``.
    h_ode : float, optional
        Tracing step; default ``1e-2``.
    check_conjugate : bool, optional
        Run conjugate-point detection (default: on for curved charts; flat
        charts have none).

    Raises
    ------
    ValueError
        ``"no simple geodesics in chart"`` if the cutoff support is empty
        after simplicity filtering.
    """
    n = chart.dim
    h_ode = 1e-2 if h_ode is None else float(h_ode)
    if len(s_counts) != n - 1 or len(psi_counts) != n - 1 or len(psi_ranges) != n - 1:
        raise ValueError(f"a family chart in dimension {n} needs {n - 1} surface and direction parameters")
    s_nodes, s_d = zip(*[_param_nodes(lo, hi, c, per) for (lo, hi), c, per in
                         zip(surface.ranges, s_counts, surface.periodic)])
    psi_nodes, psi_d = zip(*[_param_nodes(lo, hi, c, False) for (lo, hi), c in zip(psi_ranges, psi_counts)])
    S = np.stack(np.meshgrid(*s_nodes, indexing="ij"), axis=-1).reshape(-1, n - 1)
    P = np.stack(np.meshgrid(*psi_nodes, indexing="ij"), axis=-1).reshape(-1, n - 1)
    if np.any(np.abs(P) >= np.pi / 2):
        raise ValueError("direction window must stay inside (-90, 90) degrees")
    z = chart.wrap(surface.point(S))
    J = surface.jacobian(S)
    nu, tau, dS = _g_frame(chart, z, J, surface.hint(S))
    u = np.tan(P)
    v = nu[:, None, :] + np.einsum("ta,zai->zti", u, tau)
    g = chart.g(z)
    nrm = np.sqrt(np.einsum("zti,zij,ztj->zt", v, g, v))
    theta = v / nrm[..., None]
    cosang = np.abs(np.einsum("zti,zij,zj->zt", theta, g, nu))
    if np.any(cosang < c_transv):
        raise ValueError("direction window is not transversal to the surface")
    # direction measure of the gnomonic parametrization
    jac = (1.0 + np.sum(u * u, axis=-1)) ** (-n / 2.0) * np.prod(1.0 / np.cos(P) ** 2, axis=-1)
    mu = cosang * (dS * np.prod(s_d))[:, None] * (jac * np.prod(psi_d))[None, :]

    alpha = np.ones(cosang.shape)
    for k, (lo, hi) in enumerate(surface.ranges):
        if not surface.periodic[k]:
            alpha *= cutoff_profile(S[:, k], lo, hi, inner)[:, None]
    for k, (lo, hi) in enumerate(psi_ranges):
        alpha *= cutoff_profile(P[:, k], lo, hi, inner)[None, :]

    Zb = np.broadcast_to(z[:, None, :], theta.shape)
    Sb = np.broadcast_to(S[:, None, :], theta.shape[:-1] + (n - 1,))
    Pb = np.broadcast_to(P[None, :, :], theta.shape[:-1] + (n - 1,))
    lm = _eval_l(l_minus if l_minus != "auto" else None, Zb, theta, Sb, Pb, 0.0)
    xi = np.einsum("zij,ztj->zti", g, theta).reshape(-1, n)
    x0 = Zb.reshape(-1, n).copy()
    t0 = lm.ravel()
    back = t0 < 0
    if np.any(back):
        zz = _shoot(chart, x0[back], -xi[back], -t0[back], h_ode)
        x0[back] = zz[:, :n]
        xi[back] = -zz[:, n:]
    if t_max is None:
        t_max = 4.0 * float(np.linalg.norm(chart.bbox[1] - chart.bbox[0]))
    if isinstance(l_plus, str) and l_plus == "auto":
        lp = _auto_l_plus(chart, x0, xi, t0, h_ode, t_max).reshape(lm.shape)
    else:
        lp = _eval_l(l_plus, Zb, theta, Sb, Pb, 0.0)
    if np.any(lp < lm):
        raise ValueError("l_plus must not be smaller than l_minus")
    bundle = trace_batch(chart, x0, xi, t0, lp.ravel(), h_ode, check_energy=True)

    # simplicity (Definition of a simple geodesic)
    R = bundle.n_rays
    reasons = np.full(R, "simple", dtype=object)
    ends = np.stack([bundle.z[np.arange(R), 0, :n], bundle.z[np.arange(R), bundle.K, :n]], axis=1)
    ends = chart.wrap(ends)
    in_M = chart.level_M(ends) <= 0
    out_M1 = chart.level_M1(ends) >= 0
    reasons[out_M1.any(axis=1)] = "endpoint outside M1"
    reasons[in_M.any(axis=1)] = "endpoint in M"
    reasons[bundle.escaped] = "escaped chart"
    if check_conjugate is None:
        check_conjugate = not chart.flat
    if check_conjugate:
        cand = np.nonzero((reasons == "simple") & (alpha.ravel() > 0))[0]
        if cand.size:
            times, _ = conjugate_points_batch(bundle, cand)
            for r, t in zip(cand, times):
                if t.size:
                    reasons[r] = "conjugate points"
    simple = (reasons == "simple").reshape(alpha.shape)
    alpha_raw = alpha.copy()
    dropped = (alpha > 0) & ~simple
    if np.any(dropped):
        kinds, counts = np.unique(reasons.reshape(alpha.shape)[dropped], return_counts=True)
        msg = ", ".join(f"{c} x {k}" for k, c in zip(kinds, counts))
        warnings.warn(f"family chart {label!r}: cutoff set to 0 on non-simple rays ({msg})",
                      RuntimeWarning, stacklevel=2)
        alpha[dropped] = 0.0
    if not np.any(alpha > 0):
        raise ValueError("no simple geodesics in chart")

    # arc length inside M from the bisected crossings
    lengths = np.zeros(R)
    for r in range(R):
        b = np.concatenate([[bundle.t0[r]], bundle.cross_M[r], [bundle.t1[r]]])
        mids = 0.5 * (b[1:] + b[:-1])
        xm = bundle.dense(np.full(len(mids), r), mids)[:, :n]
        lengths[r] = np.sum(np.diff(b)[chart.in_M(chart.wrap(xm))])

    return FamilyChart(
        chart=chart, surface=surface, s_nodes=list(s_nodes), psi_nodes=list(psi_nodes),
        s_periodic=tuple(surface.periodic), inner=inner, z=z, nu=nu, theta=theta,
        l_minus=lm, l_plus=lp, alpha=alpha, alpha_raw=alpha_raw, simple=simple,
        reasons=reasons.reshape(alpha.shape), length_in_M=lengths.reshape(alpha.shape),
        mu=mu, bundle=bundle, s_ranges=list(surface.ranges), psi_ranges=[tuple(r) for r in psi_ranges],
        label=label,
    )


def mu_weight(chartH: FamilyChart, node) -> float:
    """``|<nu(z), theta>_g| dS dtheta`` at node ``(iz, itheta)``.

    Examples
    --------
    With ``theta = nu`` the cosine factor is 1 and the weight is ``dS dtheta``.
    """
    iz, it = node
    return float(chartH.mu[iz, it])


# ----------------------------------------------------------------------
# completeness
# ----------------------------------------------------------------------
@dataclass
class CoverageReport:
    """Result of :func:`completeness_check`."""

    covered: np.ndarray
    defect: np.ndarray
    fraction: float
    worst_defect: float
    uncovered: list

    def summary(self) -> str:
        return (f"coverage {self.fraction:.4f} ({int(self.covered.sum())}/{self.covered.size}), "
                f"worst angular defect {np.degrees(self.worst_defect):.2f} deg")


def cosphere_grid(chart: MetricChart, n_x: int, n_dir: int, rng=None, margin: float = 0.0):
    """Test points of the unit cosphere bundle over ``M``.

    Points are the nodes of an ``n_x``-per-axis grid over the box that lie in
    ``M`` (at depth ``>= margin`` in the level function), directions are
    ``n_dir`` equally spaced angles (n = 2) or a Fibonacci sphere (n = 3);
    covectors are g-normalized.  Returns ``(x, xi)`` with shapes ``(P, n)``
    and ``(P, n_dir, n)``.
    """
    n = chart.dim
    axes = [np.linspace(lo, hi, n_x + 2)[1:-1] for lo, hi in chart.bbox.T]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    X = X[chart.level_M(chart.wrap(X)) <= -margin]
    if n == 2:
        ang = (np.arange(n_dir) + 0.5) * np.pi / n_dir
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    else:
        k = np.arange(n_dir) + 0.5
        zc = 1 - k / n_dir
        ph = np.pi * (1 + 5**0.5) * k
        r = np.sqrt(1 - zc * zc)
        dirs = np.stack([r * np.cos(ph), r * np.sin(ph), zc], axis=-1)
    gi = chart.ginv(X)
    nrm = np.sqrt(np.einsum("di,pij,dj->pd", dirs, gi, dirs))
    xi = dirs[None, :, :] / nrm[..., None]
    return X, xi


def _ray_samples(fc: FamilyChart, step: float):
    """Positions and g-unit velocities along rays with ``alpha > 0``."""
    b = fc.bundle
    n = fc.chart.dim
    rows = np.nonzero(fc.alpha.ravel() > 0)[0]
    X, V = [], []
    for r in rows:
        L = b.t1[r] - b.t0[r]
        m = max(int(np.ceil(L / step)), 1)
        t = b.t0[r] + L * np.arange(m + 1) / m
        zz = b.dense(np.full(m + 1, r), t)
        X.append(zz[:, :n])
        V.append(hamilton_rhs(fc.chart, zz)[:, :n])
    if not X:
        return np.zeros((0, n)), np.zeros((0, n))
    return np.concatenate(X), np.concatenate(V)


def completeness_check(family: Optional[GeodesicFamily], chart: MetricChart, x: np.ndarray,
                       xi: np.ndarray, dist_tol: float, ang_tol: float = np.radians(5.0),
                       ) -> CoverageReport:
    """Coverage of test covectors by conormals of rays with ``alpha > 0``.

    ``(x, xi)`` is covered when some ray with ``alpha > 0`` passes within
    ``dist_tol`` (Euclidean chart distance) of ``x`` with velocity making an
    angle of at most ``ang_tol`` with the g-orthogonal complement of ``xi``.

    Parameters
    ----------
    family : GeodesicFamily or None
        ``None`` means the empty family.
    x : ndarray, shape (P, n)
    xi : ndarray, shape (P, D, n)
        Covectors per test point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 2:
        xi = xi[:, None, :]
    P, D = xi.shape[:2]
    defect = np.full((P, D), np.pi / 2)
    if family is not None:
        Xs, Vs = [], []
        for fc in family.charts:
            a, b = _ray_samples(fc, 0.5 * dist_tol)
            Xs.append(a)
            Vs.append(b)
        Xs = np.concatenate(Xs)
        Vs = np.concatenate(Vs)
        if len(Xs):
            tree = cKDTree(Xs, boxsize=None)
            hits = tree.query_ball_point(x, dist_tol)
            gi = chart.ginv(x)
            for p, h in enumerate(hits):
                if not h:
                    continue
                v = Vs[h]
                g = chart.g(x[p])
                vn = np.sqrt(np.einsum("ki,ij,kj->k", v, g, v))
                xin = np.sqrt(np.einsum("di,ij,dj->d", xi[p], gi[p], xi[p]))
                c = np.abs(xi[p] @ v.T) / (xin[:, None] * vn[None, :])
                defect[p] = np.min(np.arcsin(np.clip(c, 0.0, 1.0)), axis=1)
    covered = defect <= ang_tol
    unc = [(x[p].tolist(), xi[p, d].tolist()) for p, d in zip(*np.nonzero(~covered))]
    frac = float(covered.mean()) if covered.size else 0.0
    worst = float(np.max(np.where(covered, 0.0, defect))) if covered.size else 0.0
    return CoverageReport(covered, defect, frac, worst, unc)


# ----------------------------------------------------------------------
# ready-made families
# ----------------------------------------------------------------------
def fan_family(chart: MetricChart, radius: float = 1.1, n_s: int = 40, n_psi: int = 40,
               psi_max_deg: float = 80.0, inner: float = 0.5, h_ode: Optional[float] = None,
               l_plus: LType = None, label: str = "fan") -> GeodesicFamily:
    """Fan of chords from a circle of Euclidean radius ``radius`` in a 2D chart.

    The default ``l_plus = 2 radius cos(psi)`` ends flat chords on the circle.
    """
    if l_plus is None:
        l_plus = lambda z, th, s, psi: 2 * radius * np.cos(psi[..., 0])  # noqa: E731
    psi = np.radians(psi_max_deg)
    fc = build_chart(chart, Circle(radius), [n_s], [(-psi, psi)], [n_psi], 0.0, l_plus,
                     inner, h_ode, label=label)
    return GeodesicFamily([fc], label)


def wall_family(chart: MetricChart, x_wall: float = 1.1, y_half: float = 1.1, n_y: int = 40,
                n_psi: int = 40, psi_max_deg: float = 30.0, inner: float = 0.5,
                h_ode: Optional[float] = None, label: str = "gapped") -> GeodesicFamily:
    """Nearly horizontal rays from the walls ``x = -x_wall`` and ``x = +x_wall``.

    Directions stay within ``psi_max_deg`` of the horizontal, so covectors
    close to horizontal are never conormal to a ray.
    """
    psi = np.radians(psi_max_deg)
    charts = []
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        surf = CoordinateSurface(axis=0, value=-sgn * x_wall, ranges=[(-y_half, y_half)],
                                 sign=sgn, dim=2)
        charts.append(build_chart(chart, surf, [n_y], [(-psi, psi)], [n_psi], 0.0, "auto",
                                  inner, h_ode, label=f"{label}-{side}"))
    return GeodesicFamily(charts, label)


def torus_family(chart: MetricChart, radius: float = 1.1, n_s: int = 24, n_theta: int = 4,
                 n_psi: int = 9, n_tilt: int = 3, psi_max_deg: float = 80.0,
                 tilt_max_deg: float = 5.0, inner: float = 0.5, h_ode: Optional[float] = None,
                 label: str = "torus") -> GeodesicFamily:
    """Near-transverse family on the solid torus from the cylinder ``|(x1, x2)| = radius``.

    ``psi`` turns the direction within the ``(x1, x2)`` plane, ``tilt``
    toward the periodic axis; rays end on the cylinder again.
    """
    def l_plus(z, th, s, psi):
        planar = np.linalg.norm(th[..., :2], axis=-1)
        return 2 * radius * _planar_cos(z, th) / planar

    fc = build_chart(chart, Cylinder(radius, chart.periods[2] or 2 * np.pi), [n_s, n_theta],
                     [(-np.radians(psi_max_deg), np.radians(psi_max_deg)),
                      (-np.radians(tilt_max_deg), np.radians(tilt_max_deg))],
                     [n_psi, n_tilt], 0.0, l_plus, inner, h_ode, label=label)
    return GeodesicFamily([fc], label)


def _planar_cos(z, th):
    """Cosine between the planar part of ``th`` and the inward radial direction at ``z``."""
    r = -z[..., :2] / np.linalg.norm(z[..., :2], axis=-1, keepdims=True)
    tp = th[..., :2] / np.linalg.norm(th[..., :2], axis=-1, keepdims=True)
    return np.sum(r * tp, axis=-1)
