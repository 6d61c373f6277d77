"""Coordinate charts, metrics and built-in example manifolds.

A :class:`MetricChart` is a single coordinate patch carrying a Riemannian
metric ``g``, its first derivatives, and two level-set functions describing
the compact manifold ``M`` and a slightly larger ``M1`` that contains it in
its interior.  All callables are vectorized over leading axes: a point array
of shape ``(..., n)`` maps to metric arrays of shape ``(..., n, n)``.

Derivative arrays use the layout ``dg[..., k, i, j] = d_k g_ij``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "MetricChart",
    "DegenerateMetricError",
    "BoundaryNormalFrame",
    "CollarError",
    "metric_at",
    "christoffel",
    "boundary_frame",
    "euclidean_chart",
    "euclidean_disc",
    "sphere_cap",
    "hyperbolic_disc",
    "flat_torus_example2",
    "conjugate_strip_example1",
    "BUILTIN_MANIFOLDS",
    "builtin_chart",
]


class DegenerateMetricError(ValueError):
    """Raised when the metric fails to be symmetric positive definite."""


class CollarError(ValueError):
    """Raised when a boundary collar is wider than the normal injectivity radius."""


ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class MetricChart:
    """A coordinate chart with a metric and level-set domains.

    Parameters
    ----------
    name : str
        Registry key or free label.
    dim : int
        Dimension ``n`` (2 or 3).
    bbox : array_like, shape (2, n)
        Lower and upper corners of the coordinate box containing ``M1``.
    metric : callable
        ``metric(x) -> g`` with shape ``(..., n, n)``.
    dmetric : callable, optional
        ``dmetric(x) -> dg`` with ``dg[..., k, i, j] = d_k g_ij``.  When absent,
        centered differences with step ``h_fd`` are used.
    level_M, level_M1 : callable
        Scalar functions whose sublevel sets ``{level <= 0}`` are ``M`` and ``M1``.
    periods : sequence of float, optional
        Period per axis, ``0`` for non-periodic axes.
    inv_metric, dinv_metric : callable, optional
        Analytic ``g^{-1}`` and its derivatives, used by the geodesic flow.
        Useful where ``g`` degenerates at a coordinate singularity.
    inv_pair : callable, optional
        ``inv_pair(x) -> (ginv, dginv)`` in one call.
    inv_diag : callable, optional
        For diagonal metrics, ``inv_diag(x) -> (d, dd)`` with ``d[..., i] = g^{ii}``
        and ``dd[..., k, i] = d_k g^{ii}``.  Fast path of the geodesic flow; must
        accept unwrapped periodic coordinates.
    flat : bool
        True when the metric is the Euclidean one in these coordinates.
    description : str
        One-line human description.
    """

    name: str
    dim: int
    bbox: np.ndarray
    metric: ArrayFn
    level_M: ArrayFn
    level_M1: ArrayFn
    dmetric: Optional[ArrayFn] = None
    periods: tuple = ()
    inv_metric: Optional[ArrayFn] = None
    dinv_metric: Optional[ArrayFn] = None
    flat: bool = False
    description: str = ""
    inv_pair: Optional[Callable] = None
    inv_diag: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        bbox = np.asarray(self.bbox, dtype=float)
        if bbox.shape != (2, self.dim):
            raise ValueError(f"bbox must have shape (2, {self.dim}), got {bbox.shape}")
        object.__setattr__(self, "bbox", bbox)
        periods = tuple(float(p) for p in self.periods) or (0.0,) * self.dim
        if len(periods) != self.dim or any(p < 0 for p in periods):
            raise ValueError("periods must list one nonnegative period per axis")
        object.__setattr__(self, "periods", periods)

    # ------------------------------------------------------------------
    @property
    def periodic(self) -> np.ndarray:
        return np.array([p > 0 for p in self.periods])

    @property
    def h_fd(self) -> float:
        return 1e-4 * float(np.linalg.norm(self.bbox[1] - self.bbox[0]))

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Reduce periodic coordinates into ``[lo, lo + period)``."""
        if not any(self.periods):
            return np.asarray(x, dtype=float)
        x = np.array(x, dtype=float, copy=True)
        for k, p in enumerate(self.periods):
            if p > 0:
                lo = self.bbox[0, k]
                x[..., k] = lo + np.mod(x[..., k] - lo, p)
        return x

    def in_bbox(self, x: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ok = np.ones(x.shape[:-1], dtype=bool)
        for k in range(self.dim):
            if self.periods[k] == 0:
                ok &= (x[..., k] >= self.bbox[0, k] - tol) & (x[..., k] <= self.bbox[1, k] + tol)
        return ok

    def g(self, x: np.ndarray) -> np.ndarray:
        return self.metric(self.wrap(x))

    def dg(self, x: np.ndarray) -> np.ndarray:
        x = self.wrap(x)
        if self.dmetric is not None:
            return self.dmetric(x)
        return _fd_gradient(self.metric, x, self.h_fd)

    def ginv(self, x: np.ndarray) -> np.ndarray:
        if self.inv_metric is not None:
            return self.inv_metric(self.wrap(x))
        return np.linalg.inv(self.g(x))

    def ginv_dginv(self, x: np.ndarray):
        """``g^{-1}`` and its derivatives in one call (the geodesic flow hot path)."""
        if self.inv_pair is not None:
            return self.inv_pair(self.wrap(x))
        return self.ginv(x), self.dginv(x)

    def dginv(self, x: np.ndarray) -> np.ndarray:
        """Derivatives ``d_k g^{ij}`` with layout ``[..., k, i, j]``."""
        if self.dinv_metric is not None:
            return self.dinv_metric(self.wrap(x))
        gi = self.ginv(x)
        return -np.einsum("...ia,...kab,...bj->...kij", gi, self.dg(x), gi)

    def sqrt_det(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(np.abs(np.linalg.det(self.g(x))))

    def in_M(self, x: np.ndarray) -> np.ndarray:
        return self.level_M(self.wrap(x)) <= 0

    def in_M1(self, x: np.ndarray) -> np.ndarray:
        return self.level_M1(self.wrap(x)) <= 0


def _fd_gradient(fn: ArrayFn, x: np.ndarray, h: float) -> np.ndarray:
    """Centered-difference gradient of a matrix-valued map, layout ``[..., k, i, j]``."""
    n = x.shape[-1]
    out = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        out.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(out, axis=-3)


def metric_at(chart: MetricChart, x) -> tuple[np.ndarray, np.ndarray, float]:
    """Metric, inverse metric and volume density at one chart point.

    Parameters
    ----------
    chart : MetricChart
    x : array_like, shape (n,)

    Returns
    -------
    g, ginv : ndarray, shape (n, n)
    sqrt_det : float

    Raises
    ------
    DegenerateMetricError
        If ``g(x)`` is not symmetric positive definite.
    ValueError
        If ``x`` lies outside the chart box.
    """
    x = np.asarray(x, dtype=float)
    if not chart.in_bbox(x):
        raise ValueError(f"point {x.tolist()} lies outside the chart box")
    g = np.asarray(chart.g(x), dtype=float)
    if not np.allclose(g, g.T, rtol=0, atol=1e-13 * max(1.0, np.abs(g).max())):
        raise DegenerateMetricError(f"degenerate metric at x={x.tolist()}: not symmetric")
    try:
        L = np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        raise DegenerateMetricError(f"degenerate metric at x={x.tolist()}: not positive definite") from None
    if np.min(np.abs(np.diag(L))) < 1e-12 * max(1.0, np.sqrt(np.abs(g).max())):
        raise DegenerateMetricError(f"degenerate metric at x={x.tolist()}: singular")
    ginv = np.linalg.inv(g)
    return g, ginv, float(np.prod(np.diag(L)))


def christoffel(chart: MetricChart, x) -> np.ndarray:
    """Christoffel symbols of the second kind, ``Gamma[..., k, i, j]``.

    ``Gamma^k_ij = 1/2 g^{kl} (d_i g_lj + d_j g_li - d_l g_ij)``; the result is
    symmetrized in ``(i, j)`` so the symmetry holds exactly as stored.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(chart.in_bbox(x)):
        raise ValueError("christoffel: point outside the chart box")
    dg = chart.dg(x)
    gi = chart.ginv(x)
    # first kind: G_lij = 1/2 (d_i g_lj + d_j g_li - d_l g_ij)
    first = 0.5 * (np.swapaxes(dg, -3, -2) + np.moveaxis(dg, -3, -1) - dg)
    gam = np.einsum("...kl,...lij->...kij", gi, first)
    return 0.5 * (gam + np.swapaxes(gam, -1, -2))


# ----------------------------------------------------------------------
# built-in manifolds
# ----------------------------------------------------------------------
def _eye_metric(n):
    def metric(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()

    def dmetric(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (n, n, n))

    return metric, dmetric


def _eye_pair(n):
    metric, dmetric = _eye_metric(n)
    return lambda x: (metric(x), dmetric(x))


def _eye_diag(x):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    return np.ones(x.shape), np.zeros(x.shape + (n,))


def euclidean_chart(name: str, bbox, level_M: ArrayFn, level_M1: ArrayFn,
                    periods: Sequence[float] = (), description: str = "",
                    params: Optional[dict] = None) -> MetricChart:
    """Flat chart with user-supplied domains (handy for half-planes and boxes)."""
    bbox = np.asarray(bbox, dtype=float)
    n = bbox.shape[1]
    metric, dmetric = _eye_metric(n)
    return MetricChart(name, n, bbox, metric, level_M, level_M1, dmetric=dmetric,
                       inv_metric=metric, dinv_metric=dmetric, inv_pair=_eye_pair(n), inv_diag=_eye_diag,
                       periods=tuple(periods), flat=True, description=description,
                       params=dict(params or {}))


def euclidean_disc(radius: float = 1.0, outer: float = 1.2, box: float = 1.25) -> MetricChart:
    """Disc of radius ``radius`` in the Euclidean plane, ``M1`` a concentric larger disc."""
    return euclidean_chart(
        "euclidean_disc",
        [[-box, -box], [box, box]],
        lambda x: np.hypot(x[..., 0], x[..., 1]) - radius,
        lambda x: np.hypot(x[..., 0], x[..., 1]) - outer,
        description=f"Euclidean disc of radius {radius} inside radius {outer}",
        params={"radius": radius, "outer": outer, "box": box},
    )


_SIN_FLOOR = 1e-100


def sphere_cap(r_M: float = 1.2, r_M1: float = 1.5) -> MetricChart:
    """Round unit sphere in geodesic polar coordinates ``(r, phi)``.

    ``g = diag(1, sin(r)^2)``, curvature +1.  ``M`` is the cap ``r <= r_M``.
    The chart is singular at the pole ``r = 0``; the inverse metric used by
    the geodesic flow floors ``|sin r|`` so that meridians through the pole
    (zero angular momentum) are integrated exactly.
    """

    def metric(x):
        s = np.sin(x[..., 0])
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = s * s
        return g

    def dmetric(x):
        r = x[..., 0]
        dg = np.zeros(x.shape[:-1] + (2, 2, 2))
        dg[..., 0, 1, 1] = 2 * np.sin(r) * np.cos(r)
        return dg

    def _s(r):
        s = np.sin(r)
        return np.copysign(np.maximum(np.abs(s), _SIN_FLOOR), s)

    def inv_pair(x):
        r = x[..., 0]
        s = _s(r)
        gi = np.zeros(x.shape[:-1] + (2, 2))
        gi[..., 0, 0] = 1.0
        gi[..., 1, 1] = 1.0 / (s * s)
        d = np.zeros(x.shape[:-1] + (2, 2, 2))
        d[..., 0, 1, 1] = -2 * np.cos(r) * gi[..., 1, 1] / s
        return gi, d

    def inv_diag(x):
        r = x[..., 0]
        s = _s(r)
        d = np.ones(x.shape)
        d[..., 1] = 1.0 / (s * s)
        dd = np.zeros(x.shape + (2,))
        dd[..., 0, 1] = -2 * np.cos(r) * d[..., 1] / s
        return d, dd

    def inv_metric(x):
        s = _s(x[..., 0])
        gi = np.zeros(x.shape[:-1] + (2, 2))
        gi[..., 0, 0] = 1.0
        gi[..., 1, 1] = 1.0 / (s * s)
        return gi

    def dinv_metric(x):
        r = x[..., 0]
        s = _s(r)
        d = np.zeros(x.shape[:-1] + (2, 2, 2))
        d[..., 0, 1, 1] = -2 * np.cos(r) / (s * s * s)
        return d

    return MetricChart(
        "sphere_cap", 2, np.array([[0.0, 0.0], [np.pi, 2 * np.pi]]), metric,
        lambda x: x[..., 0] - r_M, lambda x: x[..., 0] - r_M1,
        dmetric=dmetric, periods=(0.0, 2 * np.pi), inv_metric=inv_metric,
        dinv_metric=dinv_metric, inv_pair=inv_pair, inv_diag=inv_diag,
        description=f"curvature +1 cap r <= {r_M} in geodesic polar coordinates",
        params={"r_M": r_M, "r_M1": r_M1},
    )


def hyperbolic_disc(R_M: float = 0.5, R_M1: float = 0.7, box: float = 0.9) -> MetricChart:
    """Poincare disc, ``g = 4 / (1 - |x|^2)^2 delta``, curvature -1."""

    def metric(x):
        q = 1.0 - np.sum(x * x, axis=-1)
        return (4.0 / q**2)[..., None, None] * np.eye(2)

    def dmetric(x):
        q = 1.0 - np.sum(x * x, axis=-1)
        c = 16.0 / q**3
        return (c[..., None] * x)[..., :, None, None] * np.eye(2)

    def inv_pair(x):
        q = 1.0 - np.sum(x * x, axis=-1)
        gi = (q * q / 4.0)[..., None, None] * np.eye(2)
        d = (-q[..., None] * x)[..., :, None, None] * np.eye(2)
        return gi, d

    def inv_diag(x):
        q = 1.0 - np.sum(x * x, axis=-1)
        d = np.repeat((q * q / 4.0)[..., None], 2, axis=-1)
        dd = np.repeat((-q[..., None] * x)[..., None], 2, axis=-1)
        return d, dd

    return MetricChart(
        "hyperbolic_disc", 2, np.array([[-box, -box], [box, box]]), metric,
        lambda x: np.hypot(x[..., 0], x[..., 1]) - R_M,
        lambda x: np.hypot(x[..., 0], x[..., 1]) - R_M1,
        dmetric=dmetric, inv_pair=inv_pair, inv_diag=inv_diag,
        description=f"Poincare disc, Euclidean radius {R_M} inside {R_M1}",
        params={"R_M": R_M, "R_M1": R_M1, "box": box},
    )


def flat_torus_example2(outer: float = 1.3, box: float = 1.4) -> MetricChart:
    """Solid torus ``D x S^1`` with the flat metric ``dx1^2 + dx2^2 + dtheta^2``.

    Coordinates ``(x1, x2, theta)`` with ``theta`` periodic of period ``2 pi``;
    ``M`` is ``x1^2 + x2^2 <= 1``.
    """
    metric, dmetric = _eye_metric(3)
    return MetricChart(
        "flat_torus_example2", 3,
        np.array([[-box, -box, 0.0], [box, box, 2 * np.pi]]), metric,
        lambda x: np.hypot(x[..., 0], x[..., 1]) - 1.0,
        lambda x: np.hypot(x[..., 0], x[..., 1]) - outer,
        dmetric=dmetric, periods=(0.0, 0.0, 2 * np.pi), flat=True,
        inv_metric=metric, dinv_metric=dmetric, inv_pair=_eye_pair(3), inv_diag=_eye_diag,
        description="flat solid torus (disc times circle), theta periodic",
        params={"outer": outer, "box": box},
    )


def conjugate_strip_example1(kappa: float = 4.0, half_length: float = 1.5,
                             eps: float = 0.3, eps1: float = 0.45) -> MetricChart:
    """Reduced two-dimensional stand-in for a tube around a geodesic with conjugate points.

    ``g = exp(-kappa y^2) (dx^2 + dy^2)`` has Gaussian curvature
    ``kappa exp(kappa y^2)``, equal to ``kappa`` on the axis ``y = 0``, which is
    a geodesic carrying conjugate points spaced ``pi / sqrt(kappa)``.  ``M`` is
    the stadium of half-width ``eps`` around the axis segment.
    """

    def metric(x):
        c = np.exp(-kappa * x[..., 1] ** 2)
        return c[..., None, None] * np.eye(2)

    def dmetric(x):
        y = x[..., 1]
        c = -2 * kappa * y * np.exp(-kappa * y * y)
        dg = np.zeros(x.shape[:-1] + (2, 2, 2))
        dg[..., 1, 0, 0] = c
        dg[..., 1, 1, 1] = c
        return dg

    def inv_pair(x):
        y = x[..., 1]
        c = np.exp(kappa * y * y)
        gi = c[..., None, None] * np.eye(2)
        d = np.zeros(x.shape[:-1] + (2, 2, 2))
        d[..., 1, :, :] = (2 * kappa * y * c)[..., None, None] * np.eye(2)
        return gi, d

    def inv_diag(x):
        y = x[..., 1]
        c = np.exp(kappa * y * y)
        d = np.repeat(c[..., None], 2, axis=-1)
        dd = np.zeros(x.shape + (2,))
        dd[..., 1, :] = (2 * kappa * y * c)[..., None]
        return d, dd

    def stadium(e):
        def level(x):
            px = np.clip(x[..., 0], -half_length, half_length)
            return np.hypot(x[..., 0] - px, x[..., 1]) - e
        return level

    bx = half_length + eps1 + 0.15
    by = eps1 + 0.15
    return MetricChart(
        "conjugate_strip_example1", 2, np.array([[-bx, -by], [bx, by]]), metric,
        stadium(eps), stadium(eps1), dmetric=dmetric, inv_pair=inv_pair, inv_diag=inv_diag,
        description="reduced 2D surrogate: strip with conjugate points along its axis",
        params={"kappa": kappa, "half_length": half_length, "eps": eps, "eps1": eps1},
    )


BUILTIN_MANIFOLDS = {
    "euclidean_disc": (euclidean_disc, 2, "flat unit disc"),
    "sphere_cap": (sphere_cap, 2, "round cap, curvature +1, polar chart"),
    "hyperbolic_disc": (hyperbolic_disc, 2, "Poincare disc, curvature -1"),
    "flat_torus_example2": (flat_torus_example2, 3, "flat solid torus, Example 2"),
    "conjugate_strip_example1": (conjugate_strip_example1, 2,
                                 "reduced surrogate of Example 1 (conjugate points on the axis)"),
}


def builtin_chart(key: str, **params) -> MetricChart:
    """Instantiate a registered manifold by key."""
    try:
        factory = BUILTIN_MANIFOLDS[key][0]
    except KeyError:
        raise KeyError(f"unknown manifold key {key!r}; known: {sorted(BUILTIN_MANIFOLDS)}") from None
    return factory(**params)


# ----------------------------------------------------------------------
# boundary normal coordinates
# ----------------------------------------------------------------------
def _level_grad(chart: MetricChart, x: np.ndarray) -> np.ndarray:
    h = chart.h_fd
    n = chart.dim
    out = np.empty(x.shape)
    for k in range(n):
        if chart.periods[k] > 0:
            out[..., k] = 0.0  # level sets ignore periodic axes
            continue
        e = np.zeros(n)
        e[k] = h
        out[..., k] = (chart.level_M(x + e) - chart.level_M(x - e)) / (2 * h)
    return out


@dataclass(frozen=True, eq=False)
class BoundaryNormalFrame:
    """Boundary normal (semigeodesic) coordinates in a collar of ``dM``.

    The collar is ``{|x^n| <= w_collar}`` where ``x^n`` is the signed geodesic
    distance to ``dM``, positive inside ``M``.  Feet and depths are found by
    Gauss-Newton on ``x = exp_{x'}(x^n nu(x'))`` with the normal geodesic
    integrated by RK4.
    """

    chart: MetricChart
    w_collar: float
    h_ode: float = 1e-3
    tol: float = 1e-8

    # -- boundary geometry -------------------------------------------------
    def project(self, x: np.ndarray, iters: int = 50) -> np.ndarray:
        """Closest-point style projection onto ``{level_M = 0}`` along ``grad level``."""
        y = np.array(x, dtype=float, copy=True)
        for _ in range(iters):
            L = self.chart.level_M(y)
            gr = _level_grad(self.chart, y)
            step = (L / np.maximum(np.sum(gr * gr, axis=-1), 1e-300))[..., None] * gr
            y = y - step
            if np.max(np.abs(L)) < 1e-14:
                break
        return y

    def normal(self, xb: np.ndarray) -> np.ndarray:
        """Interior unit normal ``nu`` (contravariant, unit in ``g``)."""
        xb = np.asarray(xb, dtype=float)
        gr = _level_grad(self.chart, xb)
        gi = self.chart.ginv(xb)
        v = -np.einsum("...ij,...j->...i", gi, gr)
        nrm = np.sqrt(np.einsum("...i,...i->...", v, gr) * -1.0)
        return v / nrm[..., None]

    def tangents(self, xb: np.ndarray) -> np.ndarray:
        """Euclidean-orthonormal tangent basis of ``dM``, shape ``(..., n-1, n)``."""
        gr = _level_grad(self.chart, xb)
        n = self.chart.dim
        u = gr / np.linalg.norm(gr, axis=-1, keepdims=True)
        if n == 2:
            return np.stack([-u[..., 1], u[..., 0]], axis=-1)[..., None, :]
        # n = 3: complete u to an orthonormal frame
        ref = np.where(np.abs(u[..., 2:3]) < 0.9, np.array([0.0, 0, 1]), np.array([1.0, 0, 0]))
        t1 = np.cross(u, ref)
        t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
        t2 = np.cross(u, t1)
        return np.stack([t1, t2], axis=-2)

    def normal_point(self, xb: np.ndarray, d: np.ndarray) -> np.ndarray:
        """``exp_{xb}(d nu(xb))`` for boundary points ``xb`` and signed depths ``d``."""
        from .geodesics import flow_to  # local import: geodesics depends on manifold

        nu = self.normal(xb)
        d = np.asarray(d, dtype=float)
        if self.chart.flat:
            return xb + d[..., None] * nu
        xi = np.einsum("...ij,...j->...i", self.chart.g(xb), nu)
        sgn = np.where(d < 0, -1.0, 1.0)
        return flow_to(self.chart, xb, sgn[..., None] * xi, np.abs(d), self.h_ode)

    # -- coordinates -------------------------------------------------------
    def coordinates(self, x: np.ndarray, max_iter: int = 20):
        """Return ``(foot, depth)`` for points ``x`` of shape ``(m, n)``.

        Raises
        ------
        CollarError
            If Gauss-Newton fails to reproduce a point inside the collar.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        chart = self.chart
        n = chart.dim
        foot = self.project(x)
        nu0 = self.normal(foot)
        diff = x - foot
        d = np.einsum("...i,...ij,...j->...", diff, chart.g(foot), nu0)
        T = self.tangents(foot)
        base = foot.copy()
        u = np.zeros(x.shape[:-1] + (n - 1,))
        eps = 1e-6

        def F(u, d):
            xb = self.project(base + np.einsum("...a,...ai->...i", u, T))
            return self.normal_point(xb, d), xb

        for _ in range(max_iter):
            y, xb = F(u, d)
            r = _wrap_diff(chart, y - x)
            err = np.max(np.abs(r)) if r.size else 0.0
            if err < 0.1 * self.tol:
                break
            J = np.empty(x.shape[:-1] + (n, n))
            for a in range(n - 1):
                du = np.zeros_like(u)
                du[..., a] = eps
                J[..., :, a] = _wrap_diff(chart, F(u + du, d)[0] - F(u - du, d)[0]) / (2 * eps)
            J[..., :, n - 1] = _wrap_diff(chart, F(u, d + eps)[0] - F(u, d - eps)[0]) / (2 * eps)
            step = np.linalg.solve(J, -r[..., None])[..., 0]
            u = u + step[..., : n - 1]
            d = d + step[..., n - 1]
        y, xb = F(u, d)
        r = np.max(np.abs(_wrap_diff(chart, y - x)), axis=-1) if x.size else np.zeros(0)
        bad = np.nonzero(r > self.tol)[0]
        if bad.size:
            raise CollarError(f"boundary normal coordinates failed near x={x[bad[0]].tolist()} "
                              f"(residual {r[bad[0]]:.2e})")
        return xb, d

    def foot(self, x):
        return self.coordinates(x)[0]

    def depth(self, x):
        return self.coordinates(x)[1]


def _wrap_diff(chart: MetricChart, dx: np.ndarray) -> np.ndarray:
    dx = np.array(dx, dtype=float, copy=True)
    for k, p in enumerate(chart.periods):
        if p > 0:
            dx[..., k] = (dx[..., k] + 0.5 * p) % p - 0.5 * p
    return dx


def boundary_samples(chart: MetricChart, count: int = 64) -> np.ndarray:
    """Points on ``dM`` found by bisection along rays from the box center.

    Two-dimensional charts with one periodic axis (polar charts) are sampled
    along lines of the other axis instead.
    """
    n = chart.dim
    if n == 2 and sum(p > 0 for p in chart.periods) == 1:
        return _boundary_samples_periodic(chart, count)
    c = 0.5 * (chart.bbox[0] + chart.bbox[1])
    rng = np.random.default_rng(12345)
    if n == 2:
        ang = np.linspace(0, 2 * np.pi, count, endpoint=False)
        dirs = np.stack([np.cos(ang), np.sin(ang)], -1)
    else:
        dirs = rng.normal(size=(count, n))
        for k, p in enumerate(chart.periods):
            if p > 0:
                dirs[:, k] = 0.0
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    if chart.level_M(c[None])[0] > 0:
        raise ValueError("box center lies outside M; cannot sample the boundary")
    R = float(np.linalg.norm(chart.bbox[1] - chart.bbox[0]))
    lo = np.zeros(count)
    hi = np.full(count, R)
    # shrink hi until outside M but inside the box
    for k in range(n):
        if chart.periods[k] == 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                tk = np.where(dirs[:, k] > 0, (chart.bbox[1, k] - c[k]) / dirs[:, k],
                              np.where(dirs[:, k] < 0, (chart.bbox[0, k] - c[k]) / dirs[:, k], np.inf))
            hi = np.minimum(hi, tk)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        inside = chart.level_M(c + mid[:, None] * dirs) <= 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return c + 0.5 * (lo + hi)[:, None] * dirs


def _boundary_samples_periodic(chart: MetricChart, count: int) -> np.ndarray:
    kp = 0 if chart.periods[0] > 0 else 1
    ka = 1 - kp
    lo, hi = chart.bbox[:, ka]
    ts = np.linspace(lo, hi, 401)
    phi = chart.bbox[0, kp] + chart.periods[kp] * np.arange(count) / count
    P = np.empty((count, len(ts), 2))
    P[..., kp] = phi[:, None]
    P[..., ka] = ts[None]
    inside = chart.level_M(P) <= 0
    change = np.nonzero(inside[:, 1:] != inside[:, :-1])
    if len(change[0]) == 0:
        raise ValueError("no boundary crossing found along the chart lines")
    first = np.full(count, -1)
    for r, j in zip(*change):
        if first[r] < 0:
            first[r] = j
    if np.any(first < 0):
        raise ValueError("boundary not found on every chart line")
    a, b = ts[first], ts[first + 1]
    sa = inside[np.arange(count), first]
    for _ in range(80):
        m = 0.5 * (a + b)
        Q = np.empty((count, 2))
        Q[:, kp], Q[:, ka] = phi, m
        same = (chart.level_M(Q) <= 0) == sa
        a = np.where(same, m, a)
        b = np.where(same, b, m)
    out = np.empty((count, 2))
    out[:, kp], out[:, ka] = phi, 0.5 * (a + b)
    return out


def boundary_frame(chart: MetricChart, w_collar: float, h_ode: float = 1e-3,
                   tol_bn: float = 1e-8, checks: int = 32) -> BoundaryNormalFrame:
    """Build boundary normal coordinates and verify the collar width.

    The check integrates normal geodesics from ``checks`` boundary samples over
    ``[-w_collar, w_collar]`` and requires the Jacobian of
    ``(x', x^n) -> exp_{x'}(x^n nu)`` to keep its sign, i.e. the normal
    geodesics do not cross inside the collar.

    Raises
    ------
    CollarError
        Naming the first boundary point whose normal family degenerates.
    """
    if w_collar <= 0:
        raise ValueError("w_collar must be positive")
    frame = BoundaryNormalFrame(chart, float(w_collar), h_ode, tol_bn)
    xb = boundary_samples(chart, checks)
    T = frame.tangents(xb)
    eps = 1e-5
    for d in np.linspace(-w_collar, w_collar, 9):
        cols = []
        dd = np.full(len(xb), d)
        for a in range(chart.dim - 1):
            p = frame.project(xb + eps * T[:, a])
            m = frame.project(xb - eps * T[:, a])
            cols.append(_wrap_diff(chart, frame.normal_point(p, dd) - frame.normal_point(m, dd)) / (2 * eps))
        cols.append(_wrap_diff(chart, frame.normal_point(xb, dd + eps) - frame.normal_point(xb, dd - eps)) / (2 * eps))
        det = np.linalg.det(np.stack(cols, axis=-1))
        if d == -w_collar:
            ref = np.sign(det)
        bad = np.nonzero((np.sign(det) != ref) | (np.abs(det) < 1e-6))[0]
        if bad.size:
            raise CollarError(f"collar too wide: normal geodesics cross near boundary point "
                              f"{xb[bad[0]].tolist()} at depth {d:.3g}")
    return frame
