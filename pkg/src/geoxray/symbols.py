"""Principal symbol of the normal operator and ellipticity on solenoidal tensors.

At ``(x, xi)`` the symbol is the tensor

    M(x, xi) = pi * int_{|theta| = 1} |alpha^#(x, theta)|^2 sqrt(det g)
               (g_ij theta^i theta^j)^{(1 - n)/2 - m} theta^{(x) m} (x) theta^{(x) m}
               delta(theta . xi) d theta

over the Euclidean unit sphere of directions.  In two dimensions the delta
leaves the two points ``+-theta_perp`` with Jacobian ``1 / |xi|``; in three
the circle orthogonal to ``xi`` is sampled with a trapezoid rule.  Absolute
values depend on this normalization; only signs and ranks are invariant.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .family import CoverageReport, GeodesicFamily, completeness_check
from .fields import components, from_full, multiplicity
from .manifold import MetricChart
from .transform import alpha_sharp_sq

N_QUAD = 64
TOL_ELL = 1e-10


@dataclass
class SymbolAtPoint:
    """Symbol tensor ``M^{i..j..}`` at one cotangent point.

    Attributes
    ----------
    x, xi : ndarray
    order : int
    tensor : ndarray, shape ``(n,) * 2m``
        Covariant-slot indices ``(i_1..i_m, k_1..k_m)``; ``tensor4`` for m = 2.
    n_quad : int
        Directions used on ``{theta . xi = 0}``.
    weights : ndarray
        ``|alpha^#|^2`` at those directions.
    """

    x: np.ndarray
    xi: np.ndarray
    order: int
    tensor: np.ndarray
    n_quad: int
    weights: np.ndarray = field(repr=False, default=None)

    @property
    def tensor4(self) -> np.ndarray:
        return self.tensor

    def form(self, f: np.ndarray) -> float:
        """Quadratic form ``M^{ij kl} f_ij f_kl`` for a full covariant tensor ``f``."""
        m = self.order
        f = np.asarray(f, dtype=float)
        if m == 0:
            return float(self.tensor * f * f)
        return float(np.tensordot(np.tensordot(self.tensor, f, axes=m), f, axes=m)
                     if m else self.tensor * f * f)


def _perp_directions(xi: np.ndarray, n_quad: int):
    """Euclidean unit directions orthogonal to ``xi`` and quadrature weights (incl. 1/|xi|)."""
    n = xi.shape[-1]
    nx = np.linalg.norm(xi)
    if n == 2:
        t = np.array([-xi[1], xi[0]]) / nx
        return np.stack([t, -t]), np.full(2, 1.0 / nx)
    u = xi / nx
    ref = np.array([0.0, 0, 1]) if abs(u[2]) < 0.9 else np.array([1.0, 0, 0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    a = 2 * np.pi * np.arange(n_quad) / n_quad
    th = np.cos(a)[:, None] * e1 + np.sin(a)[:, None] * e2
    return th, np.full(n_quad, 2 * np.pi / n_quad / nx)


def _outer_power(theta: np.ndarray, m: int) -> np.ndarray:
    out = np.ones(theta.shape[:-1])
    for _ in range(m):
        out = out[..., None] * theta.reshape(theta.shape[:-1] + (1,) * (out.ndim - theta.ndim + 1)
                                              + (theta.shape[-1],))
    return out


def principal_symbol(chart: MetricChart, family: Optional[GeodesicFamily], x, xi,
                     order: int = 2, n_quad: int = N_QUAD) -> SymbolAtPoint:
    """Principal symbol of ``N_alpha`` at ``(x, xi)`` for tensors of order ``order``.

    Raises
    ------
    ValueError
        If ``xi = 0``.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if not np.any(xi):
        raise ValueError("xi must be nonzero")
    n = chart.dim
    th, w = _perp_directions(xi, n_quad)
    if family is None:
        a2 = np.zeros(len(th))
    else:
        a2 = alpha_sharp_sq(family, np.broadcast_to(x, th.shape), th)
    g = chart.g(x)
    sq = float(chart.sqrt_det(x))
    gth = np.einsum("qi,ij,qj->q", th, g, th)
    amp = np.pi * w * a2 * sq * gth ** ((1 - n) / 2 - order)
    T = np.zeros((n,) * (2 * order))
    for q in range(len(th)):
        if amp[q] == 0:
            continue
        p = _outer_power(th[q], order)
        T = T + amp[q] * np.multiply.outer(p, p)
    return SymbolAtPoint(x, xi, order, T, len(th), a2)


def _sym_basis(n: int, m: int) -> np.ndarray:
    """Full arrays of the canonical symmetric basis, shape (ncomp, n, ..., n)."""
    comps = components(m, n)
    B = np.zeros((len(comps),) + (n,) * m)
    for c, idx in enumerate(comps):
        for p in set(itertools.permutations(idx)):
            B[(c,) + p] = 1.0
    return B


def _metric_gram(gi: np.ndarray, B: np.ndarray, m: int) -> np.ndarray:
    """``<b_a, b_b> = g^{i k} g^{j l} b_ij b_kl`` (and the order-m analogue)."""
    R = B
    for k in range(m):
        R = np.moveaxis(np.tensordot(R, gi, axes=([1 + k], [0])), -1, 1 + k)
    return np.tensordot(R, B, axes=(list(range(1, m + 1)), list(range(1, m + 1))))


def solenoidal_frame(chart: MetricChart, x, xi, order: int = 2) -> np.ndarray:
    """g-orthonormal basis (full arrays) of ``{f : xi^i f_{i..} = 0}`` at ``x``."""
    n = chart.dim
    x = np.asarray(x, dtype=float)
    gi = chart.ginv(x)
    B = _sym_basis(n, order)
    if order == 0:
        return B
    xi_up = gi @ np.asarray(xi, dtype=float)
    C = np.tensordot(B, xi_up, axes=([1], [0])).reshape(len(B), -1)
    _, s, Vt = np.linalg.svd(C.T)
    rank = int(np.sum(s > 1e-12 * s[0]))
    N = Vt[rank:].T  # coefficient null space
    S = np.tensordot(N.T, B, axes=1)
    G = _metric_gram(gi, S, order)
    lam, U = np.linalg.eigh(G)
    return np.tensordot((U / np.sqrt(lam)).T, S, axes=1)


def ellipticity_check(sym: SymbolAtPoint, chart: MetricChart, tol: float = TOL_ELL):
    """Minimal eigenvalue of the symbol restricted to solenoidal tensors.

    Returns
    -------
    (is_elliptic, min_eig) : (bool, float)
        ``is_elliptic`` iff ``min_eig > tol * max_eig``.
    """
    F = solenoidal_frame(chart, sym.x, sym.xi, sym.order)
    m = sym.order
    if m == 0:
        Q = np.array([[float(sym.tensor)]]) * F[0] * F[0]
    else:
        TF = np.tensordot(F, sym.tensor, axes=(list(range(1, m + 1)), list(range(m))))
        Q = np.tensordot(TF, F, axes=(list(range(1, m + 1)), list(range(1, m + 1))))
    lam = np.linalg.eigvalsh(0.5 * (Q + Q.T))
    lmin, lmax = float(lam[0]), float(lam[-1])
    return bool(lmax > 0 and lmin > tol * lmax), lmin


@dataclass
class EllipticityScan:
    """Scan over cotangent test points.

    Attributes
    ----------
    x : ndarray, shape (P, n)
    xi : ndarray, shape (P, D, n)
    min_eig, elliptic, covered : ndarray, shape (P, D)
    coverage : CoverageReport or None
    """

    x: np.ndarray
    xi: np.ndarray
    min_eig: np.ndarray
    elliptic: np.ndarray
    covered: Optional[np.ndarray]
    coverage: Optional[CoverageReport] = None

    @property
    def fraction_elliptic(self) -> float:
        return float(self.elliptic.mean()) if self.elliptic.size else 0.0

    @property
    def global_min(self) -> float:
        return float(self.min_eig.min()) if self.min_eig.size else 0.0

    @property
    def agreement(self) -> float:
        """Fraction of test points where ellipticity and coverage flags agree."""
        if self.covered is None:
            return float("nan")
        return float(np.mean(self.elliptic == self.covered))

    def rows(self) -> tuple[list, list]:
        n = self.x.shape[1]
        header = [f"x{k + 1}" for k in range(n)] + [f"xi{k + 1}" for k in range(n)] + \
            ["min_eig", "is_elliptic", "covered"]
        out = []
        for p, d in np.ndindex(*self.elliptic.shape):
            cov = "" if self.covered is None else int(self.covered[p, d])
            out.append([*map(float, self.x[p]), *map(float, self.xi[p, d]), float(self.min_eig[p, d]),
                        int(self.elliptic[p, d]), cov])
        return header, out

    def summary(self) -> str:
        s = f"elliptic fraction {self.fraction_elliptic:.4f}, global min eigenvalue {self.global_min:.3e}"
        if self.covered is not None:
            s += f", agreement with coverage {self.agreement:.4f}"
        return s


def ellipticity_scan(chart: MetricChart, family: Optional[GeodesicFamily], x, xi, order: int = 2,
                     dist_tol: Optional[float] = None, ang_tol: float = np.radians(5.0),
                     tol: float = TOL_ELL) -> EllipticityScan:
    """Ellipticity at every test covector, cross-checked with :func:`completeness_check`.

    Parameters
    ----------
    x : ndarray, shape (P, n)
    xi : ndarray, shape (P, D, n)
    dist_tol : float, optional
        Coverage distance tolerance; ``None`` skips the cross-check.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 2:
        xi = xi[:, None, :]
    P, D = xi.shape[:2]
    lmin = np.zeros((P, D))
    ell = np.zeros((P, D), dtype=bool)
    for p in range(P):
        for d in range(D):
            s = principal_symbol(chart, family, x[p], xi[p, d], order)
            ell[p, d], lmin[p, d] = ellipticity_check(s, chart, tol)
    cov = None
    rep = None
    if dist_tol is not None:
        rep = completeness_check(family, chart, x, xi, dist_tol, ang_tol)
        cov = rep.covered
    return EllipticityScan(x, xi, lmin, ell, cov, rep)
