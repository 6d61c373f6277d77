"""s-injectivity probe, stability constants, and reconstruction of the solenoidal part.

Everything works on coefficient vectors of the exact ``spline`` layout so that
potential fields ``D v`` are annihilated by the discrete transform up to
rounding (flat charts) and the solenoidal projector is exactly orthogonal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .decomposition import projectors, symdiff_operator
from .fields import DofSpace, Grid, SymmetricTensorField, gram_matrix
from .manifold import BoundaryNormalFrame, MetricChart
from .transform import RayData, TransformMatrix, assemble, htilde2_gram

DENSE_MAX = 3500
NULL_TOL = 1e-10


class RankCollapse(RuntimeError):
    """The solenoidal basis has fewer vectors than the rank count predicts."""


# ----------------------------------------------------------------------
@dataclass
class SolenoidalBasis:
    """W-orthonormal basis of the discrete solenoidal subspace.

    Attributes
    ----------
    B : ndarray, shape (size, k)
        Columns are coefficient vectors with ``B^T W B = I``.
    space : DofSpace
    potential : ndarray, shape (size, p)
        W-orthonormal basis of the potential subspace ``range(D)``.
    """

    B: np.ndarray
    space: DofSpace
    potential: np.ndarray

    @property
    def dim(self) -> int:
        return self.B.shape[1]


def _orthonormal_range(M: np.ndarray, sw: np.ndarray, tol: float = NULL_TOL) -> np.ndarray:
    """W-orthonormal basis of ``range(M)``; ``sw = sqrt(W)``."""
    U, s, _ = np.linalg.svd(sw[:, None] * M, full_matrices=False)
    keep = s > tol * max(s[0], 1.0) if s.size else np.zeros(0, bool)
    return U[:, keep] / sw[:, None]


def solenoidal_basis(chart: MetricChart, grid: Grid, order: int = 2, domain: str = "M",
                     layout: str = "spline") -> SolenoidalBasis:
    """Apply ``S`` to the canonical coefficient basis and orthonormalize in the weighted product.

    For ``order = 0`` there are no potentials and the basis spans all scalars.

    Raises
    ------
    RankCollapse
        If the dimension differs from ``size - rank(D)``.
    """
    if grid.n != 2:
        raise ValueError("the solenoidal basis is implemented for n = 2")
    if order == 0:
        space = DofSpace(grid, 0, chart, layout, domain)
        if space.size > DENSE_MAX:
            raise ValueError(f"dense basis too large ({space.size} > {DENSE_MAX}); use a coarser grid")
        sw = np.sqrt(space.weights)
        return SolenoidalBasis(np.diag(1.0 / sw), space, np.zeros((space.size, 0)))
    op = symdiff_operator(grid, chart, layout, domain, order)
    space = op.space_f
    if space.size > DENSE_MAX:
        raise ValueError(f"dense basis too large ({space.size} > {DENSE_MAX}); use a coarser grid")
    _, S = projectors(grid, chart, layout, domain, "direct", order)
    sw = np.sqrt(space.weights)
    I = np.eye(space.size)
    SI = np.column_stack([S(I[:, k]) for k in range(space.size)])
    B = _orthonormal_range(SI, sw)
    pot = _orthonormal_range(op.D.toarray(), sw)
    expect = space.size - pot.shape[1]
    if B.shape[1] != expect:
        raise RankCollapse(f"solenoidal basis has {B.shape[1]} vectors, expected {expect}")
    return SolenoidalBasis(B, space, pot)


# ----------------------------------------------------------------------
@dataclass
class InjectivityReport:
    """Singular values of the weighted transform on the solenoidal and potential subspaces."""

    sigma_min: float
    sigma_max: float
    dim: int
    potential_sigma_max: float
    potential_sigma_min: float
    potential_dim: int
    tail: np.ndarray
    grid: str
    family: str
    spectrum: np.ndarray = field(repr=False, default=None)

    @property
    def separation(self) -> float:
        """``sigma_max(potential) / sigma_max(solenoidal)``."""
        return self.potential_sigma_max / self.sigma_max if self.sigma_max > 0 else np.inf

    def summary(self) -> str:
        return "\n".join([
            f"family {self.family}, space {self.grid}",
            f"solenoidal dim {self.dim}: sigma_min = {self.sigma_min:.6e}, sigma_max = {self.sigma_max:.6e}",
            f"potential dim {self.potential_dim}: sigma_max = {self.potential_sigma_max:.3e} "
            f"(ratio {self.separation:.3e})",
            "smallest singular values: " + " ".join(f"{v:.4e}" for v in self.tail),
        ])

    def rows(self):
        return ["index", "sigma"], [[k, float(v)] for k, v in enumerate(self.spectrum)]


def _weighted_columns(A: TransformMatrix, B: np.ndarray) -> np.ndarray:
    return np.sqrt(A.mu)[:, None] * (A.matrix @ B)


def injectivity_probe(A: TransformMatrix, basis: SolenoidalBasis) -> InjectivityReport:
    """Dense SVD of ``W_mu^{1/2} A B`` for the solenoidal and potential bases."""
    if A.space.identity() != basis.space.identity():
        raise ValueError("transform matrix and basis live on different spaces")
    s = sla.svdvals(_weighted_columns(A, basis.B)) if basis.dim else np.zeros(0)
    sp_ = sla.svdvals(_weighted_columns(A, basis.potential)) if basis.potential.shape[1] else np.zeros(1)
    s = np.sort(s)[::-1]
    return InjectivityReport(
        float(s[-1]) if s.size else 0.0, float(s[0]) if s.size else 0.0, basis.dim,
        float(sp_.max()), float(sp_.min()), basis.potential.shape[1], s[-20:][::-1].copy(),
        basis.space.identity(), A.family.identity(), s)


# ----------------------------------------------------------------------
def random_solenoidal(basis_or_space, rng: np.random.Generator, count: int = 1, n_bumps: int = 6,
                      width: float = 0.35, project=None) -> np.ndarray:
    """Random smooth fields: Gaussian bumps per component, sampled then projected.

    Returns coefficient vectors as columns, shape ``(size, count)``.
    """
    space = basis_or_space.space if isinstance(basis_or_space, SolenoidalBasis) else basis_or_space
    chart = space.chart
    pos = space.positions()
    comp = space.component_of()
    lo, hi = chart.bbox
    out = np.zeros((space.size, count))
    for t in range(count):
        v = np.zeros(space.size)
        for c in range(len(space.comps)):
            ctr = rng.uniform(lo, hi, size=(n_bumps, chart.dim)) * 0.7
            amp = rng.standard_normal(n_bumps)
            m = comp == c
            d2 = np.sum((pos[m][:, None, :] - ctr[None]) ** 2, axis=-1)
            v[m] = np.exp(-d2 / (2 * width ** 2)) @ amp
        out[:, t] = v
    if isinstance(basis_or_space, SolenoidalBasis):
        B = basis_or_space.B
        out = B @ (B.T @ (space.weights[:, None] * out))
    elif project is not None:
        out = np.column_stack([project(out[:, k]) for k in range(count)])
    return out


@dataclass
class StabilityReport:
    """Discrete analogue of ``|f^s| <= C |N f|`` over the solenoidal subspace.

    Attributes
    ----------
    C : float
        ``1 / sqrt(lambda_min)`` of the generalized eigenproblem; ``inf`` if singular.
    witness : ndarray
        Coefficients of the maximizing field.
    norm : str
        ``"H1"`` (orders 0 and 1) or ``"Htilde2"`` (order 2).
    history : list
        Ratios ``|f| / |N f|`` of the random trial fields, running maximum.
    """

    C: float
    witness: np.ndarray
    norm: str
    history: list
    dim: int
    _forms: tuple = field(repr=False, default=None)

    def ratio(self, coeffs: np.ndarray) -> float:
        """``|f|_{L^2} / |N f|`` for a solenoidal coefficient vector of the transform's space."""
        T, H, Mf = self._forms
        Nf = T @ coeffs
        return float(np.sqrt(coeffs @ (Mf @ coeffs)) / np.sqrt(max(Nf @ (H @ Nf), 1e-300)))

    def summary(self) -> str:
        best = max(self.history) if self.history else float("nan")
        return (f"stability constant C = {self.C:.6g} ({self.norm} norm of N f, dim {self.dim}); "
                f"best random trial ratio {best:.6g}")


def normal_to_m1(A: TransformMatrix, A1: TransformMatrix, G1) -> np.ndarray:
    """Dense map from ``M`` coefficients to the ``L^2`` projection of ``N f`` on the ``M1`` space."""
    lu = spla.splu(sp.csc_matrix(G1))
    R = (A1.matrix.T @ sp.diags(A.mu) @ A.matrix).toarray()
    return lu.solve(R)


def stability_constant(A: TransformMatrix, chart: MetricChart, frame: Optional[BoundaryNormalFrame] = None,
                       trials: int = 50, basis: Optional[SolenoidalBasis] = None,
                       A1: Optional[TransformMatrix] = None, rng=None) -> StabilityReport:
    """Estimate ``C`` in ``|f^s|_{L^2(M)} <= C |N_alpha f|`` by a generalized eigenproblem.

    ``N f`` is represented by its ``L^2`` projection onto the ``M1`` space of
    ``A1`` (biquadratic splines, assembled on demand).  Its norm is ``H^1`` for
    orders 0 and 1 and the boundary-adapted ``H~2`` quadratic form for order 2
    (requires ``frame``).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    grid = A.space.grid
    m = A.order
    if basis is None:
        basis = solenoidal_basis(chart, grid, m, A.space.domain, A.space.layout)
    if A1 is None:
        A1 = assemble(A.family, grid, m, layout="spline2", domain="M1")
    sp1 = A1.space
    G1 = gram_matrix(sp1, "mass")
    if m == 2:
        if frame is None:
            raise ValueError("order-2 stability needs a boundary frame for the H~2 norm")
        H = htilde2_gram(sp1, frame)
        norm = "Htilde2"
    else:
        H = G1 + gram_matrix(sp1, "stiffness")
        norm = "H1"
    T0 = normal_to_m1(A, A1, G1)
    T = T0 @ basis.B
    Hn = T.T @ (H @ T)
    Mf = gram_matrix(A.space, "mass")
    Ln = basis.B.T @ (Mf @ basis.B)
    Hn = 0.5 * (Hn + Hn.T)
    Ln = 0.5 * (Ln + Ln.T)
    lam, vec = sla.eigh(Hn, Ln)
    if lam[0] <= 1e-14 * lam[-1]:
        C = np.inf
    else:
        C = float(1.0 / np.sqrt(lam[0]))
    rep = StabilityReport(C, basis.B @ vec[:, 0], norm, [], basis.dim, (T0, H, Mf))
    best = 0.0
    for f in random_solenoidal(basis, rng, trials).T:
        best = max(best, rep.ratio(f))
        rep.history.append(best)
    return rep


# ----------------------------------------------------------------------
@dataclass
class Reconstruction:
    """Result of :func:`reconstruct`."""

    field: SymmetricTensorField
    coefficients: np.ndarray
    iterations: int
    residuals: list
    rel_error: Optional[float]
    converged: bool

    def summary(self) -> str:
        err = "n/a" if self.rel_error is None else f"{self.rel_error:.4e}"
        return (f"CG iterations {self.iterations}, final relative residual "
                f"{self.residuals[-1] if self.residuals else 0.0:.3e}, relative L2 error {err}")


def reconstruct(A: TransformMatrix, data, chart: Optional[MetricChart] = None, max_iter: int = 500,
                noise: float = 0.0, truth=None, tol: float = 1e-8, rng=None,
                solenoidal: bool = True) -> Reconstruction:
    """Conjugate gradients on ``S N S u = S A* data`` over the solenoidal subspace.

    Parameters
    ----------
    data : RayData or ndarray
    noise : float
        Relative level of additive Gaussian noise (times the RMS of the data).
    truth : ndarray or SymmetricTensorField, optional
        Ground truth for the error report (its solenoidal part is compared).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    u = A._rays(data).copy()
    if noise:
        u = u + noise * np.sqrt(np.mean(u ** 2)) * rng.standard_normal(u.shape)
    space = A.space
    w = space.weights
    sw = np.sqrt(w)
    if solenoidal and A.order > 0:
        _, S = projectors(space.grid, space.chart, space.layout, space.domain, "direct", A.order)
    else:
        S = lambda x: x  # noqa: E731
    Mm = A.matrix
    mu = A.mu

    def op(y):
        x = S(y / sw)
        x = (Mm.T @ (mu * (Mm @ x))) / w
        return sw * S(x)

    L = spla.LinearOperator((space.size, space.size), matvec=op, dtype=float)
    b = sw * S(A.adjoint(u))
    res = []
    nb = np.linalg.norm(b)
    if nb == 0:
        y = np.zeros(space.size)
        conv, it = True, 0
    else:
        def cb(yk):
            res.append(float(np.linalg.norm(b - op(yk)) / nb))

        y, info = spla.cg(L, b, rtol=tol, atol=0.0, maxiter=max_iter, callback=cb)
        conv, it = info == 0, len(res)
        if not conv:
            warnings.warn(f"reconstruction CG stopped after {it} iterations "
                          f"(relative residual {res[-1] if res else float('nan'):.3e})")
    x = S(y / sw)
    err = None
    if truth is not None:
        tv = space.to_vector(truth) if isinstance(truth, SymmetricTensorField) else np.asarray(truth)
        ts = S(tv)
        err = float(np.sqrt(np.sum(w * (x - ts) ** 2) / np.sum(w * ts ** 2)))
    return Reconstruction(space.to_field(x), x, it, res, err, bool(conv))
