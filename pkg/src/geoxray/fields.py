"""Grids, symmetric tensor fields, and their discrete coefficient spaces.

Three interpolation layouts are provided.

``cubic``
    Collocated nodal values, tensor-product 4-point Lagrange interpolation
    with clamped stencils at the box edges (periodic axes wrap).  Fields are
    multiplied by the indicator of their domain, so ``f = 0`` outside ``M``.
``spline``
    Staggered cardinal B-splines.  Component ``f_{i...}`` of an order-``m``
    tensor has degree ``2 - e_i - e_j - ...`` per axis, so that the symmetric
    differential of a spline one-form is again an exact spline tensor.  Degree
    1 coefficients live at grid nodes, degree 0 and 2 coefficients at cell
    midpoints.  Only coefficients whose whole support lies inside the domain
    are active, so fields vanish outside it without masking.
``spline2``
    Every component is a biquadratic B-spline (midpoint coefficients); a
    smooth space used as the target of the normal operator on ``M1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .manifold import MetricChart

LAYOUTS = ("cubic", "spline", "spline2")


@lru_cache(maxsize=None)
def components(order: int, n: int) -> tuple:
    """Stored index tuples ``i1 <= i2 <= ...`` in lexicographic order."""
    if order not in (0, 1, 2):
        raise ValueError(f"tensor order must be 0, 1 or 2, got {order}")
    return tuple(itertools.combinations_with_replacement(range(n), order))


def multiplicity(idx: tuple) -> int:
    """Number of full index tuples represented by the stored tuple ``idx``."""
    return len(set(itertools.permutations(idx))) if idx else 1


def monomials(order: int, v: np.ndarray) -> np.ndarray:
    """Contraction coefficients of stored components against ``v^{(x) order}``.

    ``f(v, ..., v) = sum_c f_c * monomials(order, v)[..., c]``.
    """
    v = np.asarray(v, dtype=float)
    comps = components(order, v.shape[-1])
    out = np.empty(v.shape[:-1] + (len(comps),))
    for c, idx in enumerate(comps):
        term = np.full(v.shape[:-1], float(multiplicity(idx)))
        for i in idx:
            term = term * v[..., i]
        out[..., c] = term
    return out


# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform Cartesian grid over a box.

    Non-periodic axes carry ``N`` nodes including both box faces; periodic
    axes carry ``N`` nodes per period.
    """

    bbox: np.ndarray
    shape: tuple
    periods: tuple = ()

    def __post_init__(self):
        bbox = np.asarray(self.bbox, dtype=float)
        shape = tuple(int(s) for s in self.shape)
        if bbox.ndim != 2 or bbox.shape[0] != 2 or bbox.shape[1] != len(shape):
            raise ValueError("bbox must have shape (2, n) matching the grid shape")
        if any(s < 4 for s in shape):
            raise ValueError(f"grid needs at least 4 nodes per axis, got {shape}")
        periods = tuple(float(p) for p in self.periods) or (0.0,) * len(shape)
        object.__setattr__(self, "bbox", bbox)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "periods", periods)

    def _key(self) -> tuple:
        return (tuple(self.bbox.ravel().tolist()), self.shape, self.periods)

    def __eq__(self, other) -> bool:
        return isinstance(other, Grid) and self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    @classmethod
    def over(cls, chart: MetricChart, N) -> "Grid":
        """Grid covering the chart box with ``N`` nodes per axis."""
        N = (int(N),) * chart.dim if np.isscalar(N) else tuple(N)
        return cls(chart.bbox, N, chart.periods)

    @property
    def n(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        lo, hi = self.bbox
        N = np.array(self.shape, dtype=float)
        per = np.array(self.periods)
        return np.where(per > 0, per / N, (hi - lo) / (N - 1))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_nodes(self, k: int) -> np.ndarray:
        return self.bbox[0, k] + self.spacing[k] * np.arange(self.shape[k])

    def points(self, shift: Sequence[float] = None) -> np.ndarray:
        """Node coordinates (optionally shifted by fractions of a cell), shape ``shape + (n,)``."""
        shift = np.zeros(self.n) if shift is None else np.asarray(shift, dtype=float)
        axes = [self.axis_nodes(k) + shift[k] * self.spacing[k] for k in range(self.n)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def knot_lines(self, k: int, lo: float, hi: float) -> np.ndarray:
        """Grid-line coordinates on axis ``k`` inside ``[lo, hi]`` (unbounded on periodic axes)."""
        h = self.spacing[k]
        a = np.ceil((lo - self.bbox[0, k]) / h)
        b = np.floor((hi - self.bbox[0, k]) / h)
        if self.periods[k] == 0:
            a, b = max(a, 0), min(b, self.shape[k] - 1)
        return self.bbox[0, k] + h * np.arange(a, b + 1)

    def identity(self) -> str:
        box = ",".join(f"{v:.6g}" for v in self.bbox.ravel())
        return f"grid{'x'.join(map(str, self.shape))}[{box}]"


# ----------------------------------------------------------------------
# one-dimensional bases
# ----------------------------------------------------------------------
def _lagrange4(s: np.ndarray, deriv: int) -> np.ndarray:
    """Weights (..., 4) of the 4-point Lagrange basis on nodes 0..3 at ``s``."""
    out = np.empty(s.shape + (4,))
    for a in range(4):
        others = [b for b in range(4) if b != a]
        den = float(np.prod([a - b for b in others]))
        if deriv == 0:
            out[..., a] = np.prod([s - b for b in others], axis=0) / den
        elif deriv == 1:
            tot = 0.0
            for b in others:
                tot = tot + np.prod([s - c for c in others if c != b], axis=0)
            out[..., a] = tot / den
        elif deriv == 2:
            tot = 0.0
            for b, c in itertools.permutations(others, 2):
                (d,) = [e for e in others if e not in (b, c)]
                tot = tot + (s - d)
            out[..., a] = tot / den
        else:
            out[..., a] = 0.0
    return out


def bspline(p: int, u: np.ndarray, deriv: int = 0) -> np.ndarray:
    """Centered cardinal B-spline of degree ``p`` (unit spacing) and its derivatives."""
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    if p == 0:
        return ((u >= -0.5) & (u < 0.5)).astype(float) if deriv == 0 else np.zeros_like(u)
    if p == 1:
        if deriv == 0:
            return np.clip(1.0 - a, 0.0, None)
        if deriv == 1:
            return np.where(a < 1.0, -np.sign(u), 0.0)
        return np.zeros_like(u)
    if p == 2:
        if deriv == 0:
            return np.where(a < 0.5, 0.75 - u * u, np.where(a < 1.5, 0.5 * (1.5 - a) ** 2, 0.0))
        if deriv == 1:
            return np.where(a < 0.5, -2.0 * u, np.where(a < 1.5, -np.sign(u) * (1.5 - a), 0.0))
        if deriv == 2:
            return np.where(a < 0.5, -2.0, np.where(a < 1.5, 1.0, 0.0))
        return np.zeros_like(u)
    raise ValueError(f"unsupported spline degree {p}")


def _shift(p: int) -> float:
    return 0.0 if p == 1 else 0.5


def _count(p: int, N: int) -> int:
    return N if p == 1 else N - 1


def _stencil_1d(kind, u: np.ndarray, N: int, h: float, periodic: bool, deriv: int):
    """Indices and weights along one axis; ``kind`` is ``"cubic"`` or a spline degree."""
    if kind == "cubic":
        if periodic:
            i = np.floor(u).astype(int)
            start = i - 1
            w = _lagrange4(u - start, deriv)
            idx = np.mod(start[..., None] + np.arange(4), N)
        else:
            i = np.clip(np.floor(u).astype(int), 0, N - 2)
            start = np.clip(i - 1, 0, N - 4)
            w = _lagrange4(u - start, deriv)
            idx = start[..., None] + np.arange(4)
        return idx, w / h**deriv
    p = int(kind)
    us = u - _shift(p)
    base = np.floor(us).astype(int)
    idx = base[..., None] + np.arange(-1, 3)
    w = bspline(p, us[..., None] - idx, deriv) / h**deriv
    ok = (idx >= 0) & (idx < _count(p, N))
    w = np.where(ok, w, 0.0)
    idx = np.where(ok, idx, -1)
    return idx, w


def tensor_stencil(grid: Grid, kinds, x: np.ndarray, deriv=None):
    """Tensor-product stencil at points ``x`` (P, n).

    Returns flat node indices into ``grid.shape`` (``-1`` where invalid) and
    weights, both of shape ``(P, S)``.  ``deriv`` is a per-axis derivative order.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = grid.n
    deriv = (0,) * n if deriv is None else tuple(deriv)
    h = grid.spacing
    per = grid.periods
    idx = np.zeros((x.shape[0], 1), dtype=np.int64)
    w = np.ones((x.shape[0], 1))
    bad = np.zeros((x.shape[0], 1), dtype=bool)
    for k in range(n):
        u = (x[:, k] - grid.bbox[0, k]) / h[k]
        ik, wk = _stencil_1d(kinds[k], u, grid.shape[k], h[k], per[k] > 0, deriv[k])
        idx = (idx[:, :, None] * grid.shape[k] + np.maximum(ik, 0)[:, None, :]).reshape(len(x), -1)
        bad = (bad[:, :, None] | (ik < 0)[:, None, :]).reshape(len(x), -1)
        w = (w[:, :, None] * wk[:, None, :]).reshape(len(x), -1)
    idx = np.where(bad, -1, idx)
    return idx, np.where(bad, 0.0, w)


def component_degrees(order: int, n: int, layout: str) -> list:
    """Per-component spline degree per axis (``"cubic"`` kinds for the nodal layout)."""
    comps = components(order, n)
    if layout == "cubic":
        return [("cubic",) * n for _ in comps]
    if layout == "spline2":
        return [(2,) * n for _ in comps]
    if layout == "spline":
        out = []
        for idx in comps:
            deg = [2] * n
            for i in idx:
                deg[i] -= 1
            out.append(tuple(deg))
        return out
    raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def dof_positions(grid: Grid, kinds) -> np.ndarray:
    """Coefficient locations for a component with the given per-axis kinds (padded to the grid)."""
    shift = [0.0 if (k == "cubic" or k == 1) else 0.5 for k in kinds]
    return grid.points(shift)


def _domain_level(chart: MetricChart, domain: str):
    if domain == "M":
        return chart.level_M
    if domain == "M1":
        return chart.level_M1
    if domain == "none":
        return None
    raise ValueError(f"domain must be 'M', 'M1' or 'none', got {domain!r}")


# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SymmetricTensorField:
    """Order-``m`` covariant symmetric tensor field sampled on a grid.

    Attributes
    ----------
    order : int
        0, 1 or 2.
    grid : Grid
    components : ndarray, shape (ncomp, *grid.shape)
        Stored components ``i <= j`` (nodal values for ``cubic``, spline
        coefficients for the spline layouts, zero-padded to the grid shape).
    interp : str
        ``"cubic"``, ``"spline"`` or ``"spline2"``.
    chart : MetricChart, optional
        Manifold supplying the domain indicator and metric.
    domain : str
        Region outside which the field vanishes: ``"M"``, ``"M1"`` or ``"none"``.
    """

    order: int
    grid: Grid
    components: np.ndarray
    interp: str = "cubic"
    chart: Optional[MetricChart] = None
    domain: str = "M"

    def __post_init__(self):
        comps = components(self.order, self.grid.n)
        arr = np.array(self.components, dtype=float)
        if arr.shape != (len(comps),) + self.grid.shape:
            raise ValueError(f"components must have shape {(len(comps),) + self.grid.shape}, "
                             f"got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field components must be finite")
        if self.interp not in LAYOUTS:
            raise ValueError(f"unknown interpolation {self.interp!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "components", arr)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def index_tuples(self) -> tuple:
        return components(self.order, self.grid.n)

    def __call__(self, x) -> np.ndarray:
        return eval_field(self, x)

    def _new(self, arr) -> "SymmetricTensorField":
        return type(self)(self.order, self.grid, arr, self.interp, self.chart, self.domain)

    def _check(self, other):
        if (other.order, other.grid, other.interp) != (self.order, self.grid, self.interp):
            raise ValueError("fields differ in order, grid or layout")

    def __add__(self, other):
        self._check(other)
        return self._new(self.components + other.components)

    def __sub__(self, other):
        self._check(other)
        return self._new(self.components - other.components)

    def __mul__(self, a: float):
        return self._new(float(a) * self.components)

    __rmul__ = __mul__

    def __neg__(self):
        return self._new(-self.components)

    def full(self, x) -> np.ndarray:
        """Full covariant array at ``x``: scalar, ``(n,)`` or ``(n, n)`` per point."""
        vals = eval_field(self, x)
        return to_full(self.order, vals, self.grid.n)

    def raised(self, x) -> np.ndarray:
        """Contravariant components ``f^{ij} = g^{ik} g^{jl} f_kl`` at ``x``."""
        if self.chart is None:
            raise ValueError("raising indices needs the field's chart")
        x = np.asarray(x, dtype=float)
        f = self.full(x)
        gi = self.chart.ginv(x)
        if self.order == 0:
            return f
        if self.order == 1:
            return np.einsum("...ij,...j->...i", gi, f)
        return np.einsum("...ik,...jl,...kl->...ij", gi, gi, f)


class OneForm(SymmetricTensorField):
    """Covariant one-form ``v_j`` on a grid (an order-1 symmetric tensor field)."""

    def __init__(self, grid: Grid, components, interp: str = "cubic",
                 chart: Optional[MetricChart] = None, domain: str = "M", order: int = 1):
        if order != 1:
            raise ValueError("OneForm has order 1")
        super().__init__(1, grid, components, interp, chart, domain)

    def _new(self, arr):
        return OneForm(self.grid, arr, self.interp, self.chart, self.domain)


def to_full(order: int, vals: np.ndarray, n: int) -> np.ndarray:
    """Expand stored components (..., ncomp) to full arrays."""
    if order == 0:
        return vals[..., 0]
    if order == 1:
        return vals
    out = np.empty(vals.shape[:-1] + (n, n))
    for c, (i, j) in enumerate(components(2, n)):
        out[..., i, j] = vals[..., c]
        out[..., j, i] = vals[..., c]
    return out


def from_full(order: int, arr: np.ndarray, n: int) -> np.ndarray:
    """Stored components (..., ncomp) of a full symmetric array."""
    if order == 0:
        return np.asarray(arr)[..., None]
    if order == 1:
        return np.asarray(arr)
    return np.stack([0.5 * (arr[..., i, j] + arr[..., j, i]) for i, j in components(2, n)], axis=-1)


def eval_field(field: SymmetricTensorField, x, deriv=None) -> np.ndarray:
    """Interpolated covariant components at ``x``, shape ``(..., ncomp)``.

    Exact at grid nodes for the ``cubic`` layout and zero wherever the
    domain level set is positive (the field is extended by zero off ``M``).
    ``deriv`` optionally requests a per-axis partial derivative of the
    interpolant (the domain indicator is not differentiated).

    Examples
    --------
    >>> from geoxray.manifold import euclidean_disc
    >>> c = euclidean_disc()
    >>> g = Grid.over(c, 9)
    >>> f = sample_field(lambda p: np.ones(p.shape[:-1] + (1,)), 0, g, c)
    >>> float(eval_field(f, [0.1, 0.2])[0]), float(eval_field(f, [1.2, 0.0])[0])
    (1.0, 0.0)
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    pts = x.reshape(-1, field.grid.n)
    if field.chart is not None:
        pts = field.chart.wrap(pts)
    kinds = component_degrees(field.order, field.grid.n, field.interp)
    out = np.empty((len(pts), len(kinds)))
    for c, kd in enumerate(kinds):
        idx, w = tensor_stencil(field.grid, kd, pts, deriv)
        vals = field.components[c].ravel()[np.maximum(idx, 0)]
        out[:, c] = np.sum(w * vals, axis=1)
    if field.chart is not None:
        level = _domain_level(field.chart, field.domain)
        if level is not None:
            out[level(pts) > 0] = 0.0
    return out.reshape(shape + (len(kinds),))


def sample_field(fn: Callable, order: int, grid: Grid, chart: Optional[MetricChart] = None,
                 interp: str = "cubic", domain: str = "M") -> SymmetricTensorField:
    """Sample ``fn(points) -> (..., ncomp)`` at the coefficient locations of a layout.

    For the spline layouts this is point sampling at coefficient centres,
    a second-order quasi-interpolant.
    """
    kinds = component_degrees(order, grid.n, interp)
    arr = np.zeros((len(kinds),) + grid.shape)
    for c, kd in enumerate(kinds):
        vals = np.asarray(fn(dof_positions(grid, kd)), dtype=float)
        arr[c] = vals[..., c]
    if interp != "cubic":
        # zero padding beyond the last midpoint
        for c, kd in enumerate(kinds):
            for k, p in enumerate(kd):
                if p != 1:
                    sl = [slice(None)] * grid.n
                    sl[k] = -1
                    arr[(c,) + tuple(sl)] = 0.0
    return SymmetricTensorField(order, grid, arr, interp, chart, domain)


# ----------------------------------------------------------------------
def _support_inside(level, grid: Grid, kinds, samples: int = 5) -> np.ndarray:
    """True where the whole support box of a coefficient lies in ``{level <= 0}``."""
    pos = dof_positions(grid, kinds)
    h = grid.spacing
    offs = []
    for k, p in enumerate(kinds):
        half = 2.0 if p == "cubic" else (p + 1) / 2.0
        offs.append(np.linspace(-half, half, samples) * h[k])
    ok = np.ones(grid.shape, dtype=bool)
    for o in itertools.product(*offs):
        ok &= level(pos + np.array(o)) <= 0
    for k, p in enumerate(kinds):
        if p != "cubic" and p != 1:
            sl = [slice(None)] * grid.n
            sl[k] = -1
            ok[tuple(sl)] = False
    return ok


class DofSpace:
    """Active coefficients of an order-``m`` tensor layout on a grid.

    Parameters
    ----------
    grid : Grid
    order : int
    chart : MetricChart
    layout : str
        ``"cubic"``, ``"spline"`` or ``"spline2"``.
    domain : str
        ``"M"`` or ``"M1"``: for the spline layouts only coefficients whose
        support lies in the domain are active; for ``cubic`` all nodes are
        active and evaluation is masked by the domain indicator.
    active : list of ndarray, optional
        Explicit per-component activity masks overriding the default rule.
    """

    def __init__(self, grid: Grid, order: int, chart: MetricChart, layout: str = "cubic",
                 domain: str = "M", active=None):
        if grid.n != chart.dim:
            raise ValueError("grid and chart dimensions differ")
        if layout != "cubic" and any(grid.periods):
            raise ValueError("spline layouts do not support periodic axes")
        self.grid = grid
        self.order = order
        self.chart = chart
        self.layout = layout
        self.domain = domain
        self.comps = components(order, grid.n)
        self.kinds = component_degrees(order, grid.n, layout)
        level = _domain_level(chart, domain)
        if active is None:
            if layout == "cubic":
                active = [np.ones(grid.shape, dtype=bool) for _ in self.comps]
            else:
                active = [_support_inside(level, grid, kd) for kd in self.kinds]
        self.active = [np.asarray(a, dtype=bool) for a in active]
        self.index = []
        off = 0
        for a in self.active:
            ii = -np.ones(grid.shape, dtype=np.int64)
            ii[a] = np.arange(off, off + a.sum())
            off += int(a.sum())
            self.index.append(ii)
        self.offsets = np.cumsum([0] + [int(a.sum()) for a in self.active])
        self.size = int(off)
        self.masked = layout == "cubic" and level is not None
        self._weights = None

    # ------------------------------------------------------------------
    def identity(self) -> str:
        return f"{self.layout}-m{self.order}-{self.domain}-{self.grid.identity()}"

    def positions(self) -> np.ndarray:
        """Coordinates of the active coefficients, shape (size, n)."""
        return np.concatenate([dof_positions(self.grid, kd)[a] for kd, a in zip(self.kinds, self.active)])

    def component_of(self) -> np.ndarray:
        return np.concatenate([np.full(int(a.sum()), c) for c, a in enumerate(self.active)])

    def to_vector(self, f: SymmetricTensorField) -> np.ndarray:
        if f.order != self.order or f.grid != self.grid or f.interp != self.layout:
            raise ValueError("field does not belong to this coefficient space")
        return np.concatenate([f.components[c][a] for c, a in enumerate(self.active)])

    def to_field(self, vec: np.ndarray, cls=None) -> SymmetricTensorField:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"vector of length {self.size} expected, got {vec.shape}")
        arr = np.zeros((len(self.comps),) + self.grid.shape)
        for c, a in enumerate(self.active):
            arr[c][a] = vec[self.offsets[c]: self.offsets[c + 1]]
        if cls is None:
            cls = OneForm if self.order == 1 else SymmetricTensorField
        if cls is OneForm:
            return OneForm(self.grid, arr, self.layout, self.chart, self.domain)
        return SymmetricTensorField(self.order, self.grid, arr, self.layout, self.chart, self.domain)

    def sample(self, fn: Callable) -> np.ndarray:
        """Coefficient vector from ``fn(points) -> (..., ncomp)`` (see :func:`sample_field`)."""
        return self.to_vector(sample_field(fn, self.order, self.grid, self.chart, self.layout,
                                          self.domain))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    # ------------------------------------------------------------------
    @property
    def weights(self) -> np.ndarray:
        """Lumped diagonal inner-product weights ``sqrt(det g) * cell volume * g^{ii} g^{jj} * mult``."""
        if self._weights is None:
            out = []
            vol = self.grid.cell_volume
            for idx, kd, a in zip(self.comps, self.kinds, self.active):
                pos = dof_positions(self.grid, kd)[a]
                w = np.full(len(pos), vol * multiplicity(idx))
                if not self.chart.flat and len(pos):
                    pos = self.chart.wrap(pos)
                    sq = np.maximum(self.chart.sqrt_det(pos), 1e-12)
                    gi = self.chart.ginv(pos)
                    w = w * sq
                    for i in idx:
                        w = w * gi[:, i, i]
                out.append(w)
            self._weights = np.concatenate(out) if out else np.zeros(0)
        return self._weights

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.dot(a * self.weights, b))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    # ------------------------------------------------------------------
    def stencil(self, x: np.ndarray, c: int, deriv=None):
        """Global coefficient indices (``-1`` inactive) and weights of component ``c`` at ``x``."""
        idx, w = tensor_stencil(self.grid, self.kinds[c], x, deriv)
        gidx = np.where(idx >= 0, self.index[c].ravel()[np.maximum(idx, 0)], -1)
        w = np.where(gidx >= 0, w, 0.0)
        if self.masked:
            level = _domain_level(self.chart, self.domain)
            w = w * (level(self.chart.wrap(np.atleast_2d(x))) <= 0)[:, None]
        return gidx, w

    def eval_matrix(self, x: np.ndarray, c: int, deriv=None) -> sp.csr_matrix:
        """Sparse ``(P, size)`` matrix evaluating component ``c`` (or a derivative) at ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gidx, w = self.stencil(self.chart.wrap(x), c, deriv)
        rows = np.repeat(np.arange(len(x)), gidx.shape[1])
        keep = gidx.ravel() >= 0
        return sp.csr_matrix((w.ravel()[keep], (rows[keep], gidx.ravel()[keep])),
                             shape=(len(x), self.size))

    def evaluate(self, vec: np.ndarray, x: np.ndarray, deriv=None) -> np.ndarray:
        """Component values (P, ncomp) of the coefficient vector at points ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([self.eval_matrix(x, c, deriv) @ vec for c in range(len(self.comps))], axis=-1)


# ----------------------------------------------------------------------
# consistent Gram matrices
# ----------------------------------------------------------------------
def cell_quadrature(grid: Grid, n_gauss: int = 3):
    """Gauss points and weights over every grid cell, shapes (Q, n) and (Q,)."""
    gx, gw = np.polynomial.legendre.leggauss(n_gauss)
    h = grid.spacing
    axes_x, axes_w = [], []
    for k in range(grid.n):
        ncell = grid.shape[k] if grid.periods[k] > 0 else grid.shape[k] - 1
        left = grid.bbox[0, k] + h[k] * np.arange(ncell)
        axes_x.append((left[:, None] + 0.5 * h[k] * (gx + 1)).ravel())
        axes_w.append(np.tile(0.5 * h[k] * gw, ncell))
    X = np.stack(np.meshgrid(*axes_x, indexing="ij"), axis=-1).reshape(-1, grid.n)
    W = np.ones(1)
    for w in axes_w:
        W = np.outer(W, w).ravel()
    return X, W


def _metric_factor(chart: MetricChart, x: np.ndarray, order: int):
    """Per-point sqrt(det g) and the component coupling ``G[c, c']`` of the tensor inner product."""
    n = chart.dim
    comps = components(order, n)
    x = chart.wrap(x)
    sq = chart.sqrt_det(x)
    gi = chart.ginv(x)
    C = np.zeros((len(x), len(comps), len(comps)))
    for a, ia in enumerate(comps):
        fa = set(itertools.permutations(ia)) if ia else {()}
        for b, ib in enumerate(comps):
            fb = set(itertools.permutations(ib)) if ib else {()}
            tot = np.zeros(len(x))
            for p in fa:
                for q in fb:
                    term = np.ones(len(x))
                    for i, j in zip(p, q):
                        term = term * gi[:, i, j]
                    tot += term
            C[:, a, b] = tot
    return sq, C, gi


def gram_matrix(space: DofSpace, kind: str = "mass", n_gauss: int = 3,
                weight: Optional[Callable] = None, deriv=None) -> sp.csr_matrix:
    """Consistent Gram matrix of a coefficient space by cellwise Gauss quadrature.

    Parameters
    ----------
    kind : str
        ``"mass"`` for ``(f, h) = int <f, h>_g dV`` or ``"stiffness"`` for
        ``int g^{kl} <d_k f, d_l h>_g dV`` (coordinate partial derivatives).
    weight : callable, optional
        Extra pointwise weight ``weight(x)`` in the integrand.
    deriv : tuple, optional
        For ``kind="mass"``, integrate products of this partial derivative.
    """
    X, W = cell_quadrature(space.grid, n_gauss)
    lvl = _domain_level(space.chart, space.domain)
    if space.masked:
        keep = lvl(space.chart.wrap(X)) <= 0
        X, W = X[keep], W[keep]
    sq, C, gi = _metric_factor(space.chart, X, space.order)
    wq = W * sq
    if weight is not None:
        wq = wq * weight(X)
    nc = len(space.comps)
    n = space.grid.n
    if kind == "mass":
        E = [space.eval_matrix(X, c, deriv) for c in range(nc)]
        G = sp.csr_matrix((space.size, space.size))
        for a in range(nc):
            for b in range(nc):
                if np.any(C[:, a, b] != 0):
                    G = G + E[a].T @ sp.diags(wq * C[:, a, b]) @ E[b]
        return G.tocsr()
    if kind == "stiffness":
        G = sp.csr_matrix((space.size, space.size))
        E = {}
        for k in range(n):
            d = [0] * n
            d[k] = 1
            E[k] = [space.eval_matrix(X, c, d) for c in range(nc)]
        for k in range(n):
            for l in range(n):
                if np.all(gi[:, k, l] == 0):
                    continue
                for a in range(nc):
                    for b in range(nc):
                        cw = wq * C[:, a, b] * gi[:, k, l]
                        if np.any(cw != 0):
                            G = G + E[k][a].T @ sp.diags(cw) @ E[l][b]
        return G.tocsr()
    raise ValueError(f"unknown Gram kind {kind!r}")


def field_norm(f: SymmetricTensorField, n_gauss: int = 3) -> float:
    """``L^2`` norm ``(int <f, f>_g dV)^{1/2}`` of a field over its domain by cellwise quadrature."""
    if f.chart is None:
        raise ValueError("field norm needs the field's chart")
    X, W = cell_quadrature(f.grid, n_gauss)
    vals = eval_field(f, X)
    sq, C, _ = _metric_factor(f.chart, X, f.order)
    return float(np.sqrt(max(np.sum(W * sq * np.einsum("qa,qab,qb->q", vals, C, vals)), 0.0)))


@dataclass(frozen=True)
class AnalyticField:
    """Closed-form tensor field ``fn(x) -> (..., ncomp)`` extended by zero off its domain.

    Evaluated directly at quadrature points, so no interpolation error enters
    transforms of it.
    """

    order: int
    fn: Callable
    chart: MetricChart
    domain: str = "M"

    def __call__(self, x) -> np.ndarray:
        x = self.chart.wrap(np.asarray(x, dtype=float))
        out = np.array(self.fn(x), dtype=float)
        level = _domain_level(self.chart, self.domain)
        if level is not None:
            out[level(x) > 0] = 0.0
        return out
