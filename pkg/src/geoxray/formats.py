"""On-disk formats: GXRT1 grid fields, sparse-matrix triplets, and CSV tables.

GXRT1 layout (little-endian)::

    b"GXRT1\\0"  u8 order  u8 dim  u64 dims[dim]  f64 bbox_min[dim]  f64 bbox_max[dim]
    f64 components (stored i <= j, lexicographic), each row-major over the grid

Triplet layout (little-endian)::

    b"GXTRI1\\0\\0"  u64 rows  u64 cols  u8 order  u8 reserved[7]  u8 family_hash[32]
    u64 nnz  then nnz records (u64 row, u64 col, f64 value)
"""

from __future__ import annotations

import csv
import hashlib
import io
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .fields import Grid, SymmetricTensorField, components

MAGIC_FIELD = b"GXRT1\0"
MAGIC_TRIPLET = b"GXTRI1\0\0"
_REC = np.dtype([("row", "<u8"), ("col", "<u8"), ("val", "<f8")])


def write_gxrt1(path, f: SymmetricTensorField) -> None:
    """Write a field's stored components in GXRT1 format."""
    n = f.grid.n
    with open(path, "wb") as fh:
        fh.write(MAGIC_FIELD)
        fh.write(struct.pack("<BB", f.order, n))
        fh.write(struct.pack(f"<{n}Q", *f.grid.shape))
        fh.write(np.asarray(f.grid.bbox[0], dtype="<f8").tobytes())
        fh.write(np.asarray(f.grid.bbox[1], dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(f.components, dtype="<f8").tobytes())


def read_gxrt1(path, chart=None, interp: str = "cubic") -> SymmetricTensorField:
    """Read a GXRT1 file; the layout tag and chart are not stored and must be supplied."""
    data = Path(path).read_bytes()
    if data[:6] != MAGIC_FIELD:
        raise ValueError(f"{path}: not a GXRT1 file")
    order, n = struct.unpack_from("<BB", data, 6)
    off = 8
    dims = struct.unpack_from(f"<{n}Q", data, off)
    off += 8 * n
    lo = np.frombuffer(data, "<f8", n, off)
    hi = np.frombuffer(data, "<f8", n, off + 8 * n)
    off += 16 * n
    nc = len(components(order, n))
    count = nc * int(np.prod(dims))
    if len(data) - off != 8 * count:
        raise ValueError(f"{path}: truncated or oversized GXRT1 payload")
    arr = np.frombuffer(data, "<f8", count, off).reshape((nc,) + tuple(dims))
    periods = chart.periods if chart is not None else ()
    grid = Grid(np.stack([lo, hi]), dims, periods)
    return SymmetricTensorField(order, grid, arr.copy(), interp, chart)


def family_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode()).digest()


def write_triplets(path, A: sp.spmatrix, order: int, family_id: str) -> None:
    """Persist a sparse matrix as (row, col, value) records."""
    coo = sp.coo_matrix(A)
    rec = np.empty(coo.nnz, dtype=_REC)
    rec["row"], rec["col"], rec["val"] = coo.row, coo.col, coo.data
    with open(path, "wb") as fh:
        fh.write(MAGIC_TRIPLET)
        fh.write(struct.pack("<QQB7x", coo.shape[0], coo.shape[1], order))
        fh.write(family_hash(family_id))
        fh.write(struct.pack("<Q", coo.nnz))
        fh.write(rec.tobytes())


def read_triplets(path):
    """Return ``(matrix, order, family_hash)`` from a triplet file."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC_TRIPLET:
        raise ValueError(f"{path}: not a triplet file")
    rows, cols, order = struct.unpack_from("<QQB7x", data, 8)
    h = data[32:64]
    (nnz,) = struct.unpack_from("<Q", data, 64)
    rec = np.frombuffer(data, _REC, nnz, 72)
    A = sp.csr_matrix((rec["val"], (rec["row"].astype(np.int64), rec["col"].astype(np.int64))),
                      shape=(rows, cols))
    return A, order, h


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """UTF-8 CSV with a header row; floats written with full precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def path_rows(path) -> tuple[list, list]:
    """Header and rows of a geodesic dump: ``t, x^1..x^n, xi_1..xi_n, E_g``."""
    from .geodesics import energy

    n = path.chart.dim
    header = ["t"] + [f"x{k + 1}" for k in range(n)] + [f"xi{k + 1}" for k in range(n)] + ["E_g"]
    E = energy(path.chart, path.z)
    rows = [[t, *x, *xi, e] for t, x, xi, e in zip(path.t, path.x, path.xi, E)]
    return header, rows


def census_rows(family) -> tuple[list, list]:
    """Ray census: ``chart, iz, itheta, alpha, simple, length_in_M``."""
    header = ["chart", "iz", "itheta", "alpha", "simple", "length_in_M"]
    rows = []
    for m, fc in enumerate(family.charts):
        for iz in range(fc.n_z):
            for it in range(fc.n_theta):
                rows.append([m, iz, it, float(fc.alpha[iz, it]), int(fc.simple[iz, it]),
                             float(fc.length_in_M[iz, it])])
    return header, rows
