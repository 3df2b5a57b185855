"""
Spatial weight matrices: rook lattices, row normalization, the admissible
interval for the autoregressive parameter and file I/O.
"""

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sparse_core as sc
from .sparse_core import SparseMatrix

__all__ = [
    "SpatialWeights",
    "rook_grid",
    "row_normalize",
    "from_matrix",
    "rho_interval",
    "power_extremes",
    "read_neighbor_list",
    "write_neighbor_list",
    "load_weights",
    "INTERVAL_MARGIN",
    "DENSE_LIMIT",
]

INTERVAL_MARGIN = 1e-6
DENSE_LIMIT = 2000
_NORMALIZATIONS = ("none", "row")


@dataclass(frozen=True, eq=False)
class SpatialWeights:
    """Weight matrix with its normalization and admissible ``rho`` box.

    Attributes
    ----------
    W : SparseMatrix
        ``n x n`` with zero diagonal.
    normalization : {"none", "row"}
    rho_lo, rho_hi : float
        Open interval for ``rho`` already pulled in by ``INTERVAL_MARGIN``.
    grid_hint : tuple of int or None
        ``(rows, cols)`` when ``W`` comes from a row-major lattice.
    has_islands : bool
        True when some unit has no neighbours.
    """

    W: SparseMatrix
    normalization: str = "none"
    rho_lo: float = -1.0 + INTERVAL_MARGIN
    rho_hi: float = 1.0 - INTERVAL_MARGIN
    grid_hint: tuple = None
    has_islands: bool = False

    def __post_init__(self):
        if self.normalization not in _NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {_NORMALIZATIONS}")
        if self.W.nrows != self.W.ncols:
            raise ValueError(f"weight matrix must be square, got {self.W.shape}")
        if not self.rho_lo < 0.0 < self.rho_hi:
            raise ValueError(f"invalid rho interval ({self.rho_lo}, {self.rho_hi})")

    @property
    def n(self):
        return self.W.nrows

    def contains(self, rho):
        return self.rho_lo <= rho <= self.rho_hi

    def with_interval(self, lo, hi):
        return SpatialWeights(self.W, self.normalization, lo, hi, self.grid_hint, self.has_islands)


def _rook_adjacency(rows, cols):
    idx = np.arange(rows * cols).reshape(rows, cols)
    pairs = [
        (idx[:, :-1].ravel(), idx[:, 1:].ravel()),
        (idx[:-1, :].ravel(), idx[1:, :].ravel()),
    ]
    src = np.concatenate([np.concatenate([a, b]) for a, b in pairs])
    dst = np.concatenate([np.concatenate([b, a]) for a, b in pairs])
    n = rows * cols
    return sc.canonicalize(n, n, src, dst, np.ones(src.size))


def _check_weights(w):
    if w.nrows != w.ncols:
        raise ValueError(f"weight matrix must be square, got {w.shape}")
    if np.any(w.values < 0):
        raise ValueError("weight matrix has negative entries")
    if np.any(w.row_idx == w.col_indices()):
        raise ValueError("weight matrix has a nonzero diagonal")


def _row_scale(w):
    sums = np.bincount(w.row_idx, weights=w.values, minlength=w.nrows)
    islands = sums == 0
    inv = np.where(islands, 0.0, 1.0 / np.where(islands, 1.0, sums))
    scaled = SparseMatrix(w.nrows, w.ncols, w.col_ptr, w.row_idx, w.values * inv[w.row_idx])
    return scaled, bool(islands.any())


def row_normalize(W, grid_hint=None):
    """Divide every row of ``W`` by its sum.

    Rows without neighbours stay zero; the returned object records that in
    ``has_islands`` and a warning is issued.
    """
    _check_weights(W)
    scaled, islands = _row_scale(W)
    if islands:
        warnings.warn("weight matrix has units without neighbours", stacklevel=2)
    lo, hi = _conservative()
    return SpatialWeights(scaled, "row", lo, hi, grid_hint, islands)


def from_matrix(W, normalize="row", grid_hint=None, interval=None):
    """Wrap a nonnegative weight matrix, optionally row-normalizing it.

    ``interval`` selects the ``rho_interval`` method; the default is
    ``"conservative"`` for row-normalized input and ``"extremal_iterative"``
    otherwise.
    """
    if normalize == "row":
        sw = row_normalize(W, grid_hint)
    elif normalize == "none":
        _check_weights(W)
        islands = bool(np.any(np.bincount(W.row_idx, minlength=W.nrows) == 0))
        sw = SpatialWeights(W, "none", grid_hint=grid_hint, has_islands=islands)
    else:
        raise ValueError(f"normalize must be one of {_NORMALIZATIONS}")
    if interval is None and sw.normalization == "row":
        return sw
    return sw.with_interval(*rho_interval(sw, interval))


def rook_grid(rows, cols, normalize=True):
    """Rook-contiguity weights on a ``rows x cols`` lattice numbered row-major."""
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be positive")
    adj = _rook_adjacency(rows, cols)
    if normalize:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return row_normalize(adj, grid_hint=(rows, cols))
    return from_matrix(adj, normalize="none", grid_hint=(rows, cols))


def _conservative():
    return -1.0 + INTERVAL_MARGIN, 1.0 - INTERVAL_MARGIN


def _shrink(lam_min, lam_max):
    lo = 1.0 / lam_min + INTERVAL_MARGIN if lam_min < 0 else -np.inf
    hi = 1.0 / lam_max - INTERVAL_MARGIN if lam_max > 0 else np.inf
    return float(lo), float(hi)


def power_extremes(W, tol=1e-6, max_iter=200000, seed=0):
    """Smallest and largest real eigenvalue of ``W`` by shifted power iteration.

    With ``R`` the largest absolute row sum, every eigenvalue lies in the
    disc of radius ``R``, so ``W + R I`` has ``lam_max + R`` as its dominant
    eigenvalue and ``W - R I`` has ``lam_min - R``.  Each iteration stops
    once the eigen-residual ``||B x - mu x||`` of the unit iterate falls
    below ``tol``.  Meant for weights similar to a symmetric matrix (e.g.
    row-normalized symmetric adjacency), whose spectrum is real.
    """
    s = W.to_scipy().tocsr()
    n = s.shape[0]
    if n == 0 or W.nnz == 0:
        return 0.0, 0.0
    radius = float(np.abs(s).sum(axis=1).max())
    start = np.random.default_rng(seed).random(n) + 0.5

    def dominant(shift):
        x = start / np.linalg.norm(start)
        mu = 0.0
        for _ in range(max_iter):
            y = s @ x + shift * x
            mu = float(x @ y)
            if np.linalg.norm(y - mu * x) <= tol * radius:
                return mu
            x = y / np.linalg.norm(y)
        warnings.warn("power iteration did not reach tolerance", stacklevel=3)
        return mu

    lam_max = dominant(radius) - radius
    lam_min = dominant(-radius) + radius
    return lam_min, lam_max


def rho_interval(sw, method=None):
    """Admissible ``(rho_lo, rho_hi)`` for ``A = I - rho W`` to stay invertible.

    Parameters
    ----------
    sw : SpatialWeights or SparseMatrix
    method : {"exact_dense", "extremal_iterative", "conservative"}, optional
        Defaults to ``"conservative"`` for row-normalized weights and
        ``"extremal_iterative"`` otherwise.  ``"exact_dense"`` refuses
        matrices larger than ``DENSE_LIMIT``.

    Returns
    -------
    tuple of float
        The open interval ``(1/lam_min, 1/lam_max)`` pulled in by
        ``INTERVAL_MARGIN`` on both ends.
    """
    W = sw.W if isinstance(sw, SpatialWeights) else sw
    normalization = sw.normalization if isinstance(sw, SpatialWeights) else "none"
    if method is None:
        method = "conservative" if normalization == "row" else "extremal_iterative"
    if method == "conservative":
        if normalization != "row":
            raise ValueError("the conservative interval needs row-normalized weights")
        return _conservative()
    if method == "exact_dense":
        if W.nrows > DENSE_LIMIT:
            raise ValueError(f"exact_dense refuses n = {W.nrows} > {DENSE_LIMIT}")
        eig = np.linalg.eigvals(W.to_dense())
        real = eig[np.abs(eig.imag) <= 1e-10 * max(1.0, np.abs(eig).max(initial=0.0))].real
        return _shrink(real.min(initial=0.0), real.max(initial=0.0))
    if method == "extremal_iterative":
        return _shrink(*power_extremes(W))
    raise ValueError(f"unknown interval method {method!r}")


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def read_neighbor_list(path):
    """Read ``id: neighbour ids`` lines into a 0/1 adjacency matrix.

    Unit ids are arbitrary tokens; units are numbered in the order their
    lines appear.  Blank lines and lines starting with ``#`` are ignored.
    """
    ids, neigh = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            head, sep, tail = line.partition(":")
            if not sep or not head.strip():
                raise ValueError(f"{path}:{lineno}: expected 'id: neighbour ids'")
            ids.append(head.strip())
            neigh.append(tail.replace(",", " ").split())
    pos = {u: k for k, u in enumerate(ids)}
    if len(pos) != len(ids):
        raise ValueError(f"{path}: duplicate unit ids")
    rows, cols = [], []
    for k, nb_ids in enumerate(neigh):
        for u in nb_ids:
            if u not in pos:
                raise ValueError(f"{path}: unit {ids[k]} lists unknown neighbour {u}")
            rows.append(k)
            cols.append(pos[u])
    n = len(ids)
    # duplicates in a line collapse to a single link
    m = sc.canonicalize(n, n, rows, cols, np.ones(len(rows)))
    return SparseMatrix(n, n, m.col_ptr, m.row_idx, np.ones(m.nnz))


def write_neighbor_list(path, W):
    """Write the sparsity pattern of ``W`` as ``i: j k ...`` lines (0-based)."""
    t = sc.transpose(W)
    with open(path, "w") as fh:
        for i in range(W.nrows):
            nbrs = t.row_idx[t.col_ptr[i]:t.col_ptr[i + 1]]
            fh.write(f"{i}: {' '.join(str(j) for j in nbrs)}\n".replace(": \n", ":\n"))


def load_weights(path, normalize="row", interval=None):
    """Read weights from Matrix Market (``.mtx``) or a neighbour list."""
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("%%MatrixMarket"):
        W = sc.read_matrix_market(path)
    else:
        W = read_neighbor_list(path)
    return from_matrix(W, normalize=normalize, interval=interval)
