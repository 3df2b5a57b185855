"""
Compressed sparse column storage and the handful of kernels the likelihood
needs: construction, transpose, sparse products and row selection.

Dense matrices are plain two-dimensional ``numpy`` arrays throughout the
package; only the sparse side needs a dedicated type.
"""

from dataclasses import dataclass

import numba as nb
import numpy as np

__all__ = [
    "SparseMatrix",
    "from_triplets",
    "from_coo",
    "from_dense",
    "from_scipy",
    "identity",
    "diag",
    "canonicalize",
    "transpose",
    "spgemm",
    "spmv",
    "spmm",
    "add",
    "scale",
    "select_rows",
    "select_submatrix",
    "read_matrix_market",
    "write_matrix_market",
]

INDEX = np.int64


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Immutable CSC matrix.

    Within each column the row indices are strictly increasing and no stored
    value is exactly zero.  Instances produced by this module always satisfy
    that; constructing one by hand skips the checks unless ``validate`` is
    called.
    """

    nrows: int
    ncols: int
    col_ptr: np.ndarray
    row_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        for name, dtype in (("col_ptr", INDEX), ("row_idx", INDEX), ("values", np.float64)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype).view()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self):
        return int(self.col_ptr[-1])

    def col_indices(self):
        """Column index of every stored entry, aligned with ``row_idx``."""
        return np.repeat(np.arange(self.ncols, dtype=INDEX), np.diff(self.col_ptr))

    def to_dense(self):
        out = np.zeros((self.nrows, self.ncols))
        out[self.row_idx, self.col_indices()] = self.values
        return out

    def to_scipy(self):
        from scipy import sparse

        return sparse.csc_matrix(
            (np.array(self.values), np.array(self.row_idx), np.array(self.col_ptr)),
            shape=self.shape,
        )

    def diagonal(self):
        out = np.zeros(min(self.shape))
        cols = self.col_indices()
        on = self.row_idx == cols
        out[cols[on]] = self.values[on]
        return out

    @property
    def T(self):
        return transpose(self)

    def validate(self):
        """Raise ``ValueError`` if the canonical-form invariants do not hold."""
        cp, ri = self.col_ptr, self.row_idx
        if cp.shape != (self.ncols + 1,) or cp[0] != 0 or np.any(np.diff(cp) < 0):
            raise ValueError("malformed col_ptr")
        if ri.shape[0] != cp[-1] or self.values.shape[0] != cp[-1]:
            raise ValueError("row_idx/values length does not match col_ptr")
        if ri.size and (ri.min() < 0 or ri.max() >= self.nrows):
            raise ValueError("row index out of range")
        d = np.diff(ri)
        starts = np.zeros(ri.size, dtype=bool)
        starts[cp[:-1][np.diff(cp) > 0]] = True
        if np.any(d[~starts[1:]] <= 0):
            raise ValueError("row indices not strictly increasing within a column")
        if np.any(self.values == 0.0):
            raise ValueError("explicit zero stored")
        return self


def _empty(nrows, ncols):
    return SparseMatrix(
        nrows, ncols, np.zeros(ncols + 1, INDEX), np.zeros(0, INDEX), np.zeros(0)
    )


def canonicalize(nrows, ncols, rows, cols, vals):
    """Sort by (column, row), sum duplicates and drop exact zeros."""
    rows = np.asarray(rows, dtype=INDEX).ravel()
    cols = np.asarray(cols, dtype=INDEX).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    if not (rows.shape == cols.shape == vals.shape):
        raise ValueError("triplet arrays differ in length")
    if rows.size and (rows.min() < 0 or rows.max() >= nrows):
        raise IndexError("row index out of range")
    if cols.size and (cols.min() < 0 or cols.max() >= ncols):
        raise IndexError("column index out of range")
    if rows.size == 0:
        return _empty(nrows, ncols)
    order = np.lexsort((rows, cols))
    rows, cols, vals = rows[order], cols[order], vals[order]
    key_change = np.empty(rows.size, dtype=bool)
    key_change[0] = True
    key_change[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    starts = np.flatnonzero(key_change)
    vals = np.add.reduceat(vals, starts)
    rows, cols = rows[starts], cols[starts]
    keep = vals != 0.0
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    col_ptr = np.zeros(ncols + 1, INDEX)
    np.cumsum(np.bincount(cols, minlength=ncols), out=col_ptr[1:])
    return SparseMatrix(nrows, ncols, col_ptr, rows, vals)


def from_coo(nrows, ncols, rows, cols, vals):
    return canonicalize(nrows, ncols, rows, cols, vals)


def from_triplets(nrows, ncols, entries):
    """Build a canonical matrix from an iterable of ``(row, col, value)``."""
    entries = list(entries)
    if not entries:
        return _empty(nrows, ncols)
    r, c, v = zip(*entries)
    return canonicalize(nrows, ncols, r, c, v)


def from_dense(a):
    a = np.asarray(a, dtype=float)
    r, c = np.nonzero(a)
    return canonicalize(a.shape[0], a.shape[1], r, c, a[r, c])


def from_scipy(m):
    m = m.tocoo()
    return canonicalize(m.shape[0], m.shape[1], m.row, m.col, m.data)


def identity(n):
    idx = np.arange(n, dtype=INDEX)
    return SparseMatrix(n, n, np.arange(n + 1, dtype=INDEX), idx, np.ones(n))


def diag(d):
    d = np.asarray(d, dtype=float)
    idx = np.arange(d.size, dtype=INDEX)
    return canonicalize(d.size, d.size, idx, idx, d)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _transpose_kernel(nrows, ncols, cp, ri, vx):
    count = np.zeros(nrows + 1, dtype=np.int64)
    for p in range(cp[ncols]):
        count[ri[p] + 1] += 1
    for i in range(nrows):
        count[i + 1] += count[i]
    tp = count.copy()
    nxt = count[:nrows].copy()
    ti = np.empty(cp[ncols], dtype=np.int64)
    tx = np.empty(cp[ncols], dtype=np.float64)
    for j in range(ncols):
        for p in range(cp[j], cp[j + 1]):
            q = nxt[ri[p]]
            nxt[ri[p]] += 1
            ti[q] = j
            tx[q] = vx[p]
    return tp, ti, tx


@nb.njit(cache=True)
def _spgemm_kernel(m, n, ap, ai, ax, bp, bi, bx):
    # Gustavson: column j of C accumulates A[:, k] * B[k, j] in a dense workspace.
    mark = np.full(m, -1, dtype=np.int64)
    cp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        cnt = 0
        for pb in range(bp[j], bp[j + 1]):
            k = bi[pb]
            for pa in range(ap[k], ap[k + 1]):
                i = ai[pa]
                if mark[i] != j:
                    mark[i] = j
                    cnt += 1
        cp[j + 1] = cp[j] + cnt
    ci = np.empty(cp[n], dtype=np.int64)
    cx = np.empty(cp[n], dtype=np.float64)
    work = np.zeros(m, dtype=np.float64)
    mark[:] = -1
    for j in range(n):
        nz = cp[j]
        for pb in range(bp[j], bp[j + 1]):
            k = bi[pb]
            bkj = bx[pb]
            for pa in range(ap[k], ap[k + 1]):
                i = ai[pa]
                if mark[i] != j:
                    mark[i] = j
                    ci[nz] = i
                    nz += 1
                    work[i] = ax[pa] * bkj
                else:
                    work[i] += ax[pa] * bkj
        seg = np.sort(ci[cp[j]:nz])
        for t in range(seg.size):
            ci[cp[j] + t] = seg[t]
            cx[cp[j] + t] = work[seg[t]]
    return cp, ci, cx


@nb.njit(cache=True)
def _spmm_kernel(nrows, ncols, cp, ri, vx, x):
    # x is (ncols, k); returns (nrows, k)
    k = x.shape[1]
    out = np.zeros((nrows, k))
    for j in range(ncols):
        for p in range(cp[j], cp[j + 1]):
            i = ri[p]
            v = vx[p]
            for c in range(k):
                out[i, c] += v * x[j, c]
    return out


def _prune(nrows, ncols, cp, ri, vx):
    keep = vx != 0.0
    if keep.all():
        return SparseMatrix(nrows, ncols, cp, ri, vx)
    cols = np.repeat(np.arange(ncols, dtype=INDEX), np.diff(cp))[keep]
    new_cp = np.zeros(ncols + 1, INDEX)
    np.cumsum(np.bincount(cols, minlength=ncols), out=new_cp[1:])
    return SparseMatrix(nrows, ncols, new_cp, ri[keep], vx[keep])


def transpose(m):
    tp, ti, tx = _transpose_kernel(m.nrows, m.ncols, m.col_ptr, m.row_idx, m.values)
    return SparseMatrix(m.ncols, m.nrows, tp, ti, tx)


def spgemm(a, b):
    """Sparse product ``a @ b`` in canonical form."""
    if a.ncols != b.nrows:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    cp, ci, cx = _spgemm_kernel(
        a.nrows, b.ncols, a.col_ptr, a.row_idx, a.values, b.col_ptr, b.row_idx, b.values
    )
    return _prune(a.nrows, b.ncols, cp, ci, cx)


def spmm(m, x):
    """Sparse times dense matrix; ``x`` has ``m.ncols`` rows."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != m.ncols:
        raise ValueError(f"dimension mismatch: {m.shape} @ {x.shape}")
    return _spmm_kernel(
        m.nrows, m.ncols, m.col_ptr, m.row_idx, m.values, np.ascontiguousarray(x)
    )


def spmv(m, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != m.ncols:
        raise ValueError(f"dimension mismatch: {m.shape} @ {x.shape}")
    return _spmm_kernel(
        m.nrows, m.ncols, m.col_ptr, m.row_idx, m.values, x.reshape(-1, 1)
    )[:, 0]


def add(a, b, alpha=1.0, beta=1.0):
    """``alpha * a + beta * b``."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} + {b.shape}")
    rows = np.concatenate([a.row_idx, b.row_idx])
    cols = np.concatenate([a.col_indices(), b.col_indices()])
    vals = np.concatenate([alpha * a.values, beta * b.values])
    return canonicalize(a.nrows, a.ncols, rows, cols, vals)


def scale(a, alpha):
    if alpha == 0.0:
        return _empty(a.nrows, a.ncols)
    return SparseMatrix(a.nrows, a.ncols, a.col_ptr, a.row_idx, alpha * a.values)


def _check_index(idx, n):
    idx = np.asarray(idx, dtype=INDEX).ravel()
    if idx.size:
        if idx[0] < 0 or idx[-1] >= n:
            raise IndexError("selection index out of range")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("selection index must be strictly increasing")
    return idx


def select_rows(m, idx):
    """Rows ``idx`` of ``m`` in order, i.e. ``B_o @ m`` for the selection matrix.

    Works for both :class:`SparseMatrix` and dense arrays; the result has the
    same kind as the input.
    """
    if isinstance(m, SparseMatrix):
        idx = _check_index(idx, m.nrows)
        newpos = np.full(m.nrows, -1, dtype=INDEX)
        newpos[idx] = np.arange(idx.size, dtype=INDEX)
        r = newpos[m.row_idx]
        keep = r >= 0
        cols = m.col_indices()[keep]
        col_ptr = np.zeros(m.ncols + 1, INDEX)
        np.cumsum(np.bincount(cols, minlength=m.ncols), out=col_ptr[1:])
        return SparseMatrix(idx.size, m.ncols, col_ptr, r[keep], m.values[keep])
    arr = np.asarray(m)
    idx = _check_index(idx, arr.shape[0])
    return arr[idx]


def select_submatrix(m, idx):
    """Principal submatrix ``m[idx][:, idx]`` of a square sparse matrix."""
    rows = select_rows(m, idx)
    return transpose(select_rows(transpose(rows), idx))


# ---------------------------------------------------------------------------
# Matrix Market I/O
# ---------------------------------------------------------------------------


def read_matrix_market(path):
    """Read a coordinate Matrix Market file; symmetric files are expanded."""
    from scipy.io import mmread

    m = mmread(str(path))
    if not hasattr(m, "tocoo"):
        return from_dense(np.asarray(m))
    return from_scipy(m)


def write_matrix_market(path, m, symmetric=False, comment=""):
    """Write ``m`` in coordinate format with round-trip float precision."""
    from scipy.io import mmwrite

    mmwrite(
        str(path),
        m.to_scipy(),
        comment=comment,
        field="real",
        precision=17,
        symmetry="symmetric" if symmetric else "general",
    )
