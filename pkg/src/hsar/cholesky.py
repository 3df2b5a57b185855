"""
Sparse Cholesky factorization of symmetric positive definite matrices.

The factorization is split into a symbolic phase (fill-reducing ordering,
elimination tree, column counts, scatter map from ``S`` into the permuted
upper triangle) and a numeric up-looking phase.  The symbolic phase depends
only on the sparsity pattern and the permutation, so it is cached and reused
when the same pattern is refactored with new values, which is exactly what
happens when ``A'A`` is refactored for every trial value of ``rho``.

Factors of ``S + theta * D``, with ``D`` diagonal with ones at a set of
indices, are produced either by a sequence of rank-1 updates of an existing
factor or by a fresh numeric factorization with the same symbolic analysis.
"""

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import ordering
from .errors import NotPositiveDefinite

__all__ = [
    "CholeskyFactor",
    "Symbolic",
    "symbolic_order",
    "analyze",
    "factor",
    "factor_values",
    "solve_spd",
    "rank1_update",
    "factor_observed_system",
    "PIVOT_RTOL",
    "UPDATE_CUTOFF",
]

PIVOT_RTOL = 1e-13
UPDATE_CUTOFF = 0.25


# ---------------------------------------------------------------------------
# numba kernels (CSC, lower triangular factor, diagonal stored first)
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _etree(n, cp, ci):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(cp[k], cp[k + 1]):
            i = ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@nb.njit(cache=True)
def _ereach(k, cp, ci, parent, stack, mark):
    # nonzero pattern of row k of L, returned in stack[top:n] in topological order
    n = parent.shape[0]
    top = n
    mark[k] = k
    for p in range(cp[k], cp[k + 1]):
        i = ci[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            stack[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            stack[top] = stack[length]
    return top


@nb.njit(cache=True)
def _colcounts(n, cp, ci, parent):
    counts = np.ones(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(k, cp, ci, parent, stack, mark)
        for t in range(top, n):
            counts[stack[t]] += 1
    lp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        lp[j + 1] = lp[j] + counts[j]
    return lp


@nb.njit(cache=True)
def _chol_numeric(n, cp, ci, cx, parent, lp, tol):
    li = np.empty(lp[n], dtype=np.int64)
    lx = np.empty(lp[n], dtype=np.float64)
    nxt = lp[:n].copy()
    x = np.zeros(n, dtype=np.float64)
    stack = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(k, cp, ci, parent, stack, mark)
        x[k] = 0.0
        for p in range(cp[k], cp[k + 1]):
            if ci[p] <= k:
                x[ci[p]] = cx[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = stack[t]
            lki = x[i] / lx[lp[i]]
            x[i] = 0.0
            for p in range(lp[i] + 1, nxt[i]):
                x[li[p]] -= lx[p] * lki
            d -= lki * lki
            p = nxt[i]
            nxt[i] += 1
            li[p] = k
            lx[p] = lki
        if not d > tol:
            return li, lx, k, d
        p = nxt[k]
        nxt[k] += 1
        li[p] = k
        lx[p] = np.sqrt(d)
    return li, lx, -1, 0.0


@nb.njit(cache=True)
def _solve_kernel(lp, li, lx, perm, b):
    n, m = b.shape
    x = np.empty((n, m))
    for k in range(n):
        x[k, :] = b[perm[k], :]
    for j in range(n):
        d = lx[lp[j]]
        for c in range(m):
            x[j, c] /= d
        for p in range(lp[j] + 1, lp[j + 1]):
            i = li[p]
            v = lx[p]
            for c in range(m):
                x[i, c] -= v * x[j, c]
    for j in range(n - 1, -1, -1):
        for p in range(lp[j] + 1, lp[j + 1]):
            i = li[p]
            v = lx[p]
            for c in range(m):
                x[j, c] -= v * x[i, c]
        d = lx[lp[j]]
        for c in range(m):
            x[j, c] /= d
    out = np.empty((n, m))
    for k in range(n):
        out[perm[k], :] = x[k, :]
    return out


@nb.njit(cache=True)
def _updown(lp, li, lx, parent, f, w, sigma):
    # w holds the update vector, nonzero only on the etree path from f; it is
    # consumed.  Returns the first failing column or -1.
    beta = 1.0
    j = f
    while j != -1:
        p = lp[j]
        alpha = w[j] / lx[p]
        beta2 = beta * beta + sigma * alpha * alpha
        if not beta2 > 0.0:
            return j
        beta2 = np.sqrt(beta2)
        if sigma > 0:
            delta = beta / beta2
        else:
            delta = beta2 / beta
        gamma = sigma * alpha / (beta2 * beta)
        if sigma > 0:
            lx[p] = delta * lx[p] + gamma * w[j]
        else:
            lx[p] = delta * lx[p]
        beta = beta2
        for q in range(p + 1, lp[j + 1]):
            w1 = w[li[q]]
            w2 = w1 - alpha * lx[q]
            w[li[q]] = w2
            if sigma > 0:
                lx[q] = delta * lx[q] + gamma * w1
            else:
                lx[q] = delta * lx[q] + gamma * w2
        w[j] = 0.0
        j = parent[j]
    return -1


@nb.njit(cache=True)
def _unit_updates(lp, li, lx, parent, positions, scale):
    # sequential updates L L' + scale^2 e_k e_k' for k in positions
    n = parent.shape[0]
    w = np.zeros(n)
    for t in range(positions.shape[0]):
        k = positions[t]
        w[k] = scale
        bad = _updown(lp, li, lx, parent, k, w, 1.0)
        if bad >= 0:
            return bad
        # clear anything left on the path (exact zeros already, kept for safety)
        j = k
        while j != -1:
            w[j] = 0.0
            j = parent[j]
    return -1


@nb.njit(cache=True)
def _logdet(lp, lx):
    s = 0.0
    for j in range(lp.shape[0] - 1):
        s += np.log(lx[lp[j]])
    return 2.0 * s


# ---------------------------------------------------------------------------
# symbolic analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Symbolic:
    """Pattern-only analysis of ``P S P'`` reused across numeric refactorizations."""

    n: int
    perm: np.ndarray
    pinv: np.ndarray
    parent: np.ndarray
    lp: np.ndarray
    cp: np.ndarray
    ci: np.ndarray
    src: np.ndarray  # index into [S.values, 0.0] for each upper entry of PSP'
    diag_pos: np.ndarray  # position of the diagonal of permuted column k in cp/ci
    s_nnz: int
    s_key: str

    @property
    def nnz_l(self):
        return int(self.lp[-1])


def _structure_key(s):
    h = hashlib.blake2b(digest_size=16)
    h.update(np.int64(s.nrows).tobytes())
    h.update(np.ascontiguousarray(s.col_ptr).tobytes())
    h.update(np.ascontiguousarray(s.row_idx).tobytes())
    return h.hexdigest()


_SYMBOLIC_CACHE = OrderedDict()
_SYMBOLIC_CACHE_SIZE = 32


def symbolic_order(s, method="amd", grid=None):
    """Fill-reducing permutation for the symmetric matrix ``s``.

    Parameters
    ----------
    s : SparseMatrix
        Square, structurally symmetric.
    method : {"amd", "nd", "natural"}
        ``"nd"`` needs ``grid=(rows, cols)`` describing a row-major lattice.
    """
    if s.nrows != s.ncols:
        raise ValueError(f"ordering needs a square matrix, got {s.shape}")
    if method == "amd":
        return ordering.amd(s)
    if method == "nd":
        if grid is None:
            raise ValueError("nested dissection needs a grid=(rows, cols) hint")
        return ordering.nested_dissection(s, grid)
    if method == "natural":
        return ordering.natural(s.nrows)
    raise ValueError(f"unknown ordering method {method!r}")


def analyze(s, perm):
    """Symbolic Cholesky analysis of ``s`` under ``perm`` (cached)."""
    n = s.nrows
    if n != s.ncols:
        raise ValueError(f"Cholesky needs a square matrix, got {s.shape}")
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("perm is not a permutation of range(n)")
    skey = _structure_key(s)
    key = (skey, hashlib.blake2b(perm.tobytes(), digest_size=16).hexdigest())
    hit = _SYMBOLIC_CACHE.get(key)
    if hit is not None:
        _SYMBOLIC_CACHE.move_to_end(key)
        return hit

    pinv = ordering.inverse(perm)
    nnz = s.nnz
    rows = np.concatenate([s.row_idx, np.arange(n, dtype=np.int64)])
    cols = np.concatenate([s.col_indices(), np.arange(n, dtype=np.int64)])
    src = np.concatenate([np.arange(nnz, dtype=np.int64), np.full(n, nnz, np.int64)])
    pr, pc = pinv[rows], pinv[cols]
    upper = pr <= pc
    pr, pc, src = pr[upper], pc[upper], src[upper]
    order = np.lexsort((src, pr, pc))
    pr, pc, src = pr[order], pc[order], src[order]
    # drop the padding diagonal where S already stores one
    dup = np.zeros(pr.size, dtype=bool)
    dup[1:] = (pr[1:] == pr[:-1]) & (pc[1:] == pc[:-1])
    pr, pc, src = pr[~dup], pc[~dup], src[~dup]
    cp = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(pc, minlength=n), out=cp[1:])
    diag_pos = np.flatnonzero(pr == pc)
    parent = _etree(n, cp, pr)
    lp = _colcounts(n, cp, pr, parent)
    sym = Symbolic(n, perm, pinv, parent, lp, cp, pr, src, diag_pos, nnz, skey)
    _SYMBOLIC_CACHE[key] = sym
    if len(_SYMBOLIC_CACHE) > _SYMBOLIC_CACHE_SIZE:
        _SYMBOLIC_CACHE.popitem(last=False)
    return sym


# ---------------------------------------------------------------------------
# numeric factor
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """``L L' = P S P'`` with ``perm[k]`` the original index at position ``k``.

    ``lp``/``li``/``lx`` hold the factor on the full symbolic pattern, which
    can contain numerically zero entries; ``L`` gives the canonical sparse
    form.  ``cx`` keeps the permuted upper triangle that was factored so the
    same matrix can be refactored with a diagonal shift.
    """

    symbolic: Symbolic
    lx: np.ndarray
    li: np.ndarray
    logdet: float
    cx: np.ndarray = field(repr=False)

    @property
    def perm(self):
        return self.symbolic.perm

    @property
    def lp(self):
        return self.symbolic.lp

    @property
    def n(self):
        return self.symbolic.n

    @property
    def L(self):
        from .sparse_core import canonicalize

        n = self.n
        cols = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.lp))
        return canonicalize(n, n, self.li, cols, self.lx)

    def diagonal(self):
        return self.lx[self.lp[:-1]]


def _numeric(sym, cx):
    tol = PIVOT_RTOL * max(float(np.max(np.abs(cx[sym.diag_pos]))) if sym.n else 0.0, 0.0)
    li, lx, bad, d = _chol_numeric(sym.n, sym.cp, sym.ci, cx, sym.parent, sym.lp, tol)
    if bad >= 0:
        raise NotPositiveDefinite(sym.perm[bad], d)
    return CholeskyFactor(sym, lx, li, float(_logdet(sym.lp, lx)), cx)


def factor_values(sym, s_values):
    """Numeric factorization of the matrix with ``sym``'s pattern and these values."""
    s_values = np.asarray(s_values, dtype=float)
    if s_values.shape != (sym.s_nnz,):
        raise ValueError("values do not match the analysed pattern")
    cx = np.append(s_values, 0.0)[sym.src]
    return _numeric(sym, cx)


def factor(s, perm=None, method="amd", grid=None):
    """Cholesky factor of the SPD matrix ``s``.

    Raises
    ------
    NotPositiveDefinite
        When a pivot is at or below ``1e-13`` times the largest diagonal
        entry; the exception carries the offending (original) index.
    """
    if perm is None:
        perm = symbolic_order(s, method=method, grid=grid)
    sym = analyze(s, perm)
    return factor_values(sym, s.values)


def solve_spd(f, b):
    """Solve ``S X = B`` given ``f = factor(S)``; ``b`` may be 1-D or 2-D."""
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 1
    b2 = b.reshape(-1, 1) if vec else b
    if b2.shape[0] != f.n:
        raise ValueError(f"dimension mismatch: factor of order {f.n}, rhs {b.shape}")
    x = _solve_kernel(f.lp, f.li, f.lx, f.perm, np.ascontiguousarray(b2))
    return x[:, 0] if vec else x


def rank1_update(f, v, downdate=False):
    """Factor of ``S + v v'`` (or ``S - v v'`` with ``downdate=True``).

    ``v`` is indexed in the permuted domain, i.e. position ``k`` of ``v``
    corresponds to row ``k`` of ``L``.  It may be a dense vector or a
    ``(indices, values)`` pair; its pattern must lie on column ``f0`` of ``L``
    where ``f0`` is its first nonzero, which always holds for a scaled unit
    vector.
    """
    n = f.n
    if isinstance(v, tuple):
        idx = np.asarray(v[0], dtype=np.int64)
        val = np.asarray(v[1], dtype=float)
    else:
        dense = np.asarray(v, dtype=float)
        if dense.shape != (n,):
            raise ValueError(f"update vector has shape {dense.shape}, expected ({n},)")
        idx = np.flatnonzero(dense)
        val = dense[idx]
    keep = val != 0.0
    idx, val = idx[keep], val[keep]
    if idx.size == 0:
        return f
    order = np.argsort(idx)
    idx, val = idx[order], val[order]
    f0 = int(idx[0])
    lp = f.lp
    column = f.li[lp[f0]:lp[f0 + 1]]
    if not np.all(np.isin(idx, column)):
        raise ValueError("update pattern is not contained in the factor pattern")
    lx = f.lx.copy()
    w = np.zeros(n)
    w[idx] = val
    bad = _updown(lp, f.li, lx, f.symbolic.parent, f0, w, -1.0 if downdate else 1.0)
    if bad >= 0:
        raise NotPositiveDefinite(f.perm[bad])
    # keep the stored matrix consistent for later refactorizations (diagonal part only)
    cx = None
    if f.cx is not None and idx.size == 1:
        cx = f.cx.copy()
        cx[f.symbolic.diag_pos[f0]] += (-1.0 if downdate else 1.0) * val[0] ** 2
    return CholeskyFactor(f.symbolic, lx, f.li, float(_logdet(lp, lx)), cx)


def factor_observed_system(f_ata, ata, obs_idx, theta, update_cutoff=UPDATE_CUTOFF, path="auto"):
    """Factor of ``A'A + theta * B_o' B_o`` from the factor of ``A'A``.

    ``B_o' B_o`` is diagonal with ones at ``obs_idx`` (original indices).
    When ``len(obs_idx) / n <= update_cutoff`` the factor is obtained by
    rank-1 updates with ``sqrt(theta) e_i``; otherwise ``A'A + theta D`` is
    refactored with the same permutation.  ``path`` forces either route
    (``"update"`` or ``"refactor"``).

    ``ata`` may be ``None`` when ``f_ata`` was produced by this module, since
    the factor keeps the matrix it factored.
    """
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    sym = f_ata.symbolic
    if ata is not None and (ata.nnz != sym.s_nnz or _structure_key(ata) != sym.s_key):
        raise ValueError("ata does not match the pattern of f_ata")
    obs_idx = np.asarray(obs_idx, dtype=np.int64)
    if theta == 0.0 or obs_idx.size == 0:
        return f_ata
    if path == "auto":
        path = "update" if obs_idx.size <= update_cutoff * sym.n else "refactor"
    positions = sym.pinv[obs_idx]
    if path == "update":
        lx = f_ata.lx.copy()
        bad = _unit_updates(sym.lp, f_ata.li, lx, sym.parent, np.sort(positions), np.sqrt(theta))
        if bad >= 0:
            raise NotPositiveDefinite(sym.perm[bad])
        cx = None
        if f_ata.cx is not None:
            cx = f_ata.cx.copy()
            cx[sym.diag_pos[positions]] += theta
        return CholeskyFactor(sym, lx, f_ata.li, float(_logdet(sym.lp, lx)), cx)
    if path != "refactor":
        raise ValueError(f"unknown path {path!r}")
    if f_ata.cx is None:
        if ata is None:
            raise ValueError("refactorization needs ata when the factor carries no matrix")
        cx = np.append(np.asarray(ata.values, float), 0.0)[sym.src]
    else:
        cx = f_ata.cx.copy()
    cx[sym.diag_pos[positions]] += theta
    return _numeric(sym, cx)
