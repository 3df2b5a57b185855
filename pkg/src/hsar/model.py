"""
H-SEM and H-SAM with additive measurement error.

Both models share ``V = I + theta (A'A)^{-1}`` with ``A = I - rho W`` and
``Sigma = omega V``; they differ only in the mean, ``X beta`` for H-SEM and
``A^{-1} X beta`` for H-SAM.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from . import cholesky
from . import sparse_core as sc
from .errors import MissingDataPresent
from .sparse_core import SparseMatrix

__all__ = [
    "ModelKind",
    "Dataset",
    "Params",
    "SystemStructure",
    "WorkingState",
    "build_A",
    "build_AtA",
    "working_state",
    "xtilde_o",
    "mean_o",
    "complete_loglik",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class ModelKind(enum.Enum):
    HSEM = "hsem"
    HSAM = "hsam"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", ""))
        except ValueError:
            raise ValueError(f"unknown model {value!r}; expected 'hsem' or 'hsam'") from None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Response with missing slots, covariates and the observed/missing split.

    ``y`` carries ``nan`` at missing positions.  ``X`` must already contain
    the intercept column if one is wanted.
    """

    y: np.ndarray
    X: np.ndarray
    mask: np.ndarray
    obs_idx: np.ndarray = field(repr=False)
    mis_idx: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, y, X, mask=None):
        """Build a dataset; ``mask`` (True = observed) defaults to ``isfinite(y)``."""
        y = np.array(y, dtype=float).ravel()
        X = np.array(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.size:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        if mask is None:
            mask = np.isfinite(y)
        else:
            mask = np.array(mask, dtype=bool).ravel()
            if mask.size != y.size:
                raise ValueError("mask and y differ in length")
            if not np.all(np.isfinite(y[mask])):
                raise ValueError("observed responses must be finite")
        y[~mask] = np.nan
        for a in (y, X, mask):
            a.flags.writeable = False
        obs = np.flatnonzero(mask).astype(np.int64)
        mis = np.flatnonzero(~mask).astype(np.int64)
        return cls(y, X, mask, obs, mis)

    @property
    def n(self):
        return self.y.size

    @property
    def n_obs(self):
        return self.obs_idx.size

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def complete(self):
        return self.mis_idx.size == 0

    @property
    def y_o(self):
        return self.y[self.obs_idx]

    @property
    def X_o(self):
        return self.X[self.obs_idx]

    def require_complete(self):
        if not self.complete:
            raise MissingDataPresent(f"{self.mis_idx.size} responses are missing")

    def check_identifiable(self):
        if self.n_obs < self.p + 3:
            raise ValueError(
                f"{self.n_obs} observations cannot identify {self.p} coefficients "
                "plus rho, omega and theta"
            )

    def observed_part(self):
        """The complete dataset made of the observed units only."""
        return Dataset.from_arrays(self.y_o, self.X_o)


@dataclass(frozen=True)
class Params:
    """``beta``, ``rho``, ``omega = sigma2_eps`` and ``theta = sigma2_e / sigma2_eps``."""

    beta: np.ndarray
    rho: float
    omega: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if not self.theta >= 0:
            raise ValueError("theta must be nonnegative")

    @classmethod
    def from_variances(cls, beta, rho, sigma2_eps, sigma2_e):
        return cls(beta, rho, sigma2_eps, sigma2_e / sigma2_eps)

    @property
    def sigma2_eps(self):
        return self.omega

    @property
    def sigma2_e(self):
        return self.theta * self.omega


def _union_pattern(n, parts):
    """Common CSC pattern of several matrices plus their values scattered on it."""
    keys = [p.col_indices() * n + p.row_idx for p in parts]
    union = np.unique(np.concatenate(keys))
    rows, cols = union % n, union // n
    col_ptr = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(cols, minlength=n), out=col_ptr[1:])
    vals = []
    for p, k in zip(parts, keys):
        v = np.zeros(union.size)
        v[np.searchsorted(union, k)] = p.values
        vals.append(v)
    return col_ptr, rows, vals


class SystemStructure:
    """Fixed sparsity patterns of ``A`` and ``A'A`` for a given ``W``.

    ``A'A = I - rho (W + W') + rho^2 W'W`` is kept on the union pattern of
    the three terms so the structure, and hence the symbolic Cholesky
    analysis, does not depend on ``rho``.  Entries that happen to cancel are
    stored as explicit zeros.
    """

    def __init__(self, W):
        n = W.nrows
        self.n = n
        self.W = W
        eye = sc.identity(n)
        Wt = sc.transpose(W)
        self._a_ptr, self._a_idx, (self._a_i, self._a_w) = _union_pattern(n, [eye, W])
        self._s_ptr, self._s_idx, (self._s0, self._s1, self._s2) = _union_pattern(
            n, [eye, sc.add(W, Wt), sc.spgemm(Wt, W)]
        )

    def A(self, rho):
        return SparseMatrix(self.n, self.n, self._a_ptr, self._a_idx, self._a_i - rho * self._a_w)

    def ata_values(self, rho):
        return self._s0 - rho * self._s1 + (rho * rho) * self._s2

    def AtA(self, rho):
        return SparseMatrix(self.n, self.n, self._s_ptr, self._s_idx, self.ata_values(rho))

    def symbolic(self, method="amd", grid=None):
        pattern = self.AtA(0.5)
        return cholesky.analyze(pattern, cholesky.symbolic_order(pattern, method, grid))


def build_A(sw, rho):
    """``I - rho W`` in canonical form."""
    if not sw.contains(rho):
        raise ValueError(f"rho = {rho} outside the admissible interval ({sw.rho_lo}, {sw.rho_hi})")
    return sc.add(sc.identity(sw.n), sw.W, 1.0, -rho)


def build_AtA(sw, rho):
    A = build_A(sw, rho)
    return sc.spgemm(sc.transpose(A), A)


@dataclass(eq=False)
class WorkingState:
    """Per-evaluation scratch for a given ``(rho, theta)``.

    ``F_obs`` is the factor of ``A'A + theta B_o'B_o``; ``mu_o`` and ``r_o``
    are filled in once a ``beta`` is known.
    """

    rho: float
    theta: float
    A: SparseMatrix
    AtA: SparseMatrix
    F_AtA: cholesky.CholeskyFactor
    F_obs: cholesky.CholeskyFactor = None
    Xtilde_o: np.ndarray = None
    mu_o: np.ndarray = None
    r_o: np.ndarray = None

    @property
    def stamp(self):
        return (self.rho, self.theta)


def working_state(sw, rho, theta=0.0, obs_idx=None, structure=None, symbolic=None):
    """Factor ``A'A`` (and the observed system when ``obs_idx`` is given)."""
    if not sw.contains(rho):
        raise ValueError(f"rho = {rho} outside the admissible interval ({sw.rho_lo}, {sw.rho_hi})")
    structure = structure or SystemStructure(sw.W)
    symbolic = symbolic or structure.symbolic()
    ata = structure.AtA(rho)
    f_ata = cholesky.factor_values(symbolic, ata.values)
    st = WorkingState(rho, theta, structure.A(rho), ata, f_ata)
    if obs_idx is not None:
        st.F_obs = cholesky.factor_observed_system(f_ata, None, obs_idx, theta)
    return st


def a_inverse(st, B, Wt_B=None):
    """``A^{-1} B`` computed as ``(A'A)^{-1} A' B`` with the SPD factor.

    ``Wt_B`` may carry a precomputed ``W' B``.
    """
    B = np.asarray(B, dtype=float)
    if Wt_B is None:
        AtB = sc.spmm(sc.transpose(st.A), B.reshape(B.shape[0], -1)).reshape(B.shape)
    else:
        AtB = B - st.rho * Wt_B
    return cholesky.solve_spd(st.F_AtA, AtB)


def xtilde_o(kind, st, X, obs_idx, Wt_X=None):
    """Rows at ``obs_idx`` of ``X`` (H-SEM) or of ``A^{-1} X`` (H-SAM)."""
    kind = ModelKind.parse(kind)
    if kind is ModelKind.HSEM:
        out = sc.select_rows(np.asarray(X, dtype=float), obs_idx)
    else:
        out = sc.select_rows(a_inverse(st, X, Wt_X), obs_idx)
    st.Xtilde_o = out
    return out


def mean_o(kind, beta, st):
    """Observed-slot mean ``Xtilde_o beta``; ``st.Xtilde_o`` must be current."""
    if st.Xtilde_o is None:
        raise ValueError("working state has no Xtilde_o; call xtilde_o first")
    st.mu_o = st.Xtilde_o @ np.asarray(beta, dtype=float)
    return st.mu_o


def complete_loglik(kind, params, sw, y_full, X, structure=None, symbolic=None):
    """Gaussian log-likelihood of a complete response vector.

    ``log|V| = log|A'A + theta I| - log|A'A|`` and the quadratic form uses
    ``V^{-1} = I - theta (A'A + theta I)^{-1}``, so nothing dense of order
    ``n`` is formed.
    """
    kind = ModelKind.parse(kind)
    y = np.asarray(y_full, dtype=float)
    if not np.all(np.isfinite(y)):
        raise MissingDataPresent("complete_loglik needs a fully observed response")
    n = y.size
    everyone = np.arange(n)
    st = working_state(sw, params.rho, params.theta, everyone, structure, symbolic)
    xtilde_o(kind, st, X, everyone)
    r = y - mean_o(kind, params.beta, st)
    st.r_o = r
    if params.theta > 0:
        # V^{-1} r = r - theta (A'A + theta I)^{-1} r = A'A (A'A + theta I)^{-1} r
        quad = r @ sc.spmv(st.AtA, cholesky.solve_spd(st.F_obs, r))
    else:
        quad = r @ r
    logdet_v = st.F_obs.logdet - st.F_AtA.logdet
    return float(
        -0.5 * n * LOG_2PI
        - 0.5 * n * np.log(params.omega)
        - 0.5 * logdet_v
        - 0.5 * quad / params.omega
    )
