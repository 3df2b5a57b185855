"""
Marginal maximum likelihood for H-SEM / H-SAM with missing responses.

``beta`` and ``omega`` are profiled out in closed form, leaving the
concentrated log-likelihood ``L_c(rho, theta)`` which is maximized
numerically.  Two interchangeable routes evaluate ``L_c``:

* the sparse route (MML-P) never forms ``V_oo``; its determinant comes from
  ``log|A'A + theta B'B| - log|A'A|`` and its inverse from the Woodbury form
  ``V_oo^{-1} = I - theta B (A'A + theta B'B)^{-1} B'``;
* the direct route (MML-D) assembles ``V_oo = I + theta [(A'A)^{-1}]_oo``
  densely and factors it.

OML (observed units only, with their own weight matrix) and FML (complete
data) are the baselines.
"""

import enum
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from . import cholesky
from . import sparse_core as sc
from . import weights as wts
from .errors import (
    DirectPathRefused,
    HSARError,
    NonFiniteLikelihood,
    NotConverged,
    RankDeficientDesign,
)
from .model import LOG_2PI, ModelKind, Params, SystemStructure

__all__ = [
    "Method",
    "FitOptions",
    "FitResult",
    "LcValue",
    "Problem",
    "lc_param",
    "lc_direct",
    "lc_full",
    "fit",
    "fit_oml",
    "fit_fml",
    "BOUNDARY_THETA",
    "DIRECT_CAP",
]

BOUNDARY_THETA = 1e-8
DIRECT_CAP = 4000
_DIRECT_BATCH = 256
_RCOND_MIN = 1e-13


class Method(enum.Enum):
    MML_P = "mml-p"
    MML_D = "mml-d"
    OML = "oml"
    FML = "fml"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        text = str(value).lower().replace("_", "-")
        try:
            return cls(text)
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown method {value!r}; expected one of {choices}") from None


@dataclass(frozen=True)
class FitOptions:
    """Estimation settings.

    Parameters
    ----------
    method : Method or str
    tol : float
        Convergence tolerance of the outer optimizer.
    max_evals : int
        Likelihood-evaluation budget per optimizer run.
    optimizer : {"nelder_mead", "golden_section_nested"}
    rho_box, theta_box : tuple, optional
        Override the admissible ``rho`` interval or bound ``theta``.
    se : bool
        Compute standard errors after fitting.
    se_joint : bool
        For H-SAM, invert the joint ``(beta, zeta)`` information (default)
        rather than treating the two blocks separately.
    direct_cap : int
        Largest ``n_o`` the direct route accepts.
    ordering : {"amd", "nd", "natural"}
        Fill-reducing ordering for ``A'A``; ``"nd"`` needs a grid hint.
    update_cutoff : float
        Observed fraction up to which the observed-system factor is built
        by rank-1 updates instead of refactorization.
    strict : bool
        Raise :class:`NotConverged` instead of returning an unconverged fit.
    """

    method: Method = Method.MML_P
    tol: float = 1e-8
    max_evals: int = 500
    optimizer: str = "nelder_mead"
    rho_box: tuple = None
    theta_box: tuple = None
    se: bool = False
    se_joint: bool = True
    direct_cap: int = DIRECT_CAP
    ordering: str = "amd"
    update_cutoff: float = cholesky.UPDATE_CUTOFF
    strict: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_evals < 1:
            raise ValueError("max_evals must be at least 1")
        if self.optimizer not in ("nelder_mead", "golden_section_nested"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class FitResult:
    """Estimates and diagnostics of one fit."""

    kind: ModelKind
    method: Method
    params: Params
    loglik: float
    n_evals: int
    converged: bool
    boundary: bool = False
    se: object = None
    timing: dict = field(default_factory=dict)
    trace: np.ndarray = field(default=None, repr=False)
    message: str = ""
    n_obs: int = 0

    @property
    def sigma2_eps(self):
        return self.params.sigma2_eps

    @property
    def sigma2_e(self):
        return self.params.sigma2_e

    @property
    def beta(self):
        return self.params.beta

    @property
    def rho(self):
        return self.params.rho

    @property
    def theta(self):
        return self.params.theta

    @property
    def omega(self):
        return self.params.omega


@dataclass(frozen=True)
class LcValue:
    """Concentrated log-likelihood at ``(rho, theta)`` with its profiled terms."""

    lc: float
    beta: np.ndarray
    omega: float
    logdet_v: float
    xtvx: np.ndarray

    def __iter__(self):
        return iter((self.lc, self.beta, self.omega))


def _gls(xt, z, vz, n_o, logdet_v):
    """Profile ``beta`` and ``omega`` given ``Z = [X~, y]`` and ``V^{-1} Z``."""
    p = xt.shape[1]
    xtvx = xt.T @ vz[:, :p]
    xtvx = 0.5 * (xtvx + xtvx.T)
    try:
        c, low = scipy.linalg.cho_factor(xtvx)
    except np.linalg.LinAlgError:
        raise RankDeficientDesign("X~' V^-1 X~ is not positive definite") from None
    d = np.diag(c)
    if d.min() ** 2 <= _RCOND_MIN * d.max() ** 2:
        raise RankDeficientDesign("X~' V^-1 X~ is numerically singular")
    beta = scipy.linalg.cho_solve((c, low), xt.T @ vz[:, p])
    r = z[:, p] - xt @ beta
    vr = vz[:, p] - vz[:, :p] @ beta
    omega = float(r @ vr) / n_o
    if not (omega > 0 and math.isfinite(omega) and math.isfinite(logdet_v)):
        raise NonFiniteLikelihood(f"omega_hat = {omega}, log|V_oo| = {logdet_v}")
    lc = -0.5 * n_o * (LOG_2PI + 1.0 + math.log(omega)) - 0.5 * logdet_v
    return LcValue(lc, beta, omega, logdet_v, xtvx)


class Problem:
    """Data, weights and the precomputed sparse structure for repeated evaluation.

    The symbolic Cholesky analysis of ``A'A`` and ``W'X`` are computed once;
    every evaluation then costs a numeric factorization of ``A'A``, one of
    the observed system and a few triangular solves.
    """

    def __init__(self, kind, dataset, sw, ordering="amd", update_cutoff=cholesky.UPDATE_CUTOFF):
        if dataset.n != sw.n:
            raise ValueError(f"dataset has {dataset.n} units but W is {sw.n} x {sw.n}")
        self.kind = ModelKind.parse(kind)
        self.data = dataset
        self.sw = sw
        self.n = dataset.n
        self.obs = dataset.obs_idx
        self.n_o = dataset.n_obs
        self.y_o = dataset.y_o
        self.X = dataset.X
        self.update_cutoff = update_cutoff
        self.structure = SystemStructure(sw.W)
        grid = sw.grid_hint if ordering == "nd" else None
        self.symbolic = self.structure.symbolic(ordering, grid)
        self.Wt_X = sc.spmm(sc.transpose(sw.W), self.X) if self.kind is ModelKind.HSAM else None

    # -- building blocks ---------------------------------------------------

    def check_rho(self, rho):
        if not self.sw.contains(rho):
            raise NonFiniteLikelihood(
                f"rho = {rho} outside ({self.sw.rho_lo}, {self.sw.rho_hi})"
            )

    def factor_ata(self, rho):
        self.check_rho(rho)
        return cholesky.factor_values(self.symbolic, self.structure.ata_values(rho))

    def a_inverse(self, f_ata, rho, B, Wt_B=None):
        """``A^{-1} B`` through ``(A'A)^{-1} A' B``."""
        if Wt_B is None:
            Wt_B = sc.spmm(sc.transpose(self.sw.W), B)
        return cholesky.solve_spd(f_ata, B - rho * Wt_B)

    def xtilde_o(self, f_ata, rho):
        if self.kind is ModelKind.HSEM:
            return self.X[self.obs]
        return self.a_inverse(f_ata, rho, self.X, self.Wt_X)[self.obs]

    def factor_obs(self, f_ata, theta):
        return cholesky.factor_observed_system(
            f_ata, None, self.obs, theta, update_cutoff=self.update_cutoff
        )

    def vinv_apply(self, f_obs, theta, Z, rho):
        """``V_oo^{-1} Z`` by the Woodbury form.

        With ``x = (A'A + theta B'B)^{-1} B'Z`` the Woodbury product
        ``Z - theta x_o`` equals ``(A'A x)_o``; the latter is used because
        the subtraction cancels badly once ``theta`` is large.
        """
        if theta == 0.0:
            return Z.copy()
        rhs = np.zeros((self.n, Z.shape[1]))
        rhs[self.obs] = Z
        x = cholesky.solve_spd(f_obs, rhs)
        return sc.spmm(self.structure.AtA(rho), x)[self.obs]

    def _check_theta(self, theta):
        if not (theta >= 0 and math.isfinite(theta)):
            raise NonFiniteLikelihood(f"theta = {theta} is not a valid variance ratio")

    # -- concentrated likelihood -------------------------------------------

    def lc_param(self, rho, theta):
        """Sparse route: ``L_c`` without forming ``V_oo`` or ``(A'A)^{-1}``."""
        self._check_theta(theta)
        f_ata = self.factor_ata(rho)
        xt = self.xtilde_o(f_ata, rho)
        z = np.column_stack([xt, self.y_o])
        if theta == 0.0:
            return _gls(xt, z, z, self.n_o, 0.0)
        f_obs = self.factor_obs(f_ata, theta)
        vz = self.vinv_apply(f_obs, theta, z, rho)
        return _gls(xt, z, vz, self.n_o, f_obs.logdet - f_ata.logdet)

    def ata_inverse_oo(self, f_ata, batch=_DIRECT_BATCH):
        """Dense ``[(A'A)^{-1}]_oo`` by batched column solves."""
        n, obs = self.n, self.obs
        out = np.empty((self.n_o, self.n_o))
        for start in range(0, self.n_o, batch):
            cols = obs[start:start + batch]
            rhs = np.zeros((n, cols.size))
            rhs[cols, np.arange(cols.size)] = 1.0
            out[:, start:start + cols.size] = cholesky.solve_spd(f_ata, rhs)[obs]
        return 0.5 * (out + out.T)

    def v_oo_dense(self, rho, theta, f_ata=None):
        f_ata = f_ata if f_ata is not None else self.factor_ata(rho)
        v = theta * self.ata_inverse_oo(f_ata)
        v[np.diag_indices_from(v)] += 1.0
        return v

    def lc_direct(self, rho, theta, direct_cap=DIRECT_CAP):
        """Direct route: dense ``V_oo`` and its Cholesky factor."""
        if self.n_o > direct_cap:
            raise DirectPathRefused(
                f"the direct route would factor a dense {self.n_o} x {self.n_o} matrix; "
                f"the cap is {direct_cap} observations (raise direct_cap or use mml-p)"
            )
        self._check_theta(theta)
        f_ata = self.factor_ata(rho)
        xt = self.xtilde_o(f_ata, rho)
        z = np.column_stack([xt, self.y_o])
        if theta == 0.0:
            return _gls(xt, z, z, self.n_o, 0.0)
        v = self.v_oo_dense(rho, theta, f_ata)
        try:
            c = scipy.linalg.cholesky(v, lower=True)
        except np.linalg.LinAlgError:
            raise NonFiniteLikelihood("V_oo is not positive definite") from None
        vz = scipy.linalg.cho_solve((c, True), z)
        return _gls(xt, z, vz, self.n_o, 2.0 * float(np.sum(np.log(np.diag(c)))))

    def lc_full(self, rho, theta):
        """Complete-data route: ``V^{-1} = I - theta (A'A + theta I)^{-1}``."""
        self.data.require_complete()
        self._check_theta(theta)
        f_ata = self.factor_ata(rho)
        xt = self.X if self.kind is ModelKind.HSEM else self.a_inverse(f_ata, rho, self.X, self.Wt_X)
        z = np.column_stack([xt, self.data.y])
        if theta == 0.0:
            return _gls(xt, z, z, self.n, 0.0)
        f_full = cholesky.factor_observed_system(f_ata, None, self.obs, theta, path="refactor")
        vz = sc.spmm(self.structure.AtA(rho), cholesky.solve_spd(f_full, z))
        return _gls(xt, z, vz, self.n, f_full.logdet - f_ata.logdet)

    # -- unconcentrated likelihood -----------------------------------------

    def loglik(self, rho, omega, theta, beta):
        """Marginal log-likelihood of ``y_o`` at arbitrary parameters."""
        self._check_theta(theta)
        if not omega > 0:
            raise NonFiniteLikelihood(f"omega = {omega} must be positive")
        f_ata = self.factor_ata(rho)
        xt = self.xtilde_o(f_ata, rho)
        r = self.y_o - xt @ np.asarray(beta, dtype=float)
        if theta == 0.0:
            quad, logdet_v = float(r @ r), 0.0
        else:
            f_obs = self.factor_obs(f_ata, theta)
            quad = float(r @ self.vinv_apply(f_obs, theta, r[:, None], rho)[:, 0])
            logdet_v = f_obs.logdet - f_ata.logdet
        return -0.5 * (self.n_o * (LOG_2PI + math.log(omega)) + logdet_v + quad / omega)


def _problem(kind, dataset, sw, problem, **kw):
    return problem if problem is not None else Problem(kind, dataset, sw, **kw)


def lc_param(kind, rho, theta, dataset, sw, problem=None):
    """Concentrated log-likelihood by the sparse route.

    Returns
    -------
    LcValue
        Unpacks as ``(Lc, beta_hat, omega_hat)``.
    """
    return _problem(kind, dataset, sw, problem).lc_param(rho, theta)


def lc_direct(kind, rho, theta, dataset, sw, problem=None, direct_cap=DIRECT_CAP):
    """Concentrated log-likelihood by the dense route (refuses ``n_o > direct_cap``)."""
    if dataset.n_obs > direct_cap:
        raise DirectPathRefused(
            f"{dataset.n_obs} observations exceed the direct-route cap of {direct_cap}"
        )
    return _problem(kind, dataset, sw, problem).lc_direct(rho, theta, direct_cap)


def lc_full(kind, rho, theta, dataset, sw, problem=None):
    """Concentrated complete-data log-likelihood."""
    dataset.require_complete()
    return _problem(kind, dataset, sw, problem).lc_full(rho, theta)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


class _Coordinates:
    """Map between ``(rho, theta)`` and unconstrained ``(a, b)``."""

    def __init__(self, rho_box, theta_box):
        self.lo, self.hi = rho_box
        self.theta_box = theta_box

    def to_params(self, u):
        a, b = float(u[0]), float(u[1])
        if a >= 0:
            s = 1.0 / (1.0 + math.exp(-a))
        else:
            e = math.exp(a)
            s = e / (1.0 + e)
        rho = self.lo + (self.hi - self.lo) * s
        theta = math.exp(b) if b < 700 else math.inf
        return rho, theta

    def to_internal(self, rho, theta):
        s = (rho - self.lo) / (self.hi - self.lo)
        s = min(max(s, 1e-12), 1 - 1e-12)
        return np.array([math.log(s / (1 - s)), math.log(theta)])


class _Objective:
    """Negated ``L_c`` in internal coordinates with best-so-far bookkeeping."""

    def __init__(self, evaluate, coords, budget):
        self.evaluate = evaluate
        self.coords = coords
        self.budget = budget
        self.n_evals = 0
        self.best = -math.inf
        self.best_point = None
        self.trace = []

    def value(self, rho, theta):
        self.n_evals += 1
        tb = self.coords.theta_box
        if tb is not None and not (tb[0] <= theta <= tb[1]):
            lc = -math.inf
        else:
            try:
                lc = self.evaluate(rho, theta).lc
            except HSARError:
                lc = -math.inf
        if lc > self.best:
            self.best = lc
            self.best_point = (rho, theta)
        self.trace.append(self.best)
        return lc

    def __call__(self, u):
        rho, theta = self.coords.to_params(u)
        lc = self.value(rho, theta)
        return -lc if math.isfinite(lc) else math.inf


def _nelder_mead(obj, start, tol, max_evals):
    u0 = obj.coords.to_internal(*start)
    simplex = np.array([u0, u0 + [0.5, 0.0], u0 + [0.0, 0.5]])
    res = minimize(
        obj,
        u0,
        method="Nelder-Mead",
        options={
            "xatol": tol,
            "fatol": tol,
            "maxfev": max_evals,
            "initial_simplex": simplex,
        },
    )
    return res.status == 0


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden(f, lo, hi, xtol, budget):
    """Maximize a unimodal ``f`` on ``[lo, hi]``; returns ``(x, fx, converged)``."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    used = 2
    while b - a > xtol:
        if used >= budget:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
        used += 1
    x, fx = (c, fc) if fc >= fd else (d, fd)
    return x, fx, b - a <= xtol


_LOG_THETA_RANGE = (math.log(1e-10), math.log(1e6))


def _golden_nested(obj, tol, max_evals):
    """Golden section over ``rho`` of the profile maximized by golden section in ``log theta``.

    A function tolerance ``tol`` resolves the argument only to about
    ``sqrt(tol)``, which is therefore the interval tolerance used here.
    ``max_evals`` caps the number of outer steps.
    """
    xtol = math.sqrt(tol)
    lo, hi = obj.coords.lo, obj.coords.hi
    tlo, thi = _LOG_THETA_RANGE
    if obj.coords.theta_box is not None:
        tlo = math.log(max(obj.coords.theta_box[0], 1e-300))
        thi = math.log(obj.coords.theta_box[1])
    inner_ok = [True]

    def profile(rho):
        _, val, ok = _golden(lambda b: obj.value(rho, math.exp(b)), tlo, thi, xtol, 10**6)
        inner_ok[0] &= ok
        return val

    _, _, ok = _golden(profile, lo, hi, xtol * (hi - lo), max_evals)
    return ok and inner_ok[0]


def _maximize(evaluate, coords, options):
    obj = _Objective(evaluate, coords, options.max_evals)
    if options.optimizer == "golden_section_nested":
        converged = _golden_nested(obj, options.tol, options.max_evals)
        message = "golden section" + ("" if converged else " stopped before tolerance")
        return obj, converged, message
    start = (min(max(0.0, coords.lo), coords.hi), 1.0)
    if coords.theta_box is not None:
        start = (start[0], min(max(1.0, coords.theta_box[0]), coords.theta_box[1]))
    converged = _nelder_mead(obj, start, options.tol, options.max_evals)
    message = "converged"
    if not converged:
        restart = (0.5 * coords.hi, 0.1)
        if coords.theta_box is not None:
            restart = (restart[0], min(max(0.1, coords.theta_box[0]), coords.theta_box[1]))
        converged = _nelder_mead(obj, restart, options.tol, options.max_evals)
        message = "converged after restart" if converged else "evaluation budget exhausted"
    return obj, converged, message


def _fit_problem(problem, evaluate, options, method):
    t0 = time.perf_counter()
    sw = problem.sw
    rho_box = options.rho_box or (sw.rho_lo, sw.rho_hi)
    coords = _Coordinates(rho_box, options.theta_box)
    obj, converged, message = _maximize(evaluate, coords, options)
    if obj.best_point is None:
        raise NonFiniteLikelihood("the likelihood was not finite at any trial point")
    rho, theta = obj.best_point
    best = evaluate(rho, theta)
    n_fit = problem.n if method is Method.FML else problem.n_o
    params = Params(best.beta, rho, best.omega, theta)
    result = FitResult(
        kind=problem.kind,
        method=method,
        params=params,
        loglik=best.lc,
        n_evals=obj.n_evals,
        converged=converged,
        boundary=theta < BOUNDARY_THETA,
        trace=np.asarray(obj.trace),
        message=message,
        n_obs=n_fit,
    )
    result.timing["estimation"] = time.perf_counter() - t0
    if options.se:
        from .inference import standard_errors

        t1 = time.perf_counter()
        try:
            result.se = standard_errors(
                problem.kind, result, problem.data, sw, problem=problem, joint=options.se_joint
            )
        except HSARError as exc:
            warnings.warn(f"standard errors unavailable: {exc}", stacklevel=3)
        result.timing["se"] = time.perf_counter() - t1
    if options.strict and not converged:
        raise NotConverged(result)
    return result


def fit(kind, dataset, sw, options=None, problem=None):
    """Maximize the concentrated marginal log-likelihood over ``(rho, theta)``.

    ``rho`` is searched through a scaled logistic map onto the admissible
    interval and ``theta`` through ``exp``; the optimizer starts at
    ``(rho, theta) = (0, 1)`` and restarts once from ``(rho_hi / 2, 0.1)``
    if the evaluation budget runs out.

    Returns
    -------
    FitResult
        ``converged`` is False (and the best point found is reported) when
        both optimizer runs exhaust their budget.
    """
    options = options or FitOptions()
    method = options.method
    if method is Method.OML:
        return fit_oml(kind, dataset, sw, options)
    if method is Method.FML:
        return fit_fml(kind, dataset, sw, options)
    dataset.check_identifiable()
    problem = _problem(
        kind, dataset, sw, problem, ordering=options.ordering, update_cutoff=options.update_cutoff
    )
    if method is Method.MML_D:
        if dataset.n_obs > options.direct_cap:
            raise DirectPathRefused(
                f"{dataset.n_obs} observations exceed the direct-route cap of "
                f"{options.direct_cap}; use --method mml-p or raise the cap"
            )

        def evaluate(rho, theta):
            return problem.lc_direct(rho, theta, options.direct_cap)
    else:
        evaluate = problem.lc_param
    return _fit_problem(problem, evaluate, options, method)


def fit_fml(kind, dataset, sw, options=None):
    """Complete-data maximum likelihood; refuses data with missing responses."""
    options = replace(options or FitOptions(), method=Method.FML)
    dataset.require_complete()
    dataset.check_identifiable()
    problem = Problem(kind, dataset, sw, ordering=options.ordering)
    return _fit_problem(problem, problem.lc_full, options, Method.FML)


def observed_weights(sw, obs_idx):
    """Weights among observed units only, re-normalized when ``sw`` is row-normalized."""
    w_oo = sc.select_submatrix(sw.W, obs_idx)
    if sw.normalization == "row":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sub = wts.row_normalize(w_oo)
        if sub.has_islands:
            warnings.warn(
                "observed-only weight matrix has units without observed neighbours",
                stacklevel=3,
            )
        return sub
    return wts.from_matrix(w_oo, normalize="none")


def fit_oml(kind, dataset, sw, options=None):
    """Baseline that drops missing units and fits the complete-data model to the rest."""
    options = replace(options or FitOptions(), method=Method.OML)
    dataset.check_identifiable()
    sub = dataset.observed_part()
    sw_o = observed_weights(sw, dataset.obs_idx)
    # the observed units no longer form a lattice, so nested dissection does not apply
    ordering = "amd" if options.ordering == "nd" else options.ordering
    problem = Problem(kind, sub, sw_o, ordering=ordering)
    return _fit_problem(problem, problem.lc_full, options, Method.OML)
