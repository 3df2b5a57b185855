"""
Standard errors from the observed information.

``Cov(beta_hat)`` has a closed form.  For ``zeta = (rho, sigma2_eps,
sigma2_e)`` the information is the central-difference Hessian of the
negative marginal log-likelihood with ``beta`` held at ``beta_hat``.  Under
H-SEM the two blocks are asymptotically independent; under H-SAM the mean
depends on ``rho`` and the ``(beta, rho)`` cross block is added analytically.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import sparse_core as sc
from .errors import HSARError, NonFiniteLikelihood, SingularInformation
from .model import ModelKind

__all__ = [
    "StdErrors",
    "fd_hessian",
    "cov_beta",
    "observed_info_zeta",
    "cross_beta_rho",
    "standard_errors",
    "FD_STEP",
]

FD_STEP = 1e-4
_STEP_FLOOR = 1e-3
_MAX_HALVINGS = 8
ZETA_NAMES = ("rho", "sigma2_eps", "sigma2_e")


@dataclass
class StdErrors:
    """Standard errors and the information they come from.

    ``cov`` is the covariance of ``(beta, rho, sigma2_eps, sigma2_e)``; under
    the block treatment its off-diagonal ``beta``/``zeta`` block is zero.
    """

    se_beta: np.ndarray
    se_rho: float
    se_sigma2_eps: float
    se_sigma2_e: float
    info_zeta: np.ndarray
    cov: np.ndarray
    fd_step: float
    cross_beta_rho: np.ndarray = None
    info_pd: bool = True
    joint: bool = False
    eigenvalues: np.ndarray = None

    @property
    def se_zeta(self):
        return np.array([self.se_rho, self.se_sigma2_eps, self.se_sigma2_e])


def fd_hessian(func, x, rel_step=FD_STEP, floor=_STEP_FLOOR, max_halvings=_MAX_HALVINGS):
    """Central-difference Hessian of ``func`` at ``x``, symmetrized.

    Steps are ``rel_step * max(|x_i|, floor)``.  When some stencil point is
    outside the domain (``func`` raises or returns a non-finite value) every
    step is halved, at most ``max_halvings`` times.

    Returns
    -------
    H : ndarray
    h : ndarray
        The steps actually used.
    """
    x = np.asarray(x, dtype=float)
    k = x.size
    h = rel_step * np.maximum(np.abs(x), floor)

    def f(point):
        try:
            v = float(func(point))
        except HSARError:
            return math.nan
        return v

    for _ in range(max_halvings + 1):
        f0 = f(x)
        if not math.isfinite(f0):
            raise NonFiniteLikelihood("the likelihood is not finite at the expansion point")
        H = np.empty((k, k))
        ok = True
        for i in range(k):
            ei = np.zeros(k)
            ei[i] = h[i]
            fp, fm = f(x + ei), f(x - ei)
            H[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
            for j in range(i):
                ej = np.zeros(k)
                ej[j] = h[j]
                q = f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
                H[i, j] = H[j, i] = q / (4.0 * h[i] * h[j])
            if not np.all(np.isfinite(H[i, : i + 1])):
                ok = False
                break
        if ok:
            return 0.5 * (H + H.T), h
        h = 0.5 * h
    raise NonFiniteLikelihood(
        f"finite-difference stencil leaves the parameter domain after {max_halvings} halvings"
    )


def _problem(kind, fit, dataset, sw, problem):
    if problem is not None:
        return problem
    from .estimator import Problem

    return Problem(kind, dataset, sw)


def cov_beta(kind, fit, dataset, sw, problem=None):
    """``omega_hat (X~' V_oo^{-1} X~)^{-1}`` at the fitted ``(rho, theta)``."""
    pr = _problem(kind, fit, dataset, sw, problem)
    val = pr.lc_param(fit.params.rho, fit.params.theta)
    return fit.params.omega * np.linalg.inv(val.xtvx)


def _zeta(fit):
    p = fit.params
    return np.array([p.rho, p.sigma2_eps, p.sigma2_e])


def observed_info_zeta(kind, fit, dataset, sw, fd_step=FD_STEP, func=None, problem=None):
    """Observed information for ``zeta = (rho, sigma2_eps, sigma2_e)``.

    Parameters
    ----------
    func : callable, optional
        Replaces the negative log-likelihood as a function of ``zeta``; the
        Hessian is then taken of ``func`` at the fitted ``zeta``.

    Returns
    -------
    ndarray
        Symmetric ``3 x 3`` Hessian of ``-L_o`` with ``beta`` fixed at
        ``beta_hat``.
    """
    return _info_zeta(kind, fit, dataset, sw, fd_step, func, problem)[0]


def _info_zeta(kind, fit, dataset, sw, fd_step, func, problem):
    if func is None:
        pr = _problem(kind, fit, dataset, sw, problem)
        beta = fit.params.beta

        def func(z):
            rho, s2eps, s2e = z
            if not (s2eps > 0 and s2e >= 0):
                raise NonFiniteLikelihood("variance outside its domain")
            return -pr.loglik(rho, s2eps, s2e / s2eps, beta)

    return fd_hessian(func, _zeta(fit), fd_step)


def cross_beta_rho(kind, fit, dataset, sw, problem=None):
    """Information between ``beta`` and ``rho`` under H-SAM.

    ``(1/sigma2_eps) X~_o' V_oo^{-1} (A^{-1} W A^{-1} X)_o beta_hat``, with
    ``A^{-1} W A^{-1} X`` obtained by two solves through the factor of
    ``A'A``.  Zero under H-SEM.
    """
    kind = ModelKind.parse(kind)
    p = fit.params
    if kind is ModelKind.HSEM:
        return np.zeros(p.beta.size)
    pr = _problem(kind, fit, dataset, sw, problem)
    f_ata = pr.factor_ata(p.rho)
    m = pr.a_inverse(f_ata, p.rho, pr.X, pr.Wt_X)
    d = pr.a_inverse(f_ata, p.rho, sc.spmm(pr.sw.W, m))
    xt, d_o = m[pr.obs], d[pr.obs]
    vd = d_o
    if p.theta > 0:
        vd = pr.vinv_apply(pr.factor_obs(f_ata, p.theta), p.theta, d_o, p.rho)
    return (xt.T @ (vd @ p.beta)) / p.omega


def _invert(info, what):
    try:
        eig = np.linalg.eigvalsh(info)
    except np.linalg.LinAlgError:
        raise SingularInformation(f"{what} has no eigen-decomposition") from None
    if not np.all(np.isfinite(eig)) or np.max(np.abs(eig)) == 0.0:
        raise SingularInformation(f"{what} is degenerate", eig)
    if np.min(np.abs(eig)) <= 1e-14 * np.max(np.abs(eig)):
        raise SingularInformation(f"{what} is singular", eig)
    return np.linalg.inv(info), eig


def _sqrt_diag(cov):
    d = np.diag(cov)
    with np.errstate(invalid="ignore"):
        return np.where(d > 0, np.sqrt(np.abs(d)), np.nan)


def standard_errors(kind, fit, dataset, sw, problem=None, joint=True, fd_step=FD_STEP):
    """Standard errors of ``beta`` and ``zeta`` at a fitted optimum.

    ``dataset`` and ``sw`` must be the ones the likelihood was maximized
    on.  Under H-SAM with ``joint=True`` the full ``(beta, zeta)``
    information including the ``beta``/``rho`` cross block is inverted;
    otherwise the blocks are inverted separately.  An information matrix
    that is not positive definite produces a warning and ``nan`` standard
    errors for the affected block.

    Raises
    ------
    SingularInformation
        When an information matrix cannot be inverted.
    """
    kind = ModelKind.parse(kind)
    pr = _problem(kind, fit, dataset, sw, problem)
    p = fit.params
    k = p.beta.size
    val = pr.lc_param(p.rho, p.theta)
    info_beta = val.xtvx / p.omega
    info_z, h = _info_zeta(kind, fit, dataset, sw, fd_step, None, pr)
    cross = None
    use_joint = joint and kind is ModelKind.HSAM
    if kind is ModelKind.HSAM:
        cross = cross_beta_rho(kind, fit, dataset, sw, problem=pr)
    if use_joint:
        info = np.zeros((k + 3, k + 3))
        info[:k, :k] = info_beta
        info[k:, k:] = info_z
        info[:k, k] = info[k, :k] = cross
        cov, eig = _invert(info, "joint information")
    else:
        cov = np.zeros((k + 3, k + 3))
        cov[:k, :k] = np.linalg.inv(info_beta)
        cov[k:, k:], eig = _invert(info_z, "zeta information")
    pd = bool(eig.min() > 0)
    se = _sqrt_diag(cov)
    if not pd:
        warnings.warn(
            f"information matrix is not positive definite (eigenvalues {eig}); "
            "zeta standard errors set to nan",
            stacklevel=2,
        )
        se[k:] = np.nan
        if use_joint:
            se[:k] = np.sqrt(np.diag(np.linalg.inv(info_beta)))
    return StdErrors(
        se_beta=se[:k],
        se_rho=float(se[k]),
        se_sigma2_eps=float(se[k + 1]),
        se_sigma2_e=float(se[k + 2]),
        info_zeta=info_z,
        cov=cov,
        fd_step=float(fd_step),
        cross_beta_rho=cross,
        info_pd=pd,
        joint=use_joint,
        eigenvalues=eig,
    )
