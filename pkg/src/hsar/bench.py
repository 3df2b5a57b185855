"""
Empirical complexity: time a kernel over lattice sizes and fit
``log t = log b + alpha log n`` by least squares.
"""

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import cholesky
from .estimator import FitOptions, Problem, fit
from .simulate import SimConfig, simulate_one

__all__ = ["BenchResult", "bench_kernel", "KERNELS", "default_reps", "fit_power_law"]

KERNELS = (
    "chol_AtA",
    "solve_fb",
    "direct_inverse",
    "lc_param_eval",
    "lc_direct_eval",
    "full_fit_P",
    "full_fit_D",
)
RHO = 0.8
THETA = 0.5
# dense n_o x n_o work beyond this many bytes is skipped
DENSE_BYTES_LIMIT = 2 * 1024**3


@dataclass
class BenchResult:
    """Mean time per size and the fitted power law ``t = b * n**alpha``."""

    kernel: str
    sizes: list
    times: list
    sds: list
    reps: list
    alpha: float
    b: float
    r_squared: float
    skipped: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "kernel": self.kernel,
            "sizes": list(self.sizes),
            "times": list(self.times),
            "sds": list(self.sds),
            "reps": list(self.reps),
            "alpha": self.alpha,
            "b": self.b,
            "r_squared": self.r_squared,
            "skipped": {str(k): v for k, v in self.skipped.items()},
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "mean_time", "sd", "reps"])
            for row in zip(self.sizes, self.times, self.sds, self.reps):
                w.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def fit_power_law(sizes, times):
    """Least-squares ``(alpha, b, r_squared)`` of ``log t`` on ``log n``."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    if x.size < 2:
        return math.nan, math.nan, math.nan
    alpha, logb = np.polyfit(x, y, 1)
    resid = y - (alpha * x + logb)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(alpha), float(math.exp(logb)), r2


def default_reps(n):
    """20 repetitions at small ``n`` tapering to 5 at large ``n``."""
    if n <= 1000:
        return 20
    if n >= 10000:
        return 5
    return int(round(20 - 15 * math.log(n / 1000) / math.log(10)))


def _side(n):
    k = int(round(math.sqrt(n)))
    if k * k != n:
        raise ValueError(f"size {n} is not a square lattice")
    return k


class _Setup:
    """Data and factors for one size, built outside the timed region."""

    def __init__(self, kernel, n, missing_frac, kind, seed, direct_cap):
        k = _side(n)
        cfg = SimConfig(kind=kind, grid=(k, k), rho=RHO, sigma2_eps=2.0,
                        sigma2_e=THETA * 2.0, missing_frac=missing_frac,
                        n_replicates=1, seed=seed)
        self.sw = cfg.weights()
        self.data = simulate_one(cfg, 0, self.sw).dataset
        self.kind = cfg.kind
        self.direct_cap = direct_cap
        self.n_o = self.data.n_obs
        if kernel in ("direct_inverse", "lc_direct_eval", "full_fit_D"):
            need = 8 * self.n_o * self.n_o * 2
            if need > DENSE_BYTES_LIMIT:
                raise MemoryError(
                    f"dense {self.n_o} x {self.n_o} work needs about {need / 1e9:.1f} GB"
                )
        self.problem = Problem(self.kind, self.data, self.sw)
        self.f_ata = self.problem.factor_ata(RHO)
        self.f_obs = self.problem.factor_obs(self.f_ata, THETA)
        self.rhs = np.zeros((n, 3))
        self.rhs[self.data.obs_idx] = np.random.default_rng(seed).standard_normal((self.n_o, 3))

    def runner(self, kernel):
        pr = self.problem
        if kernel == "chol_AtA":
            values = pr.structure.ata_values(RHO)
            return lambda: cholesky.factor_values(pr.symbolic, values)
        if kernel == "solve_fb":
            return lambda: cholesky.solve_spd(self.f_obs, self.rhs)
        if kernel == "direct_inverse":
            return lambda: pr.v_oo_dense(RHO, THETA, self.f_ata)
        if kernel == "lc_param_eval":
            return lambda: pr.lc_param(RHO, THETA)
        if kernel == "lc_direct_eval":
            return lambda: pr.lc_direct(RHO, THETA, direct_cap=max(self.direct_cap, self.n_o))
        opts = {
            "full_fit_P": FitOptions(method="mml-p"),
            "full_fit_D": FitOptions(method="mml-d", direct_cap=max(self.direct_cap, self.n_o)),
        }[kernel]
        return lambda: fit(self.kind, self.data, self.sw, opts, problem=pr)


def bench_kernel(kernel, sizes, reps=None, missing_frac=0.5, kind="hsem", seed=7,
                 func=None, direct_cap=None, clock=time.perf_counter, log=None):
    """Time ``kernel`` at each lattice size and fit a power law.

    Parameters
    ----------
    kernel : str
        One of ``KERNELS``.  Ignored when ``func`` is given.
    sizes : sequence of int
        Strictly increasing perfect squares (``n`` of a square lattice).
    reps : int or None
        Timed repetitions per size (at least 5); ``None`` uses
        :func:`default_reps`.
    func : callable, optional
        ``func(n)`` replaces the kernel; used to test the harness.
    direct_cap : int, optional
        Cap passed to the direct route; defaults to no cap so the timing
        covers every size the memory guard allows.

    Returns
    -------
    BenchResult
        Sizes that could not be run (memory guard) are listed in
        ``skipped`` and excluded from the fit.
    """
    sizes = [int(s) for s in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if func is None and kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    if reps is not None and reps < 5:
        raise ValueError("reps must be at least 5")
    used, means, sds, counts, skipped = [], [], [], [], {}
    for n in sizes:
        r = reps or default_reps(n)
        if func is not None:
            run = (lambda n=n: func(n))
        else:
            try:
                setup = _Setup(kernel, n, missing_frac, kind, seed, direct_cap or 10**9)
            except MemoryError as exc:
                skipped[n] = str(exc)
                continue
            run = setup.runner(kernel)
        run()  # warm-up
        samples = np.empty(r)
        for i in range(r):
            t0 = clock()
            run()
            samples[i] = clock() - t0
        used.append(n)
        means.append(float(samples.mean()))
        sds.append(float(samples.std(ddof=1)) if r > 1 else 0.0)
        counts.append(r)
        if log is not None:
            log(f"{kernel or 'custom'} n={n} mean={means[-1]:.6g}s sd={sds[-1]:.3g}s reps={r}")
    alpha, b, r2 = fit_power_law(used, means)
    return BenchResult(kernel if func is None else "custom", used, means, sds, counts,
                       alpha, b, r2, skipped)
