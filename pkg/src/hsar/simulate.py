"""
Synthetic data and replicate studies.

Each replicate draws from its own counter-based stream seeded by
``(seed, replicate)``, so replicates can run in any order or in parallel
and still reproduce bit for bit.
"""

import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import weights as wts
from .errors import HSARError
from .estimator import FitOptions, Method, fit
from .model import Dataset, ModelKind, Params, a_inverse, working_state

__all__ = [
    "SimConfig",
    "SimulatedData",
    "StudyReport",
    "simulate_one",
    "run_study",
    "rng_for",
    "GENERATOR",
    "PARAM_NAMES",
]

GENERATOR = "Philox"
PARAM_NAMES = ("beta0", "beta1", "rho", "sigma2_eps", "sigma2_e")
Z95 = 1.959963984540054


@dataclass(frozen=True)
class SimConfig:
    """Design of a simulation study on a rook lattice with row-normalized weights."""

    kind: ModelKind = ModelKind.HSEM
    grid: tuple = (71, 71)
    beta: tuple = (1.0, 5.0)
    rho: float = 0.8
    sigma2_eps: float = 2.0
    sigma2_e: float = 1.0
    missing_frac: float = 0.5
    n_replicates: int = 250
    seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError(f"grid must be two positive integers, got {self.grid}")
        if len(self.beta) < 1:
            raise ValueError("beta needs at least the intercept")
        if not 0.0 <= self.missing_frac < 1.0:
            raise ValueError("missing_frac must lie in [0, 1)")
        if self.sigma2_eps < 0 or self.sigma2_e < 0:
            raise ValueError("variances must be nonnegative")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie inside (-1, 1) for row-normalized weights")
        if self.n_replicates < 0:
            raise ValueError("n_replicates must be nonnegative")

    @property
    def n(self):
        return self.grid[0] * self.grid[1]

    @property
    def truth(self):
        """True parameters, or None in the noise-free case ``sigma2_eps = 0``."""
        if self.sigma2_eps <= 0:
            return None
        return Params.from_variances(np.array(self.beta), self.rho, self.sigma2_eps, self.sigma2_e)

    def truth_vector(self):
        b = self.beta
        return np.array([b[0], b[1] if len(b) > 1 else np.nan, self.rho, self.sigma2_eps,
                         self.sigma2_e])

    def weights(self):
        return wts.rook_grid(*self.grid)

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        d["grid"] = list(self.grid)
        d["beta"] = list(self.beta)
        return d


@dataclass(frozen=True, eq=False)
class SimulatedData:
    """A simulated replicate: the dataset plus every latent component.

    ``y = z + eps`` holds on all ``n`` units before masking; ``u`` is the
    H-SEM spatial error and is ``None`` for H-SAM.
    """

    dataset: Dataset
    y_full: np.ndarray
    z: np.ndarray
    eps: np.ndarray
    e: np.ndarray
    truth: Params
    u: np.ndarray = None
    replicate: int = 0


def rng_for(seed, replicate):
    """Independent generator for one replicate."""
    ss = np.random.SeedSequence([int(seed), int(replicate)])
    return np.random.Generator(getattr(np.random, GENERATOR)(ss))


def simulate_one(cfg, replicate=0, sw=None):
    """Draw one replicate.

    Draw order: missing mask (exactly ``round(missing_frac * n)`` units,
    uniformly without replacement), covariates, innovations ``e``, then
    measurement errors ``eps``.  The mask is drawn before anything about
    ``y`` exists.
    """
    sw = sw or cfg.weights()
    n = cfg.n
    rng = rng_for(cfg.seed, replicate)
    n_mis = int(round(cfg.missing_frac * n))
    mask = np.ones(n, dtype=bool)
    mask[rng.choice(n, size=n_mis, replace=False)] = False
    k = len(cfg.beta)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, k - 1))])
    e = math.sqrt(cfg.sigma2_e) * rng.standard_normal(n)
    eps = math.sqrt(cfg.sigma2_eps) * rng.standard_normal(n)
    xb = X @ np.asarray(cfg.beta)
    st = working_state(sw, cfg.rho)
    if cfg.kind is ModelKind.HSEM:
        u = a_inverse(st, e)
        z = xb + u
    else:
        u = None
        z = a_inverse(st, xb + e)
    y = z + eps
    ds = Dataset.from_arrays(np.where(mask, y, np.nan), X, mask)
    for a in (y, z, eps, e) + ((u,) if u is not None else ()):
        a.flags.writeable = False
    return SimulatedData(ds, y, z, eps, e, cfg.truth, u, replicate)


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------


def _estimates(res):
    p = res.params
    return np.array([p.beta[0], p.beta[1] if p.beta.size > 1 else np.nan, p.rho,
                     p.sigma2_eps, p.sigma2_e])


def _ses(res):
    if res.se is None:
        return np.full(5, np.nan)
    s = res.se
    b = s.se_beta
    return np.array([b[0], b[1] if b.size > 1 else np.nan, s.se_rho, s.se_sigma2_eps,
                     s.se_sigma2_e])


def _replicate_task(args):
    cfg, replicate, methods, options = args
    sw = cfg.weights()
    data = simulate_one(cfg, replicate, sw)
    rows = []
    for m in methods:
        opts = FitOptions(**{**options, "method": m})
        t0 = time.perf_counter()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = fit(cfg.kind, data.dataset, sw, opts)
        except HSARError as exc:
            rows.append((m.value, replicate, None, None, False, False, time.perf_counter() - t0,
                         f"{type(exc).__name__}: {exc}"))
            continue
        pd = res.se.info_pd if res.se is not None else False
        rows.append((m.value, replicate, _estimates(res), _ses(res), res.converged, pd,
                     time.perf_counter() - t0, res.message))
    return rows


@dataclass
class MethodSummary:
    """Aggregates for one method; arrays follow ``PARAM_NAMES``."""

    method: str
    mean: np.ndarray
    mse: np.ndarray
    mean_se: np.ndarray
    coverage: np.ndarray
    mean_time: float
    n_ok: int
    n_failed: int
    info_pd_rate: float
    estimates: np.ndarray = field(repr=False, default=None)
    ses: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in a]

        return {
            "method": self.method,
            "mean": dict(zip(PARAM_NAMES, clean(self.mean))),
            "mse": dict(zip(PARAM_NAMES, clean(self.mse))),
            "mean_se": dict(zip(PARAM_NAMES, clean(self.mean_se))),
            "coverage": dict(zip(PARAM_NAMES, clean(self.coverage))),
            "mean_time": self.mean_time,
            "n_ok": self.n_ok,
            "n_failed": self.n_failed,
            "info_pd_rate": None if not np.isfinite(self.info_pd_rate) else self.info_pd_rate,
        }


@dataclass
class StudyReport:
    """Replicate-study summary per method."""

    config: SimConfig
    methods: dict
    failures: list = field(default_factory=list)
    wall_time: float = 0.0

    def __getitem__(self, method):
        return self.methods[Method.parse(method).value]

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "generator": GENERATOR,
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
            "failures": self.failures,
            "wall_time": self.wall_time,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), indent=2, **kw)

    def table(self):
        """Aligned text: one row per parameter, ``mean (MSE)`` per method."""
        names = list(self.methods)
        true_vals = self.config.truth_vector()
        pct = f"{100 * self.config.missing_frac:g}% missing"
        head = f"{self.config.kind.name:<6} {pct:<14}{'true':>8}" + "".join(
            f"{n.upper():>22}" for n in names
        )
        lines = [head, "-" * len(head)]
        for i, pname in enumerate(PARAM_NAMES):
            cells = []
            for n in names:
                s = self.methods[n]
                cells.append(f"{s.mean[i]:>10.4f} ({s.mse[i]:.4f})".rjust(22))
            lines.append(f"{pname:<21}{true_vals[i]:>8.4g}" + "".join(cells))
        lines.append("")
        for n in names:
            s = self.methods[n]
            lines.append(
                f"{n.upper()}: {s.n_ok} fits, {s.n_failed} failed, "
                f"mean time {s.mean_time:.4f} s, info PD rate {s.info_pd_rate:.3f}"
            )
        return "\n".join(lines)

    def coverage_table(self):
        """Mean estimate, mean standard error and 95% coverage per method."""
        lines = []
        for n, s in self.methods.items():
            lines.append(f"{n.upper()}")
            lines.append(f"{'':<12}{'est.':>10}{'se.':>10}{'cov.':>10}")
            for i, pname in enumerate(PARAM_NAMES):
                lines.append(
                    f"{pname:<12}{s.mean[i]:>10.4f}{s.mean_se[i]:>10.4f}{s.coverage[i]:>10.4f}"
                )
        return "\n".join(lines)


def _summarize(method, rows, truth_vec):
    ok = [r for r in rows if r[2] is not None]
    est = np.array([r[2] for r in ok]).reshape(-1, 5)
    ses = np.array([r[3] for r in ok]).reshape(-1, 5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = est.mean(axis=0) if len(ok) else np.full(5, np.nan)
        mse = ((est - truth_vec) ** 2).mean(axis=0) if len(ok) else np.full(5, np.nan)
        mean_se = np.nanmean(ses, axis=0) if len(ok) else np.full(5, np.nan)
        covered = np.abs(est - truth_vec) <= Z95 * ses
        valid = np.isfinite(ses)
        coverage = np.where(valid.sum(0) > 0, (covered & valid).sum(0) / np.maximum(valid.sum(0), 1),
                            np.nan)
        times = np.array([r[6] for r in rows])
        pd_rate = float(np.mean([r[5] for r in ok])) if ok else math.nan
    return MethodSummary(
        method=method,
        mean=mean,
        mse=mse,
        mean_se=mean_se,
        coverage=coverage,
        mean_time=float(times.mean()) if times.size else math.nan,
        n_ok=len(ok),
        n_failed=len(rows) - len(ok),
        info_pd_rate=pd_rate,
        estimates=est,
        ses=ses,
    )


def run_study(cfg, methods, se=True, threads=1, options=None, replicates=None):
    """Fit every replicate with every method and aggregate.

    Parameters
    ----------
    methods : list of Method or str
    se : bool
        Compute standard errors (needed for coverage).
    threads : int
        Worker processes; 1 runs in-process.
    options : dict, optional
        Extra :class:`FitOptions` fields.
    replicates : iterable of int, optional
        Replicate indices; defaults to ``range(cfg.n_replicates)``.
    """
    methods = [Method.parse(m) for m in methods]
    if not methods:
        raise ValueError("at least one method is required")
    opts = dict(options or {})
    opts["se"] = se
    reps = list(range(cfg.n_replicates) if replicates is None else replicates)
    tasks = [(cfg, r, methods, opts) for r in reps]
    t0 = time.perf_counter()
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_replicate_task, tasks))
    else:
        chunks = [_replicate_task(t) for t in tasks]
    rows = [row for chunk in chunks for row in chunk]
    truth_vec = cfg.truth_vector()
    summaries = {}
    failures = []
    for m in methods:
        mrows = [r for r in rows if r[0] == m.value]
        summaries[m.value] = _summarize(m.value, mrows, truth_vec)
        failures += [
            {"method": r[0], "replicate": r[1], "reason": r[7]} for r in mrows if r[2] is None
        ]
    return StudyReport(cfg, summaries, failures, time.perf_counter() - t0)
