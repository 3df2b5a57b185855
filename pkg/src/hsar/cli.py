"""
Command-line front end.

    hsar simulate  draw one replicate and write data, weights and truth
    hsar fit       fit a model to a CSV file and a weight matrix
    hsar study     run a replicate study and write the summary table
    hsar bench     time a kernel across lattice sizes

Exit status is 0 on success (a converged fit), 2 when the optimizer ran
out of evaluations and 1 on bad input.  Every run writes one manifest.
"""

import argparse
import csv
import datetime
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import sparse_core as sc
from . import weights as wts
from .errors import DirectPathRefused, HSARError
from .estimator import FitOptions, Method, fit
from .model import Dataset, ModelKind

SCHEMA_VERSION = 1
MISSING_MARKERS = frozenset({"", "na", "nan"})
EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


class InputError(Exception):
    """Bad command-line input; reported without a traceback."""


@dataclass
class RunManifest:
    command: list
    config: dict
    version: str
    seed: object = None
    start: str = ""
    end: str = ""
    outputs: list = field(default_factory=list)
    exit_code: int = 0

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump({"schema_version": SCHEMA_VERSION, **asdict(self)}, fh, indent=2)


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (ModelKind, Method)):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default, allow_nan=False)


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------


def _grid(text):
    parts = str(text).lower().replace(",", "x").split("x")
    try:
        rows, cols = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 31x31, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return rows, cols


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _methods(text):
    try:
        return [Method.parse(v.strip()) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _on_off(text):
    t = str(text).lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _model(text):
    try:
        return ModelKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def read_config(path):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InputError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise InputError("--config needs a file path")
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Install config-file values as subcommand defaults before parsing.

    Command-line flags still win because they are parsed afterwards.
    Options supplied by the file stop being required on the command line.
    """
    subs = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in subs), None)
    path = _config_path(argv)
    if command is None or path is None:
        return
    sub = subs[command]
    try:
        cfg = read_config(path)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    bad = sorted(set(cfg) - set(actions))
    if bad:
        raise InputError(
            f"unknown config keys: {', '.join(bad)}; valid keys: {', '.join(sorted(actions))}"
        )
    defaults = {}
    for key, value in cfg.items():
        act = actions[key]
        try:
            defaults[key] = act.type(value) if act.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise InputError(f"config key {key}: {exc}") from None
        if act.choices is not None and defaults[key] not in act.choices:
            raise InputError(f"config key {key}: {value!r} not in {sorted(act.choices)}")
    sub.set_defaults(**defaults)
    for act in sub._actions:
        if act.dest in defaults:
            act.required = False


# ---------------------------------------------------------------------------
# data I/O
# ---------------------------------------------------------------------------


def read_data_csv(path, response="y", covariates=None):
    """Read ``response`` and covariate columns from a CSV file with a header.

    Missing responses may be empty, ``NA`` or ``NaN``.  Covariates default to
    every other column, in file order, and must be complete.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file (a header row is required)") from None
        header = [h.strip() for h in header]
        if response not in header:
            raise InputError(f"{path}:1: no response column {response!r} in header {header}")
        if covariates is None:
            covariates = [h for h in header if h != response]
        missing_cols = [c for c in covariates if c not in header]
        if missing_cols:
            raise InputError(f"{path}:1: covariate columns not found: {missing_cols}")
        if not covariates:
            raise InputError(f"{path}:1: no covariate columns")
        yi = header.index(response)
        xi = [header.index(c) for c in covariates]
        ys, xs = [], []
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}"
                )
            cell = row[yi].strip()
            if cell.lower() in MISSING_MARKERS:
                ys.append(math.nan)
            else:
                try:
                    ys.append(float(cell))
                except ValueError:
                    raise InputError(f"{path}:{lineno}: response {cell!r} is not a number") from None
                if not math.isfinite(ys[-1]):
                    raise InputError(f"{path}:{lineno}: response {cell!r} is not finite")
            try:
                xs.append([float(row[j]) for j in xi])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric covariate value") from None
            if not all(math.isfinite(v) for v in xs[-1]):
                raise InputError(f"{path}:{lineno}: covariates must be finite")
    if not ys:
        raise InputError(f"{path}: no data rows")
    return Dataset.from_arrays(np.array(ys), np.array(xs)), covariates


def write_data_csv(path, dataset, names=None):
    names = names or [f"x{j}" for j in range(dataset.p)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", *names])
        for i in range(dataset.n):
            y = repr(float(dataset.y[i])) if dataset.mask[i] else "NA"
            w.writerow([y, *(repr(float(v)) for v in dataset.X[i])])


def fit_to_dict(res, covariates=None):
    p = res.params
    est = {
        "beta": [float(b) for b in p.beta],
        "rho": float(p.rho),
        "sigma2_eps": float(p.sigma2_eps),
        "sigma2_e": float(p.sigma2_e),
        "omega": float(p.omega),
        "theta": float(p.theta),
    }
    se = None
    if res.se is not None:
        s = res.se
        se = {
            "beta": [_finite_or_none(v) for v in s.se_beta],
            "rho": _finite_or_none(s.se_rho),
            "sigma2_eps": _finite_or_none(s.se_sigma2_eps),
            "sigma2_e": _finite_or_none(s.se_sigma2_e),
            "info_positive_definite": s.info_pd,
            "joint": s.joint,
            "fd_step": s.fd_step,
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "model": res.kind.value,
        "method": res.method.value,
        "converged": bool(res.converged),
        "boundary": bool(res.boundary),
        "message": res.message,
        "n_obs": int(res.n_obs),
        "n_evals": int(res.n_evals),
        "loglik": float(res.loglik),
        "covariates": covariates,
        "estimates": est,
        "se": se,
        "timing": res.timing,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fit(args, manifest):
    sw = wts.load_weights(args.weights, normalize=args.normalize)
    dataset, covariates = read_data_csv(args.data, args.response, args.covariates)
    if dataset.n != sw.n:
        raise InputError(
            f"data has {dataset.n} rows but the weight matrix is {sw.n} x {sw.n}"
        )
    opts = FitOptions(
        method=args.method,
        tol=args.tol,
        max_evals=args.max_evals,
        optimizer=args.optimizer,
        se=args.se,
        se_joint=not args.block_se,
        direct_cap=args.direct_cap,
    )
    res = fit(args.model, dataset, sw, opts)
    payload = fit_to_dict(res, covariates)
    if args.out:
        _write_json(args.out, payload)
        manifest.outputs.append(str(args.out))
    p = res.params
    print(f"{res.kind.name} {res.method.value}: converged={res.converged} "
          f"loglik={res.loglik:.6f} evals={res.n_evals}")
    print(f"  beta = {np.array2string(p.beta, precision=6)}")
    print(f"  rho = {p.rho:.6f}  sigma2_eps = {p.sigma2_eps:.6f}  sigma2_e = {p.sigma2_e:.6f}")
    if res.se is not None:
        s = res.se
        print(f"  se(beta) = {np.array2string(s.se_beta, precision=6)}  se(rho) = {s.se_rho:.6f}  "
              f"se(sigma2_eps) = {s.se_sigma2_eps:.6f}  se(sigma2_e) = {s.se_sigma2_e:.6f}")
    if res.boundary:
        print("  note: theta is at its lower boundary")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _sim_config(args, n_replicates):
    from .simulate import SimConfig

    return SimConfig(
        kind=args.model,
        grid=args.grid,
        beta=tuple(args.beta),
        rho=args.rho,
        sigma2_eps=args.sigma2_eps,
        sigma2_e=args.sigma2_e,
        missing_frac=args.missing,
        n_replicates=n_replicates,
        seed=args.seed,
    )


def cmd_simulate(args, manifest):
    from .simulate import simulate_one

    try:
        cfg = _sim_config(args, 1)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    sw = cfg.weights()
    data = simulate_one(cfg, args.replicate, sw)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    names = ["const"] + [f"x{j}" for j in range(1, data.dataset.p)]
    write_data_csv(out / "data.csv", data.dataset, names)
    sc.write_matrix_market(out / "weights.mtx", sw.W, comment="row-normalized rook weights")
    truth = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "replicate": args.replicate,
        "generator": "Philox",
        "truth": {
            "beta": list(cfg.beta),
            "rho": cfg.rho,
            "sigma2_eps": cfg.sigma2_eps,
            "sigma2_e": cfg.sigma2_e,
        },
        "y_full": [float(v) for v in data.y_full],
    }
    _write_json(out / "truth.json", truth)
    manifest.outputs += [str(out / f) for f in ("data.csv", "weights.mtx", "truth.json")]
    print(f"wrote {cfg.n} units ({data.dataset.n_obs} observed) to {out}")
    return EXIT_OK


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("HSAR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"HSAR_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def cmd_study(args, manifest):
    from .simulate import run_study

    try:
        cfg = _sim_config(args, args.reps)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    threads = _threads(args)
    manifest.config["threads"] = threads
    report = run_study(cfg, args.methods, se=args.se, threads=threads)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    table = report.table() + "\n\n" + report.coverage_table() + "\n"
    (out / "study.txt").write_text(table)
    (out / "study.json").write_text(report.to_json())
    manifest.outputs += [str(out / "study.txt"), str(out / "study.json")]
    print(table, end="")
    for f in report.failures:
        print(f"failed: {f['method']} replicate {f['replicate']}: {f['reason']}")
    return EXIT_OK


def cmd_bench(args, manifest):
    from .bench import bench_kernel

    res = bench_kernel(
        args.kernel, args.sizes, reps=args.reps, missing_frac=args.missing,
        kind=args.model, seed=args.seed, log=print,
    )
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / f"bench_{args.kernel}.csv")
    res.write_json(out / f"bench_{args.kernel}.json")
    manifest.outputs += [str(out / f"bench_{args.kernel}.csv"),
                         str(out / f"bench_{args.kernel}.json")]
    for n, why in res.skipped.items():
        print(f"skipped n={n}: {why}")
    print(f"alpha = {res.alpha:.4f}  b = {res.b:.4g}  r^2 = {res.r_squared:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_sim_args(p, reps):
    p.add_argument("--model", type=_model, default=ModelKind.HSEM, help="hsem or hsam")
    p.add_argument("--grid", type=_grid, default=(71, 71), help="lattice, e.g. 71x71")
    p.add_argument("--beta", type=_float_list, default=[1.0, 5.0],
                   help="coefficients, intercept first")
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--sigma2-eps", dest="sigma2_eps", type=float, default=2.0)
    p.add_argument("--sigma2-e", dest="sigma2_e", type=float, default=1.0)
    p.add_argument("--missing", type=float, default=0.5, help="fraction of missing responses")
    p.add_argument("--seed", type=int, default=20240101)
    if reps:
        p.add_argument("--reps", type=int, default=250, help="number of replicates")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hsar",
        description="Marginal maximum likelihood for hierarchical SAR models with missing data.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("fit", help="fit a model to data")
    p.add_argument("--config", help="key=value file supplying any option below")
    p.add_argument("--model", type=_model, required=True, help="hsem or hsam")
    p.add_argument("--method", type=Method.parse, default=Method.MML_P,
                   help="mml-p, mml-d, oml or fml")
    p.add_argument("--data", required=True, help="CSV with a header row")
    p.add_argument("--weights", required=True, help="Matrix Market file or neighbour list")
    p.add_argument("--normalize", choices=["row", "none"], default="row")
    p.add_argument("--response", default="y", help="response column name")
    p.add_argument("--covariates", type=lambda s: [c.strip() for c in s.split(",")],
                   default=None, help="covariate columns (default: all but the response)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-evals", dest="max_evals", type=int, default=500)
    p.add_argument("--optimizer", choices=["nelder_mead", "golden_section_nested"],
                   default="nelder_mead")
    p.add_argument("--se", type=_on_off, default=True, help="on or off")
    p.add_argument("--block-se", dest="block_se", type=_on_off, default=False,
                   help="H-SAM: invert beta and zeta information separately")
    p.add_argument("--direct-cap", dest="direct_cap", type=int, default=4000)
    p.add_argument("--out", help="result JSON path")
    p.add_argument("--manifest", help="manifest path (default: next to --out)")
    p.set_defaults(func=cmd_fit)

    p = subs.add_parser("simulate", help="draw one synthetic replicate")
    p.add_argument("--config", help="key=value file supplying any option below")
    _add_sim_args(p, reps=False)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--outdir", default="sim_out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("study", help="replicate simulation study")
    p.add_argument("--config", help="key=value file supplying any option below")
    _add_sim_args(p, reps=True)
    p.add_argument("--methods", type=_methods, default=[Method.OML, Method.MML_P])
    p.add_argument("--se", type=_on_off, default=True)
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: HSAR_THREADS or CPU count)")
    p.add_argument("--outdir", default="study_out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_study)

    p = subs.add_parser("bench", help="empirical complexity of a kernel")
    p.add_argument("--config", help="key=value file supplying any option below")
    p.add_argument("--kernel", required=True,
                   choices=["chol_AtA", "solve_fb", "direct_inverse", "lc_param_eval",
                            "lc_direct_eval", "full_fit_P", "full_fit_D"])
    p.add_argument("--sizes", type=_int_list, default=[2500, 4900, 10000, 22500, 40000],
                   help="square-lattice sizes n")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--missing", type=float, default=0.5)
    p.add_argument("--model", type=_model, default=ModelKind.HSEM)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--outdir", default="bench_out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_bench)
    return parser


def _manifest_path(args):
    if args.manifest:
        return Path(args.manifest)
    if getattr(args, "out", None):
        out = Path(args.out)
        return out.with_name(out.stem + ".manifest.json")
    if getattr(args, "outdir", None):
        return Path(args.outdir) / "manifest.json"
    return Path("manifest.json")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors share the input-error status; --help and --version exit 0
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    start = _now()
    config = {}
    code = EXIT_INPUT
    try:
        config = {k: v for k, v in vars(args).items() if k not in ("func",)}
        manifest = RunManifest(
            command=["hsar", *argv],
            config=json.loads(json.dumps(config, default=_json_default)),
            version=__version__,
            seed=config.get("seed"),
            start=start,
        )
        code = args.func(args, manifest)
    except (InputError, DirectPathRefused) as exc:
        print(f"error: {exc}", file=sys.stderr)
        manifest = locals().get("manifest") or RunManifest(["hsar", *argv], {}, __version__,
                                                           start=start)
        code = EXIT_INPUT
    except (HSARError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        manifest = locals().get("manifest") or RunManifest(["hsar", *argv], {}, __version__,
                                                           start=start)
        code = EXIT_INPUT
    manifest.end = _now()
    manifest.exit_code = code
    try:
        manifest.write(_manifest_path(args))
    except OSError as exc:
        print(f"warning: could not write manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
