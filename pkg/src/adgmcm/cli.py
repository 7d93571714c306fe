"""
Command-line interface: ``simulate``, ``fit``, ``repro`` and ``benchmark``.

Exit codes: 0 success, 2 usage or input error, 3 fit ran out of iterations
without converging (outputs are still written).
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from .analysis import (ReproParams, adjusted_rand_index, fit_pem_repro, fit_repro,
                       map_labels, result_from_report)
from .errors import FitError, GmcmError
from .marginals import scaled_ranks
from .model import DataMatrix
from .optimize import FitConfig, fit_ad_gmcm, init_params
from .pem import fit_pem
from .simulate import (NON_GAUSSIAN_SETTINGS, Marginal, random_gmcm_params,
                       simulate_gmcm, simulate_non_gaussian, simulate_repro)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 2, 3
LL_TIE, ARI_TIE = 1e-6, 1e-3

REPRO_TRUTH = ReproParams(0.25, 0.5, 2.0, 0.25)
REPRO_INITS = {
    "I": ReproParams(0.32, 0.5, 1.0, 0.25),
    "II": ReproParams(0.25, 0.5, 1.0, 0.25),
    "III": ReproParams(0.25, 0.5, 2.0, 0.25),
}
SUITES = ("gmcm-grid", "non-gaussian", "repro-inits")


class UsageError(Exception):
    """Bad flags or unreadable input; maps to exit code 2."""


def version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# -- file formats -------------------------------------------------------------

def read_matrix(path):
    """Read a headered numeric CSV into an (n, p) float array."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise UsageError(f"{path}: no data rows")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise UsageError(f"{path}: no data rows")
    width = len(header)
    values = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != width:
            raise UsageError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            values.append([float(v) for v in row])
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: non-numeric value") from exc
    x = np.array(values)
    if not np.all(np.isfinite(x)):
        raise UsageError(f"{path}: NaN or infinite values")
    return x


def _fmt(v):
    if v is None or isinstance(v, str):
        return "" if v is None else v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, columns):
    """Write columns of equal length with 17 significant digits, LF endings."""
    n = len(columns[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(n):
            w.writerow([_fmt(c[i]) for c in columns])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


def write_json(path, obj):
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: list
    outputs: list
    version: str
    wall_time_s: float = None

    def to_dict(self):
        return {"command": self.command, "config": self.config, "seed": self.seed,
                "inputs": self.inputs, "outputs": self.outputs,
                "library_version": self.version, "wall_time_s": self.wall_time_s}


def _manifest(args, seed, inputs, outputs, started):
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    wall = None if getattr(args, "omit_wall_time", False) else time.perf_counter() - started
    return RunManifest(args.command, config, seed, [str(p) for p in inputs],
                       [str(p) for p in outputs], version(), wall)


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _fit_config(args):
    return FitConfig(learning_rate=args.lr, max_iterations=args.max_iters,
                     convergence_gamma=args.gamma, seed=getattr(args, "seed", 0),
                     anchor=getattr(args, "anchor", False),
                     grad_steps_per_reset=args.grad_steps,
                     latent_gradient=args.latent_gradient,
                     covariance=getattr(args, "covariance", "full"))


def _parse_repro(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected four comma-separated numbers") from exc
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected alpha1,mu,sigma,rho")
    try:
        return ReproParams(*vals)
    except GmcmError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return v


# -- commands -----------------------------------------------------------------

def cmd_simulate(args):
    started = time.perf_counter()
    if args.family == "gmcm":
        params = random_gmcm_params(args.k, args.p, seed=args.seed)
        marg = [Marginal(args.marginal, args.shape, args.scale)] * args.p
        ds = simulate_gmcm(params, args.n, marg, seed=args.seed)
    elif args.family == "non-gaussian":
        ds = simulate_non_gaussian(args.setting, args.n, seed=args.seed,
                                   per_coordinate=args.per_coordinate)
    else:
        if args.p < 2:
            raise UsageError("the repro family needs --p >= 2")
        ds = simulate_repro(args.repro, args.p, args.n, seed=args.seed)
    out = _out_dir(args.out)
    data_path, truth_path = out / "data.csv", out / "truth.json"
    x = ds.data.values
    write_csv(data_path, [f"x{j + 1}" for j in range(x.shape[1])], list(x.T))
    # simulation output is meant to be byte-reproducible, so no timing
    args.omit_wall_time = True
    manifest = _manifest(args, args.seed, [], [data_path, truth_path], started)
    write_json(truth_path, {"labels": ds.true_labels, "true_params": ds.true_params,
                            "manifest": manifest.to_dict()})
    return EXIT_OK


def cmd_fit(args):
    started = time.perf_counter()
    x = read_matrix(args.data)
    if args.k > x.shape[0]:
        raise UsageError("--k exceeds the number of observations")
    ranks = scaled_ranks(DataMatrix(x, "raw"))
    config = _fit_config(args)
    fit = fit_ad_gmcm if args.method == "ad" else fit_pem
    report = fit(ranks, args.k, args.init, config)
    labels = map_labels(report.final_latent, report.final_params)
    out = _out_dir(args.out)
    report_path, labels_path = out / "report.json", out / "labels.csv"
    write_csv(labels_path, ["label"], [labels])
    manifest = _manifest(args, args.seed, [args.data], [report_path, labels_path], started)
    body = report.to_dict()
    body["manifest"] = manifest.to_dict()
    body["config"] = config.to_dict()
    write_json(report_path, body)
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_repro(args):
    started = time.perf_counter()
    x = read_matrix(args.data)
    if x.shape[1] < 2:
        raise UsageError("reproducibility analysis needs at least two columns")
    ranks = scaled_ranks(DataMatrix(x, "raw"))
    config = _fit_config(args)
    if args.method == "ad":
        res = fit_repro(ranks, args.init, config, threshold=args.threshold)
    else:
        res = fit_pem_repro(ranks, args.init, config, threshold=args.threshold)
    out = _out_dir(args.out)
    report_path, idr_path = out / "repro_report.json", out / "idr.csv"
    write_csv(idr_path, ["idr", "adjusted_idr", "reproducible", "map_signal"],
              [res.idr, res.adjusted_idr, res.reproducible_mask, res.map_mask])
    manifest = _manifest(args, args.seed, [args.data], [report_path, idr_path], started)
    body = {
        "repro_params": res.params.to_dict(),
        "threshold": res.threshold,
        "n_reproducible": int(res.reproducible_mask.sum()),
        "fit": res.fit_report.to_dict(),
        "config": config.to_dict(),
        "manifest": manifest.to_dict(),
    }
    write_json(report_path, body)
    return EXIT_OK if res.fit_report.converged else EXIT_NOT_CONVERGED


# -- benchmark ----------------------------------------------------------------

def suite_settings(suite):
    """Setting identifiers of a benchmark suite, in table order."""
    if suite == "gmcm-grid":
        return [f"K={k},p={p}" for k in (2, 3, 4) for p in (2, 3, 4)]
    if suite == "non-gaussian":
        return [str(s) for s in sorted(NON_GAUSSIAN_SETTINGS)]
    if suite == "repro-inits":
        return list(REPRO_INITS)
    raise UsageError(f"unknown suite {suite!r}")


def _or_partial(fit, *args):
    """Run a fit; on a mid-run failure fall back to its last valid iterate."""
    try:
        return fit(*args), False
    except FitError as exc:
        if exc.partial is None:
            raise
        log.info("%s stopped early: %s", fit.__name__, exc)
        return exc.partial, True


def run_replicate(task):
    """One dataset of one setting: fit AD and PEM from a shared start.

    A fit that fails part-way is scored at its last valid iterate and flagged
    in ``stopped_early``. ``task`` is a plain dict so it can cross process
    boundaries.
    """
    suite, setting, seed, n, config = (task["suite"], task["setting"], task["seed"],
                                       task["n"], FitConfig(**task["config"]))
    config = FitConfig(**{**config.to_dict(), "seed": seed})
    try:
        if suite == "repro-inits":
            ds = simulate_repro(REPRO_TRUTH, 2, n, seed=seed)
            ranks = scaled_ranks(ds.data)
            init = REPRO_INITS[setting]
            (a, ea), (b, eb) = (_or_partial(f, ranks, init, config)
                                for f in (fit_repro, fit_pem_repro))
            a, b = (result_from_report(r) if early else r for r, early in ((a, ea), (b, eb)))
            ll = (a.fit_report.final_exact_ll, b.fit_report.final_exact_ll)
            ari = tuple(adjusted_rand_index(ds.true_labels, np.where(r.map_mask, 2, 1))
                        for r in (a, b))
        else:
            if suite == "gmcm-grid":
                k, p = (int(part.split("=")[1]) for part in setting.split(","))
                ds = simulate_gmcm(random_gmcm_params(k, p, seed=seed), n, seed=seed)
            else:
                k = 3
                ds = simulate_non_gaussian(int(setting), n, seed=seed)
            ranks = scaled_ranks(ds.data)
            init = init_params(ranks, k, "kmeans", seed)
            (a, ea), (b, eb) = (_or_partial(f, ranks, k, init, config)
                                for f in (fit_ad_gmcm, fit_pem))
            ll = (a.final_exact_ll, b.final_exact_ll)
            ari = tuple(adjusted_rand_index(ds.true_labels,
                                            map_labels(r.final_latent, r.final_params))
                        for r in (a, b))
    except GmcmError as exc:
        return {"setting": setting, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}
    return {"setting": setting, "seed": seed, "ll_ad": ll[0], "ll_pem": ll[1],
            "ari_ad": ari[0], "ari_pem": ari[1], "error": None,
            "stopped_early": [m for m, e in (("ad", ea), ("pem", eb)) if e]}


def _compare(diffs, tie):
    diffs = np.asarray(diffs, dtype=float)
    return (int(np.sum(diffs >= tie)), int(np.sum(np.abs(diffs) < tie)),
            int(np.sum(diffs <= -tie)))


def summarize(setting, results):
    """Aggregate replicate results of one setting into a table row."""
    ok = [r for r in results if r["error"] is None]
    row = {"setting": setting, "replicates": len(results), "failures": len(results) - len(ok)}
    if ok:
        ll_ad = np.array([r["ll_ad"] for r in ok])
        ll_pem = np.array([r["ll_pem"] for r in ok])
        ari_ad = np.array([r["ari_ad"] for r in ok])
        ari_pem = np.array([r["ari_pem"] for r in ok])
        h, e, lo = _compare(ll_ad - ll_pem, LL_TIE)
        ha, ea, la = _compare(ari_ad - ari_pem, ARI_TIE)
        row.update(n_higher_ll=h, n_equal_ll=e, n_lower_ll=lo,
                   avg_ll_ad=float(ll_ad.mean()), avg_ll_pem=float(ll_pem.mean()),
                   n_higher_ari=ha, n_equal_ari=ea, n_lower_ari=la,
                   avg_ari_ad=float(ari_ad.mean()), avg_ari_pem=float(ari_pem.mean()))
    else:
        row.update({k: None for k in SUMMARY_COLUMNS[3:]})
    return row


SUMMARY_COLUMNS = ["setting", "replicates", "failures",
                   "n_higher_ll", "n_equal_ll", "n_lower_ll", "avg_ll_ad", "avg_ll_pem",
                   "n_higher_ari", "n_equal_ari", "n_lower_ari", "avg_ari_ad", "avg_ari_pem"]


def worker_count(flag=None):
    """Pool size: the flag, else ``GMCM_THREADS``, else the logical core count."""
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("GMCM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"GMCM_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def run_benchmark(suite, replicates, n, seed_base, config, workers=1):
    """Run every setting of ``suite``; returns (rows, per-replicate results)."""
    tasks = [{"suite": suite, "setting": s, "seed": seed_base + i, "n": n,
              "config": config.to_dict()}
             for s in suite_settings(suite) for i in range(replicates)]
    if workers == 1:
        results = [run_replicate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_replicate, tasks))
    rows = [summarize(s, [r for r in results if r["setting"] == s])
            for s in suite_settings(suite)]
    return rows, results


_DEFAULT_N = {"gmcm-grid": 500, "non-gaussian": 900, "repro-inits": 1000}


def cmd_benchmark(args):
    started = time.perf_counter()
    n = args.n if args.n is not None else _DEFAULT_N[args.suite]
    config = _fit_config(args)
    rows, results = run_benchmark(args.suite, args.replicates, n, args.seed_base, config,
                                  worker_count(args.workers))
    out = _out_dir(args.out)
    csv_path, json_path = out / "summary.csv", out / "summary.json"
    write_csv(csv_path, SUMMARY_COLUMNS, [[r[c] for r in rows] for c in SUMMARY_COLUMNS])
    manifest = _manifest(args, args.seed_base, [], [csv_path, json_path], started)
    write_json(json_path, {"suite": args.suite, "n": n, "rows": rows,
                           "replicates": results, "config": config.to_dict(),
                           "manifest": manifest.to_dict()})
    for r in rows:
        if r["failures"]:
            log.warning("setting %s: %d of %d replicates failed",
                        r["setting"], r["failures"], r["replicates"])
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def _add_fit_flags(p, method_choices):
    p.add_argument("data", help="CSV file with a header row and one observation per row")
    p.add_argument("--method", choices=method_choices, default="ad",
                   help="ad: Adam on the exact likelihood; pem: pseudo-EM (default: ad)")
    p.add_argument("--seed", type=_non_negative_int, default=0, help="random seed")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    p.add_argument("--max-iters", type=_positive_int, default=750,
                   help="maximum iterations (default 750)")
    p.add_argument("--gamma", type=float, default=1e-6,
                   help="convergence tolerance on the log-likelihood change; exact LL for ad, "
                        "pseudo LL for pem (default 1e-6)")
    p.add_argument("--grad-steps", type=_positive_int, default=1,
                   help="Adam steps per latent reset (default 1)")
    p.add_argument("--latent-gradient", choices=("fixed", "implicit"), default="fixed",
                   help="treat reset latent values as constants (fixed) or follow "
                        "their first-order response to the parameters (implicit)")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--omit-wall-time", action="store_true",
                   help="leave wall time out of the manifest for byte-identical reruns")


def _bench_fit_flags(p):
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    p.add_argument("--max-iters", type=_positive_int, default=750,
                   help="maximum iterations per fit (default 750)")
    p.add_argument("--gamma", type=float, default=1e-6, help="convergence tolerance")
    p.add_argument("--grad-steps", type=_positive_int, default=1,
                   help="Adam steps per latent reset (default 1)")
    p.add_argument("--latent-gradient", choices=("fixed", "implicit"), default="fixed",
                   help="gradient treatment of the reset latent values")
    p.add_argument("--omit-wall-time", action="store_true",
                   help="leave wall time out of the manifest for byte-identical reruns")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="adgmcm",
        description="Gaussian mixture copula fitting by gradient ascent on the exact "
                    "likelihood, with a pseudo-EM baseline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {version()}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset and its ground truth")
    p.add_argument("--family", choices=("gmcm", "non-gaussian", "repro"), default="gmcm")
    p.add_argument("--n", type=_positive_int, required=True, help="number of observations")
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--k", type=_positive_int, default=2, help="components (gmcm family)")
    p.add_argument("--p", type=_positive_int, default=2, help="dimensions (gmcm, repro)")
    p.add_argument("--marginal", choices=("identity", "gamma", "weibull"), default="identity",
                   help="marginal law applied to every column (gmcm family)")
    p.add_argument("--shape", type=float, default=2.0, help="marginal shape")
    p.add_argument("--scale", type=float, default=1.0, help="marginal scale")
    p.add_argument("--setting", type=int, choices=sorted(NON_GAUSSIAN_SETTINGS), default=1,
                   help="non-gaussian setting 1..8")
    p.add_argument("--per-coordinate", action="store_true",
                   help="non-gaussian: independent scalar per coordinate")
    p.add_argument("--repro", type=_parse_repro, default=REPRO_TRUTH,
                   help="repro family: alpha1,mu,sigma,rho (default 0.25,0.5,2,0.25)")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a mixture copula and write MAP labels")
    _add_fit_flags(p, ("ad", "pem"))
    p.add_argument("--k", type=_positive_int, required=True, help="number of components")
    p.add_argument("--init", choices=("random", "kmeans"), default="kmeans")
    p.add_argument("--anchor", action="store_true",
                   help="pin component 1 to zero mean and identity covariance")
    p.add_argument("--covariance", choices=("full", "diagonal"), default="full",
                   help="component covariance structure (default full)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("repro", help="reproducibility analysis with idr values")
    _add_fit_flags(p, ("ad", "pem"))
    p.add_argument("--init", type=_parse_repro, default=REPRO_INITS["I"],
                   help="alpha1,mu,sigma,rho start (default 0.32,0.5,1,0.25)")
    p.add_argument("--threshold", type=float, default=0.05,
                   help="adjusted idr cutoff for reproducible subjects (default 0.05)")
    p.set_defaults(func=cmd_repro)

    p = sub.add_parser("benchmark", help="AD vs PEM comparison tables")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--replicates", type=_positive_int, default=30)
    p.add_argument("--n", type=_positive_int, default=None,
                   help="observations per dataset (default 500, 900 or 1000 by suite)")
    p.add_argument("--seed-base", type=_non_negative_int, default=0,
                   help="replicate i uses seed seed_base + i")
    p.add_argument("--workers", type=_positive_int, default=None,
                   help="worker processes (default: GMCM_THREADS or core count)")
    p.add_argument("--out", default=".", help="output directory")
    _bench_fit_flags(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", 0) is None:
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GmcmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
