"""Command-line front end: simulate, fit, stability, summarize.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
The default worker count comes from the SHRINKFACTOR_THREADS environment
variable (1 when unset); ``--threads 1`` is bitwise deterministic.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import __version__
from .em import FitReport, fit_em
from .gibbs import GibbsConfig, run_gibbs
from .io import (
    read_data_matrix,
    read_matrix,
    read_tsv,
    write_json,
    write_manifest,
    write_rows,
    write_tsv,
)
from .model import DataMatrix, Hyperparameters, ModelError, NumericalError
from .postprocess import (
    DENSE,
    classify_factors,
    covariate_correlation,
    pve,
    remove_pcs,
    support_histogram,
    threshold_loadings,
)
from .simgen import PRESETS, SimConfig, gen_dataset, preset
from .stability import dense_stability, sparse_stability

logger = logging.getLogger("shrinkfactor")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
THREADS_ENV = "SHRINKFACTOR_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return value


def _map(fn: Callable, items: Sequence, threads: int) -> List:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# simulate


def _write_simulation(out_dir: Path, config: SimConfig, argv: Sequence[str]) -> None:
    start = time.perf_counter()
    out_dir.mkdir(parents=True, exist_ok=True)
    Y, truth = gen_dataset(config)
    write_tsv(out_dir / "Y.tsv", Y.values)
    write_tsv(out_dir / "truth_lambda.tsv", truth.Lambda)
    write_tsv(out_dir / "truth_x.tsv", truth.X)
    if config.k_dense:
        write_tsv(out_dir / "truth_omega.tsv", truth.Omega)
        write_tsv(out_dir / "truth_f.tsv", truth.F)
    write_manifest(
        out_dir, "simulate", config.to_dict(),
        duration=time.perf_counter() - start,
        extra={"argv": list(argv), "support_sizes": truth.support_sizes},
    )


def cmd_simulate(args) -> int:
    base = preset(args.preset) if args.preset else SimConfig()
    config = replace(base, **{
        k: v for k, v in dict(
            n=args.n, p=args.p, k_sparse=args.k_sparse, k_dense=args.k_dense,
            cluster_min=args.cluster_min, cluster_max=args.cluster_max,
            noise_sd=args.noise_sd, seed=args.seed,
        ).items() if v is not None
    })
    out = Path(args.out_dir)
    if args.replicates < 1:
        raise UsageError("--replicates must be >= 1")
    if args.replicates == 1:
        _write_simulation(out, config, args.argv)
        return EXIT_OK
    jobs = [(out / f"rep{r}", replace(config, seed=config.seed + r)) for r in range(args.replicates)]
    _map(lambda job: _write_simulation(job[0], job[1], args.argv), jobs, args.threads)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _hyper_from_args(args) -> Hyperparameters:
    return Hyperparameters(
        a=args.a, b=args.b, c=args.c, d=args.d, e=args.e, f=args.f, nu=args.nu,
        alpha=args.alpha, beta=args.beta, k_init=args.k_init,
        zero_threshold=args.zero_threshold, z_cutoff=args.z_cutoff,
        stable_window=args.stable_window, max_iters=args.max_iters,
        psi_floor=args.psi_floor, psi_variance_term=not args.psi_as_printed,
    )


def _write_fit_outputs(out_dir: Path, Y: DataMatrix, X, Lambda, Psi, rho, hyper, trace_header,
                       trace_rows, extra_label_cols=None) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tsv(out_dir / "lambda.tsv", Lambda)
    write_tsv(out_dir / "x.tsv", X)
    write_tsv(out_dir / "psi.tsv", Psi)
    write_tsv(out_dir / "rho.tsv", rho)
    labels = classify_factors(rho, hyper.z_cutoff)
    _, supports = threshold_loadings(Lambda, hyper.zero_threshold)
    header = ["factor", "label", "rho", "support_size"]
    extra_label_cols = extra_label_cols or {}
    header += list(extra_label_cols)
    rows = []
    for k, label in enumerate(labels):
        row = [k, label, float(rho[k]), len(supports[k])]
        row += [col[k] for col in extra_label_cols.values()]
        rows.append(row)
    write_rows(out_dir / "labels.tsv", header, rows)
    explained = pve(X, Lambda, Y) if Lambda.shape[0] else np.zeros(0)
    write_rows(out_dir / "pve.tsv", ["factor", "label", "pve"],
               [[k, labels[k], float(explained[k])] for k in range(len(labels))])
    write_rows(out_dir / "trace.tsv", trace_header, trace_rows)
    return {
        "factors": len(labels),
        "dense_factors": sum(label == DENSE for label in labels),
        "sparse_factors": sum(label != DENSE for label in labels),
    }


def _fit_one_em(Y, hyper, seed, out_dir: Path, common: dict, inputs) -> dict:
    start = time.perf_counter()
    report: FitReport = fit_em(Y, hyper, seed)
    fs, sh = report.factor_state, report.shrinkage_state
    trace_rows = [[i + 1, report.nonzero_trace[i], float(report.objective_trace[i])]
                  for i in range(report.iterations)]
    counts = _write_fit_outputs(out_dir, Y, fs.X, fs.Lambda, fs.Psi, sh.rho, hyper,
                                ["iteration", "active_loadings", "objective"], trace_rows)
    result = {
        "seed": seed,
        "converged": report.converged,
        "iterations": report.iterations,
        "final_objective": report.final_objective,
        "pruned": [list(p) for p in report.pruned],
        "factor_ids": list(report.factor_ids),
        **counts,
    }
    write_manifest(out_dir, "fit", {**common, "seed": seed}, inputs=inputs,
                   duration=time.perf_counter() - start, extra={"result": result})
    return result


def _fit_one_gibbs(Y, hyper, seed, chain, args, out_dir: Path, common: dict, inputs) -> dict:
    start = time.perf_counter()
    config = GibbsConfig(n_iters=args.gibbs_iters, burn_in=args.burn_in, thin=args.thin,
                         seed=seed, chain=chain, trace=True)
    summary = run_gibbs(Y, hyper, config)
    active = np.zeros(summary.Lambda.shape[0], dtype=int)
    active[summary.active_factors()] = 1
    traces = summary.traces
    trace_rows = [[i + 1, float(traces["eta"][i]), float(traces["gamma"][i]), float(traces["pi"][i])]
                  for i in range(summary.n_retained)]
    counts = _write_fit_outputs(
        out_dir, Y, summary.mean["X"], summary.Lambda, summary.mean["Psi"], summary.z_frequency,
        hyper, ["draw", "eta", "gamma", "pi"], trace_rows, {"active": active},
    )
    result = {
        "seed": seed,
        "chain": chain,
        "converged": True,
        "retained_draws": summary.n_retained,
        "active_factors": int(active.sum()),
        "clamp_counts": dict(sorted(summary.clamp_counts.items())),
        "final_objective": None,
        **counts,
    }
    write_manifest(out_dir, "fit", {**common, "seed": seed, "chain": chain},
                   inputs=inputs, duration=time.perf_counter() - start,
                   extra={"result": result})
    return result


def _select_best(results: List[dict], select_by: str) -> int:
    def objective_key(r):
        value = r.get("final_objective")
        return -np.inf if value is None else value

    if select_by == "factors":
        keys = [(r["factors"], objective_key(r)) for r in results]
    else:
        keys = [(objective_key(r), r["factors"]) for r in results]
    return max(range(len(results)), key=lambda i: (keys[i], -i))


def _link_best(out: Path, name: str) -> str:
    target = out / "best"
    if target.is_symlink() or target.is_file():
        target.unlink()
    elif target.exists():
        shutil.rmtree(target)
    try:
        target.symlink_to(name, target_is_directory=True)
        return "symlink"
    except OSError:
        shutil.copytree(out / name, target)
        return "copy"


def cmd_fit(args) -> int:
    hyper = _hyper_from_args(args)
    Y = read_data_matrix(args.input)
    steps = []
    if args.two_stage_pcs:
        Y = remove_pcs(Y, args.two_stage_pcs)
        steps.append({"step": "remove_pcs", "m": args.two_stage_pcs})
    if args.restarts < 1:
        raise UsageError("--restarts must be >= 1")
    common = {
        "engine": args.engine,
        "hyperparameters": hyper.to_dict(),
        "restarts": args.restarts,
        "select_by": args.select_by,
        "preprocessing": steps,
        "argv": list(args.argv),
    }
    if args.engine == "gibbs":
        common["gibbs"] = {"n_iters": args.gibbs_iters, "burn_in": args.burn_in, "thin": args.thin}
    out = Path(args.out_dir)

    def run(r: int) -> dict:
        target = out if args.restarts == 1 else out / f"restart{r}"
        if args.engine == "em":
            return _fit_one_em(Y, hyper, args.seed + r, target, common, [args.input])
        return _fit_one_gibbs(Y, hyper, args.seed, r, args, target, common, [args.input])

    results = _map(run, list(range(args.restarts)), args.threads)
    for r in results:
        if not r["converged"]:
            logger.warning("run with seed %s hit max_iters without convergence", r["seed"])
    if args.restarts > 1:
        best = _select_best(results, args.select_by)
        how = _link_best(out, f"restart{best}")
        write_json(out / "restarts.json", {
            "config": common,
            "best_restart": best,
            "best_link": how,
            "select_by": args.select_by,
            "results": results,
        })
    return EXIT_OK


# ---------------------------------------------------------------------------
# stability


def cmd_stability(args) -> int:
    L1 = read_matrix(args.first)
    L2 = read_matrix(args.second)
    if L1.shape[1] != L2.shape[1]:
        raise ModelError(
            f"dimension mismatch: {args.first} has {L1.shape[1]} columns, "
            f"{args.second} has {L2.shape[1]}"
        )
    if args.mode == "sparse":
        res = sparse_stability(L1, L2, literal=args.literal)
        payload = {
            "mode": "sparse",
            "r_s": res.r_s,
            "literal": args.literal,
            "row_terms": res.row_terms,
            "col_terms": res.col_terms,
            "zero_variance_rows": [list(res.zero_variance_rows[0]), list(res.zero_variance_rows[1])],
        }
        print(f"r_s\t{res.r_s:.17g}")
    else:
        res = dense_stability(L1, L2)
        payload = {
            "mode": "dense",
            "r_d": res.r_d,
            "dropped_rows": [list(res.dropped_row_indices[0]), list(res.dropped_row_indices[1])],
        }
        print(f"r_d\t{res.r_d:.17g}")
    payload["shapes"] = [list(L1.shape), list(L2.shape)]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "stability.json", payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# summarize


def cmd_summarize(args) -> int:
    fit_dir = Path(args.fit_dir)
    needed = ["labels.tsv", "pve.tsv", "lambda.tsv", "x.tsv"]
    missing = [name for name in needed if not (fit_dir / name).exists()]
    if missing:
        raise ModelError(f"{fit_dir}: missing fit outputs {missing}")
    labels = _read_labels(fit_dir / "labels.tsv")
    pve_values = _read_column(fit_dir / "pve.tsv", "pve")
    if labels:
        Lambda = np.atleast_2d(read_matrix(fit_dir / "lambda.tsv"))
        _, supports = threshold_loadings(Lambda, args.zero_threshold)
    else:
        supports = []
    sizes = [len(s) for s in supports]
    order = sorted(range(len(labels)), key=lambda k: (-pve_values[k], k))
    out = Path(args.out_dir) if args.out_dir else fit_dir
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "factor_summary.tsv", ["factor", "label", "support_size", "pve"],
               [[k, labels[k], sizes[k], float(pve_values[k])] for k in order])
    sparse_sizes = [sizes[k] for k in range(len(labels)) if labels[k] != DENSE]
    write_rows(out / "support_histogram.tsv", ["lower", "upper", "count"],
               support_histogram(sparse_sizes, args.bin_width))
    dense = [k for k in range(len(labels)) if labels[k] == DENSE]
    if args.covariates:
        X = np.atleast_2d(read_matrix(fit_dir / "x.tsv"))
        C, _, names = read_tsv(args.covariates)
        if C.shape[0] != X.shape[0]:
            raise ModelError(f"covariates have {C.shape[0]} rows, factors have {X.shape[0]}")
        names = names or [f"covariate{j}" for j in range(C.shape[1])]
        R = covariate_correlation(X[:, dense], C) if dense else np.zeros((0, C.shape[1]))
        write_rows(out / "covariate_correlation.tsv", ["factor"] + list(names),
                   [[k] + [float(v) for v in R[i]] for i, k in enumerate(dense)])
    print(f"factors\t{len(labels)}")
    print(f"dense\t{len(dense)}")
    print(f"sparse\t{len(labels) - len(dense)}")
    write_manifest(out, "summarize", {"fit_dir": str(fit_dir), "zero_threshold": args.zero_threshold,
                                      "bin_width": args.bin_width, "argv": list(args.argv)},
                   inputs=[fit_dir / name for name in needed]
                   + ([args.covariates] if args.covariates else []))
    return EXIT_OK


def _read_table(path: Path):
    lines = [line.rstrip("\r\n").split("\t") for line in open(path, encoding="utf-8") if line.strip()]
    if not lines:
        raise ModelError(f"{path}: empty table")
    return lines[0], lines[1:]


def _read_labels(path: Path) -> List[str]:
    header, rows = _read_table(path)
    col = header.index("label")
    return [row[col] for row in rows]


def _read_column(path: Path, name: str) -> List[float]:
    header, rows = _read_table(path)
    if name not in header:
        raise ModelError(f"{path}: no column {name!r}")
    col = header.index(name)
    return [float(row[col]) for row in rows]


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    defaults = Hyperparameters()
    parser = _Parser(prog="shrinkfactor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="generate synthetic data with planted factors")
    sim.add_argument("--preset", choices=sorted(PRESETS))
    sim.add_argument("--n", type=int)
    sim.add_argument("--p", type=int)
    sim.add_argument("--k-sparse", type=int)
    sim.add_argument("--k-dense", type=int)
    sim.add_argument("--cluster-min", type=int)
    sim.add_argument("--cluster-max", type=int)
    sim.add_argument("--noise-sd", type=float)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--replicates", type=int, default=1)
    sim.add_argument("--out-dir", default=".")
    sim.add_argument("--threads", type=int)
    sim.set_defaults(handler=cmd_simulate)

    fit = sub.add_parser("fit", help="fit the factor model to a TSV matrix")
    fit.add_argument("input", help="n x p matrix, samples as rows")
    fit.add_argument("--engine", choices=("em", "gibbs"), default="em")
    fit.add_argument("--k-init", type=int, default=defaults.k_init)
    fit.add_argument("--restarts", type=int, default=1)
    fit.add_argument("--select-by", choices=("objective", "factors"), default="objective")
    fit.add_argument("--seed", type=int, default=0)
    for name in ("a", "b", "c", "d", "e", "f", "nu", "alpha", "beta"):
        fit.add_argument(f"--{name}", type=float, default=getattr(defaults, name))
    fit.add_argument("--zero-threshold", type=float, default=defaults.zero_threshold)
    fit.add_argument("--z-cutoff", type=float, default=defaults.z_cutoff)
    fit.add_argument("--stable-window", type=int, default=defaults.stable_window)
    fit.add_argument("--max-iters", type=int, default=defaults.max_iters)
    fit.add_argument("--psi-floor", type=float, default=defaults.psi_floor)
    fit.add_argument("--psi-as-printed", action="store_true",
                     help="drop the posterior-variance term from the residual-variance update")
    fit.add_argument("--two-stage-pcs", type=int, default=0, metavar="M",
                     help="regress out the top M principal components before fitting")
    fit.add_argument("--gibbs-iters", type=int, default=2000)
    fit.add_argument("--burn-in", type=int, default=1000)
    fit.add_argument("--thin", type=int, default=1)
    fit.add_argument("--threads", type=int)
    fit.add_argument("--out-dir", default=".")
    fit.set_defaults(handler=cmd_fit)

    stab = sub.add_parser("stability", help="compare two loading matrices")
    stab.add_argument("first")
    stab.add_argument("second")
    stab.add_argument("--mode", choices=("sparse", "dense"), default="sparse")
    stab.add_argument("--literal", action="store_true",
                      help="keep the maximal entry inside the r_s penalty")
    stab.add_argument("--out-dir", default=".")
    stab.set_defaults(handler=cmd_stability)

    summ = sub.add_parser("summarize", help="per-factor tables from a fit directory")
    summ.add_argument("fit_dir")
    summ.add_argument("--covariates")
    summ.add_argument("--zero-threshold", type=float, default=defaults.zero_threshold)
    summ.add_argument("--bin-width", type=int, default=5)
    summ.add_argument("--out-dir")
    summ.set_defaults(handler=cmd_summarize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 0) is None:
            args.threads = _default_threads()
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"shrinkfactor: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"shrinkfactor: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ModelError, OSError) as exc:
        print(f"shrinkfactor: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
