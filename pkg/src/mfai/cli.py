"""Command-line interface.

Subcommands: simulate, fit, impute, evaluate, importance, benchmark.
stdout carries machine-readable output only (numbers, CSV); everything else
goes to stderr. Exit codes: 0 success, 1 runtime failure, 2 argument errors.
All numbers print with 17 significant digits so they round-trip exactly.
"""

import argparse
import contextlib
import csv
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines, data, model as model_mod, sim
from .core import FitOptions, PER_FEATURE, SHARED


def _fmt(v):
    return format(float(v), ".17g")


def _log(message):
    print(message, file=sys.stderr)


def _noise_mode(name):
    return PER_FEATURE if name == "per-feature" else SHARED


def _fit_options(args, noise_mode):
    return FitOptions(
        max_iter=args.max_iter,
        tol_elbo_rel=args.tol,
        shrinkage=args.shrinkage,
        noise_mode=noise_mode,
        seed=args.seed,
    )


def _progress_writer(enabled):
    if not enabled:
        return None

    def write(label, iteration, value):
        print(f"{label} iter {iteration} elbo {_fmt(value)}", file=sys.stderr)

    return write


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_simulate(args):
    config = sim.SimConfig(
        n=args.n, m=args.m, c=args.c, k=args.k,
        pve=args.pve, pve_factor=args.pve_factor,
        missing_ratio=args.missing, seed=args.seed,
    )
    truth = sim.simulate_dataset(config)
    os.makedirs(args.out, exist_ok=True)
    data.save_coo(os.path.join(args.out, "y.coo"), truth.y)
    data.save_dense_csv(os.path.join(args.out, "y_true.csv"), truth.y_true)
    data.save_aux(os.path.join(args.out, "x.csv"),
                  os.path.join(args.out, "x_schema.json"), truth.x)
    with open(os.path.join(args.out, "truth.json"), "w") as fh:
        json.dump({
            "z": [[float(v) for v in row] for row in truth.z],
            "w": [[float(v) for v in row] for row in truth.w],
            "tau": truth.tau,
            "beta": [float(v) for v in truth.beta],
        }, fh, separators=(",", ":"))
        fh.write("\n")
    _log(f"wrote y.coo, y_true.csv, x.csv, x_schema.json, truth.json to {args.out}")
    return 0


def _cmd_fit(args):
    y = data.load_matrix(args.y, "auto")
    x = data.load_aux(args.aux, args.schema)
    noise_mode = _noise_mode(args.noise)
    options = _fit_options(args, noise_mode)
    progress = _progress_writer(args.progress)

    if args.k is not None:
        fitted = model_mod.fit_greedy(y, x, args.k, options, progress=progress)
    else:
        fitted = model_mod.fit_greedy_auto(
            y, x, args.k_max, sc=args.sc, options=options, progress=progress)
    if args.backfit:
        fitted = model_mod.backfit(fitted, y, x, options, progress=progress)
    model_mod.save_model(args.out, fitted)
    _log(f"fitted {fitted.k} factor(s); model written to {args.out}")
    return 0


def _cmd_impute(args):
    fitted = model_mod.load_model(args.model)
    completed = fitted.impute()
    data.save_matrix(args.out, data.as_masked(completed), args.format)
    _log(f"imputed {fitted.n}x{fitted.m} matrix written to {args.out}")
    return 0


def _cmd_evaluate(args):
    pred = data.load_matrix(args.pred, "auto")
    truth = data.load_matrix(args.truth, "auto")
    eval_set = data.load_index_set(args.eval_set)
    print(_fmt(data.rmse(pred, truth, eval_set)))
    return 0


def _cmd_importance(args):
    fitted = model_mod.load_model(args.model)
    imp = fitted.importance(normalize=args.normalize)
    names = [rec["name"] for rec in fitted.schema]
    writer = csv.writer(sys.stdout)
    writer.writerow(["factor", "covariate", "importance"])
    for j in range(imp.shape[0]):
        for c, name in enumerate(names):
            writer.writerow([j + 1, name, _fmt(imp[j, c])])
    return 0


def _cmd_benchmark(args):
    y = data.load_matrix(args.y, "auto")
    x = data.load_aux(args.aux, args.schema)
    noise_mode = _noise_mode(args.noise)
    progress = _progress_writer(args.progress)
    indices = y.observed_indices()

    writer = csv.writer(sys.stdout)
    writer.writerow(["seed", "k", "mfai_greedy", "mfai_backfit", "hard_impute"])
    sums = np.zeros(3)
    for seed in range(args.seeds):
        train_idx, test_idx = data.split_observed(
            indices, args.train_ratio, seed)
        mask = np.zeros(y.shape, dtype=bool)
        mask[train_idx[:, 0], train_idx[:, 1]] = True
        y_train = data.MaskedMatrix(y.values, mask)

        options = _fit_options(args, noise_mode)
        if args.k is not None:
            fitted = model_mod.fit_greedy(
                y_train, x, args.k, options, progress=progress)
        else:
            fitted = model_mod.fit_greedy_auto(
                y_train, x, args.k_max, sc=args.sc, options=options,
                progress=progress)
        rmse_greedy = data.rmse(fitted.impute(), y, test_idx)
        refit = model_mod.backfit(fitted, y_train, x, options,
                                  progress=progress)
        rmse_backfit = data.rmse(refit.impute(), y, test_idx)
        baseline = baselines.hard_impute(y_train, max(fitted.k, 1))
        rmse_baseline = data.rmse(baseline, y, test_idx)

        sums += (rmse_greedy, rmse_backfit, rmse_baseline)
        writer.writerow([seed, fitted.k, _fmt(rmse_greedy),
                         _fmt(rmse_backfit), _fmt(rmse_baseline)])
    means = sums / args.seeds
    writer.writerow(["mean", "", _fmt(means[0]), _fmt(means[1]),
                     _fmt(means[2])])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_fit_flags(p):
    group = p.add_mutually_exclusive_group()
    group.add_argument("--k", type=int, default=None,
                       help="fit exactly K factors")
    group.add_argument("--k-max", type=int, default=10,
                       help="cap for automatic rank choice (default 10)")
    p.add_argument("--sc", type=float, default=0.01,
                   help="signal threshold for the automatic stop (default 0.01)")
    p.add_argument("--noise", choices=["shared", "per-feature"],
                   default="shared", help="noise precision layout")
    p.add_argument("--shrinkage", type=float, default=0.1,
                   help="tree stage shrinkage (default 0.1)")
    p.add_argument("--max-iter", type=int, default=500,
                   help="EM iteration cap per factor (default 500)")
    p.add_argument("--tol", type=float, default=1e-6,
                   help="relative ELBO convergence tolerance (default 1e-6)")
    p.add_argument("--seed", type=int, default=0, help="fit seed (default 0)")
    p.add_argument("--progress", action="store_true",
                   help="write the per-iteration ELBO trace to stderr")
    p.add_argument("--threads", type=int, default=None,
                   help="cap the linear-algebra thread pool (results do not "
                        "depend on this)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mfai",
        description="Matrix factorization with tree-mapped auxiliary covariates")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--c", type=int, default=3)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--pve", type=float, default=0.5,
                   help="signal fraction of total variance (default 0.5)")
    p.add_argument("--pve-factor", type=float, default=0.95,
                   help="signal fraction per factor (default 0.95)")
    p.add_argument("--missing", type=float, default=0.5,
                   help="fraction of entries hidden (default 0.5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit a model to a partially observed matrix")
    p.add_argument("--y", required=True, help="matrix file (coo or dense CSV)")
    p.add_argument("--aux", required=True, help="covariate CSV")
    p.add_argument("--schema", required=True, help="covariate schema JSON")
    _add_fit_flags(p)
    p.add_argument("--backfit", action="store_true",
                   help="refine the greedy fit by backfitting")
    p.add_argument("--out", required=True, help="output model JSON")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("impute", help="write the completed matrix of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["dense-csv", "coo"],
                   default="dense-csv")
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser("evaluate", help="RMSE between two matrices on an index set")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--eval-set", required=True,
                   help="file of 'row col' pairs, 0-based")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("importance", help="per-factor covariate importance CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--normalize", action="store_true",
                   help="rescale each factor's importance to sum to one")
    p.set_defaults(func=_cmd_importance)

    p = sub.add_parser("benchmark",
                       help="compare imputation error against the SVD baseline")
    p.add_argument("--y", required=True)
    p.add_argument("--aux", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--train-ratio", type=float, default=0.5)
    p.add_argument("--seeds", type=int, default=10)
    _add_fit_flags(p)
    p.set_defaults(func=_cmd_benchmark)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = getattr(args, "threads", None)
    limiter = (threadpool_limits(limits=threads)
               if threads is not None else contextlib.nullcontext())
    try:
        with limiter:
            return args.func(args)
    except Exception as exc:  # runtime failures exit 1, with a diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
