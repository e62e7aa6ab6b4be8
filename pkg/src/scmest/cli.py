"""Command-line interface.

Subcommands:
  verify-losses   self-concordance audit of every registered loss (JSON)
  fit             single ERM or l1 fit from a CSV file (first column = y)
  sweep           Monte-Carlo sweep from a JSON experiment config
  wilks           chi-square limit check on a single n
  theory          logistic/Gaussian constants table over a t-grid
  sparse-sweep    lambda-path experiments on a synthetic sparse model
  compare         paired sweep of two losses on a shared model
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .erm import Dataset, fit_erm
from .experiments import (ExperimentSpec, compare_losses, critical_n_estimate,
                          run_sweep, sweep_rows_to_csv, wilks_check)
from .losses import loss_from_name, registered_losses, verify_sc
from .population import logistic_gaussian_constants
from .sparse import SparseOpts, fit_l1, lambda_path
from .svg import line_chart


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows) -> str:
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def cmd_verify_losses(args):
    reports = []
    all_pass = True
    for name, (loss, grid) in registered_losses().items():
        if loss.sc_class == "none":
            continue  # plain Huber: no C^3 certificate to audit
        rep = verify_sc(loss, grid)
        reports.append(json.loads(rep.to_json()))
        all_pass &= rep.passes and rep.fd_max_rel_err <= 1e-5
        print("%-28s %-9s ratio=%.6f declared=%.6f fd_rel=%.2e %s"
              % (name, rep.sc_class, rep.max_ratio_analytic, rep.declared_c,
                 rep.fd_max_rel_err, "pass" if rep.passes else "FAIL"))
    _write(args.out, json.dumps({"reports": reports, "all_pass": all_pass},
                                indent=2) + "\n")
    return 0 if all_pass else 2


def cmd_fit(args):
    raw = np.loadtxt(args.data, delimiter=",", skiprows=1 if args.header else 0)
    if raw.ndim == 1:
        raw = raw[None, :]
    y, X = raw[:, 0], raw[:, 1:]
    loss = loss_from_name(args.loss, tau=args.tau, sigma=args.sigma)
    data = Dataset(X, y)
    if args.l1 is not None:
        fit = fit_l1(loss, data, args.l1)
        out = {
            "loss": loss.name, "lambda": args.l1,
            "theta": fit.theta_hat.tolist(),
            "converged": fit.converged,
            "support": fit.support.tolist(),
            "outer_iterations": fit.outer_iterations,
            "objective": fit.objective,
        }
    else:
        fit = fit_erm(loss, data)
        out = {
            "loss": loss.name,
            "theta": fit.theta_hat.tolist(),
            "converged": fit.converged,
            "iterations": fit.iterations,
            "final_decrement": fit.final_decrement,
        }
    _write(args.out, json.dumps(out, indent=2) + "\n")
    if args.trace and not args.l1:
        rows = [(i, _fmt(v), _fmt(dec), _fmt(s))
                for i, v, dec, s in fit.trace_csv_rows()]
        _write(args.trace, _csv_text(["iter", "value", "decrement", "step"], rows))
    return 0


def _load_spec(args) -> ExperimentSpec:
    with open(args.config) as fh:
        spec = ExperimentSpec.from_json(fh.read())
    if args.seed is not None:
        spec.seed = args.seed
    return spec


def cmd_sweep(args):
    spec = _load_spec(args)
    threads = 1 if args.reproducible else max(1, args.threads)
    rows, ctx = run_sweep(spec, threads=threads)
    out_dir = args.out or spec.outputs or "."
    _write(os.path.join(out_dir, "sweep.csv"), sweep_rows_to_csv(rows))
    n_crit, per_n = critical_n_estimate(rows, q=args.quantile, cap=args.cap)
    summary = {
        "d_eff": ctx.d_eff,
        "n_crit": n_crit if math.isfinite(n_crit) else "inf",
        "quantile": args.quantile, "cap": args.cap,
        "per_n": {str(n): {"q": v[0], "ci": [v[1], v[2]]}
                  for n, v in per_n.items()},
    }
    _write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2) + "\n")
    ns = sorted(per_n)
    chart = line_chart(
        [("q%.2f ratio_crb" % args.quantile, ns, [per_n[n][0] for n in ns]),
         ("cap", ns, [args.cap] * len(ns))],
        title="CRB ratio quantile vs n", xlabel="n", ylabel="ratio_crb")
    _write(os.path.join(out_dir, "ratio_crb.svg"), chart)
    print("n_crit =", summary["n_crit"])
    return 0


def cmd_wilks(args):
    spec = _load_spec(args)
    rep = wilks_check(spec, threads=max(1, args.threads))
    _write(args.out, rep.to_json() + "\n")
    print("mean 2n*excess = %.4f (d = %d), KS = %.4f -> %s"
          % (rep.mean_wilks, rep.dof, rep.ks_wilks,
             "pass" if rep.passed else "FAIL"))
    return 0 if rep.passed else 2


def cmd_theory(args):
    ts = np.linspace(args.t_min, args.t_max, args.points)
    rows = []
    for t in ts:
        k, kp, rb = logistic_gaussian_constants(float(t))
        rows.append((float(t), k, kp, rb))
    _write(args.out, _csv_text(["t", "kappa", "kappa_perp", "rho_bound"], rows))
    return 0


def cmd_sparse_sweep(args):
    with open(args.config) as fh:
        cfg = json.loads(fh.read())
    spec = ExperimentSpec.from_json(json.dumps({**cfg, "n_grid": cfg["n_grid"],
                                                "trials": cfg["trials"]}))
    if args.seed is not None:
        spec.seed = args.seed
    lambdas = [float(v) for v in cfg["lambdas"]]
    from .experiments import gen_design, gen_response
    from .population import population_matrices, GaussianDesign
    from .sparse import sparse_error_metrics
    method = "quadrature" if isinstance(spec.model.design, GaussianDesign) else "mc"
    H = population_matrices(spec.model, spec.loss, method=method,
                            seed=(spec.seed, 5)).hess
    rows = []
    for n in spec.n_grid:
        for trial in range(spec.trials):
            key = (spec.seed, n, trial)
            X = gen_design(spec.model.design, n, spec.model.dim, key)
            y = gen_response(spec.model.mechanism, X, spec.loss,
                             spec.model.theta_star, key)
            data = Dataset(X, y)
            fits = lambda_path(spec.loss, data, lambdas,
                               SparseOpts(sketch_size=cfg.get("sketch_size")))
            for lam, fit in zip(lambdas, fits):
                l1e, hsq, rec = sparse_error_metrics(fit, spec.model.theta_star, H)
                rows.append((n, trial, lam, l1e, hsq, fit.support_size,
                             fit.outer_iterations, str(fit.converged).lower()))
    text = _csv_text(["n", "trial", "lambda", "l1_error", "h_sq_error",
                      "support_size", "outer_iters", "converged"], rows)
    _write(os.path.join(args.out or ".", "sparse_sweep.csv"), text)
    return 0


def cmd_compare(args):
    with open(args.config_a) as fh:
        spec_a = ExperimentSpec.from_json(fh.read())
    with open(args.config_b) as fh:
        spec_b = ExperimentSpec.from_json(fh.read())
    if args.seed is not None:
        spec_a.seed = spec_b.seed = args.seed
    rows, ncrit_a, ncrit_b = compare_losses(spec_a, spec_b,
                                            threads=max(1, args.threads))
    out_rows = [(r["n"], r["quantile"], r["excess_q_a"], r["excess_q_b"],
                 r["ratio"], r["ncrit_a"], r["ncrit_b"]) for r in rows]
    _write(args.out, _csv_text(["n", "quantile", "excess_q_a", "excess_q_b",
                                "ratio", "ncrit_a", "ncrit_b"], out_rows))
    print("n_crit: %s = %s, %s = %s" % (spec_a.loss.name, ncrit_a,
                                        spec_b.loss.name, ncrit_b))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scmest",
                                 description="self-concordant M-estimation toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-losses", help="self-concordance audit")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_verify_losses)

    p = sub.add_parser("fit", help="fit one model from a CSV file")
    p.add_argument("data")
    p.add_argument("--loss", default="logistic")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--l1", type=float, default=None, help="l1 penalty weight")
    p.add_argument("--header", action="store_true")
    p.add_argument("--out", default="-")
    p.add_argument("--trace", default=None, help="CSV path for the iteration trace")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="Monte-Carlo sweep")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--reproducible", action="store_true",
                   help="force the fixed single-thread reduction order")
    p.add_argument("--quantile", type=float, default=0.9)
    p.add_argument("--cap", type=float, default=4.0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("wilks", help="chi-square limit check")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_wilks)

    p = sub.add_parser("theory", help="logistic/Gaussian constants table")
    p.add_argument("--t-min", type=float, default=0.0)
    p.add_argument("--t-max", type=float, default=50.0)
    p.add_argument("--points", type=int, default=500)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("sparse-sweep", help="lambda-path experiments")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sparse_sweep)

    p = sub.add_parser("compare", help="paired sweep of two losses")
    p.add_argument("config_a")
    p.add_argument("config_b")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
