"""Seeded Monte-Carlo experiment harness.

Sweeps generate synthetic data per (n, trial) from Philox substreams keyed
by (seed, n, trial, purpose), fit the ERM, and emit one row per trial with
excess risk, score norms, the localization certificate, and the
CRB-normalized ratio.  A trial that fails to converge is a data point, not
an abort.  All CSV output is ordered by (n, trial) so files are
byte-identical across thread counts.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.special import gammainc

from . import rng as rngmod
from .erm import Dataset, SolverOpts, empirical_risk, fit_erm, instrument_localization, mahalanobis
from .losses import LossModel, loss_from_name
from .population import (GaussianDesign, GlmWellSpecified, LabelFlip,
                         LinearPlusNoise, NoiseLaw, PopulationModel,
                         RademacherDesign, effective_dimension, excess_risk,
                         excess_risk_mc, population_matrices)

__all__ = [
    "ExperimentSpec", "SweepRow", "WilksReport",
    "gen_design", "gen_response", "run_sweep", "sweep_rows_to_csv",
    "wilks_check", "critical_n_estimate", "compare_losses",
    "quantile_bootstrap_ci", "chi2_cdf", "ks_distance",
]


# ---------------------------------------------------------------------------
# Declarative experiment description
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    model: PopulationModel
    loss: LossModel
    n_grid: list
    trials: int
    delta: float = 0.05
    seed: int = 0
    outputs: Optional[str] = None
    mc_excess_samples: int = 1_000_000

    def __post_init__(self):
        ns = list(self.n_grid)
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("n_grid must be strictly increasing")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        d = self.model.dim
        if any(n < d + 1 for n in ns):
            raise ValueError("every n must be at least d+1 = %d" % (d + 1))
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0,1)")
        self.n_grid = ns

    @staticmethod
    def from_json(text: str) -> "ExperimentSpec":
        cfg = json.loads(text)
        d = int(cfg["d"])
        design_cfg = cfg.get("design", {"law": "gaussian"})
        if design_cfg["law"] == "gaussian":
            sigma = np.asarray(design_cfg.get("sigma", np.eye(d).tolist()), dtype=float)
            design = GaussianDesign(sigma)
        elif design_cfg["law"] == "rademacher":
            design = RademacherDesign(d)
        else:
            raise ValueError("unknown design law %r" % design_cfg["law"])
        mech_cfg = cfg.get("mechanism", {"kind": "glm_well_specified"})
        kind = mech_cfg["kind"]
        if kind == "glm_well_specified":
            mech = GlmWellSpecified()
        elif kind == "linear_plus_noise":
            noise = mech_cfg.get("noise", {"kind": "gaussian", "scale": 1.0})
            mech = LinearPlusNoise(NoiseLaw(noise["kind"], noise.get("scale", 1.0),
                                            noise.get("df", 5.0)))
        elif kind == "label_flip":
            mech = LabelFlip(float(mech_cfg.get("eps", 0.0)))
        else:
            raise ValueError("unknown mechanism %r" % kind)
        theta_cfg = cfg.get("theta_star", {"kind": "first_axis", "norm": 1.0})
        if isinstance(theta_cfg, list):
            theta = np.asarray(theta_cfg, dtype=float)
        elif theta_cfg.get("kind") == "first_axis":
            theta = np.zeros(d)
            theta[0] = float(theta_cfg.get("norm", 1.0))
        elif theta_cfg.get("kind") == "uniform":
            theta = np.full(d, float(theta_cfg.get("norm", 1.0)) / math.sqrt(d))
        else:
            raise ValueError("bad theta_star config")
        loss = loss_from_name(cfg.get("loss", "logistic"),
                              tau=float(cfg.get("tau", 1.0)),
                              sigma=float(cfg.get("sigma_loss", 1.0)))
        return ExperimentSpec(PopulationModel(design, mech, theta), loss,
                              [int(n) for n in cfg["n_grid"]],
                              int(cfg["trials"]),
                              float(cfg.get("delta", 0.05)),
                              int(cfg.get("seed", 0)),
                              cfg.get("outputs"))


SWEEP_COLUMNS = ["n", "trial", "converged", "excess_risk", "score_sq",
                 "h_dist_sq", "cert_held", "localization_held", "ratio_crb"]


@dataclass
class SweepRow:
    n: int
    trial: int
    converged: bool
    excess_risk: float
    score_sq: float
    h_dist_sq: float
    cert_held: bool
    localization_held: bool
    ratio_crb: float

    def as_list(self):
        return [self.n, self.trial, str(self.converged).lower(),
                repr(self.excess_risk), repr(self.score_sq),
                repr(self.h_dist_sq), str(self.cert_held).lower(),
                str(self.localization_held).lower(), repr(self.ratio_crb)]


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

def gen_design(law, n: int, d: int, seed) -> np.ndarray:
    """i.i.d. design rows; Gaussian via Cholesky of Sigma.  Deterministic
    given (seed, n, d)."""
    if hasattr(law, "dim") and law.dim != d:
        raise ValueError("law dimension %d != requested d = %d" % (law.dim, d))
    gen = rngmod.stream(seed, "design")
    return law.sample(gen, n)


def gen_response(mechanism, design: np.ndarray, loss: LossModel, theta_star,
                 seed) -> np.ndarray:
    """Responses for the given design under the mechanism.

    The flip mask of ``label_flip`` draws from its own substream so that
    eps = 0 reproduces the well-specified draw bit for bit.
    """
    eta = np.asarray(design, dtype=float) @ np.asarray(theta_star, dtype=float)
    gen = rngmod.stream(seed, "response")
    if isinstance(mechanism, LabelFlip):
        return mechanism.sample_response(gen, loss, eta,
                                         flip_rng=rngmod.stream(seed, "flip"))
    return mechanism.sample_response(gen, loss, eta)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class _SweepContext:
    H: np.ndarray
    d_eff: float
    theta_ref: np.ndarray      # population minimizer used for excess risk


def _sweep_context(spec: ExperimentSpec) -> _SweepContext:
    model, loss = spec.model, spec.loss
    if isinstance(model.mechanism, (GlmWellSpecified,)) or (
            isinstance(model.mechanism, LabelFlip) and model.mechanism.eps == 0.0):
        theta_ref = model.theta_star
    elif isinstance(model.mechanism, LinearPlusNoise):
        theta_ref = model.theta_star  # symmetric noise, even contrast
    else:
        from .population import population_minimizer
        theta_ref = population_minimizer(model, loss, seed=(spec.seed, 777))[0]
    method = "quadrature" if isinstance(model.design, GaussianDesign) else "mc"
    mats = population_matrices(model, loss, theta_ref, method=method,
                               seed=(spec.seed, 778))
    return _SweepContext(mats.hess, effective_dimension(mats.hess, mats.grad_cov),
                         theta_ref)


def _run_trial(spec: ExperimentSpec, ctx: _SweepContext, n: int, trial: int) -> SweepRow:
    model, loss = spec.model, spec.loss
    key = (spec.seed, n, trial)
    X = gen_design(model.design, n, model.dim, key)
    y = gen_response(model.mechanism, X, loss, model.theta_star, key)
    data = Dataset(X, y)
    theta_ref = ctx.theta_ref
    try:
        fit = fit_erm(loss, data, SolverOpts())
    except Exception:
        return SweepRow(n, trial, False, math.nan, math.nan, math.nan,
                        False, False, math.nan)
    score_ev = empirical_risk(loss, data, theta_ref, "grad")
    try:
        Lh = sla.cholesky(ctx.H, lower=True)
        z = sla.solve_triangular(Lh, score_ev.gradient, lower=True)
        score_sq = float(z @ z)
    except np.linalg.LinAlgError:
        score_sq = math.nan
    h_dist_sq = mahalanobis(fit.theta_hat, theta_ref, ctx.H) ** 2
    if not fit.converged:
        return SweepRow(n, trial, False, math.nan, score_sq, h_dist_sq,
                        False, False, math.nan)
    if isinstance(model.design, GaussianDesign):
        excess = excess_risk(model, loss, fit.theta_hat, theta_ref)
    else:
        excess = excess_risk_mc(model, loss, fit.theta_hat, theta_ref,
                                n_samples=spec.mc_excess_samples,
                                seed=(spec.seed, 779))[0]
    try:
        cert, held = instrument_localization(loss, data, theta_ref, fit.theta_hat)
        cert_held, loc_held = cert.holds, held
    except Exception:
        cert_held, loc_held = False, False
    ratio = excess * 2.0 * n / ctx.d_eff
    return SweepRow(n, trial, True, excess, score_sq, h_dist_sq,
                    cert_held, loc_held, ratio)


def run_sweep(spec: ExperimentSpec, threads: int = 1, progress=None):
    """All (n, trial) rows of the sweep, ordered by (n, trial).

    Trials run concurrently when ``threads`` > 1; per-trial substreams make
    the result identical for any thread count.
    """
    ctx = _sweep_context(spec)
    jobs = [(n, t) for n in spec.n_grid for t in range(spec.trials)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda nt: _run_trial(spec, ctx, *nt), jobs))
    else:
        rows = []
        for j, nt in enumerate(jobs):
            rows.append(_run_trial(spec, ctx, *nt))
            if progress and (j + 1) % progress == 0:
                print("  ... %d/%d trials" % (j + 1, len(jobs)), flush=True)
    rows.sort(key=lambda r: (r.n, r.trial))
    return rows, ctx


def sweep_rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Wilks / chi-square checks
# ---------------------------------------------------------------------------

def chi2_cdf(x, k: int):
    """Chi-square CDF via the regularized lower incomplete gamma."""
    x = np.asarray(x, dtype=float)
    return gammainc(k / 2.0, np.clip(x, 0.0, None) / 2.0)


def ks_distance(sample, cdf) -> float:
    """One-sample Kolmogorov-Smirnov distance sup |F_n - F|."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.size
    F = np.asarray(cdf(x), dtype=float)
    up = np.max(np.arange(1, n + 1) / n - F)
    down = np.max(F - np.arange(0, n) / n)
    return float(max(up, down))


@dataclass
class WilksReport:
    n: int
    trials: int
    dof: int
    mean_wilks: float       # mean of 2 n (L(theta_hat) - L(theta*))
    mean_hdist: float       # mean of n |theta_hat - theta*|_H^2
    ks_wilks: float
    ks_hdist: float
    failed_trials: int
    passed: bool

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def wilks_check(spec: ExperimentSpec, mean_rtol: float = 0.10,
                ks_tol: float = 0.05, threads: int = 1) -> WilksReport:
    """Finite-sample check of the chi-square limit laws on a single n.

    Requires a well-specified model (the limit needs G = H); computes the
    scaled excess risks and quadratic distances over trials, their means,
    and KS distances to chi^2_d.
    """
    mech = spec.model.mechanism
    well_specified = isinstance(mech, GlmWellSpecified) or (
        isinstance(mech, LabelFlip) and mech.eps == 0.0)
    if not well_specified:
        raise ValueError("wilks_check requires a well-specified mechanism")
    if len(spec.n_grid) != 1:
        raise ValueError("wilks_check wants a single n in the grid")
    rows, ctx = run_sweep(spec, threads=threads)
    n = spec.n_grid[0]
    ok = [r for r in rows if r.converged]
    wstats = np.array([2.0 * n * r.excess_risk for r in ok])
    qstats = np.array([n * r.h_dist_sq for r in ok])
    d = spec.model.dim
    mean_w = float(np.mean(wstats))
    mean_q = float(np.mean(qstats))
    ks_w = ks_distance(wstats, lambda x: chi2_cdf(x, d))
    ks_q = ks_distance(qstats, lambda x: chi2_cdf(x, d))
    passed = (abs(mean_w - d) <= mean_rtol * d and abs(mean_q - d) <= mean_rtol * d
              and ks_w <= ks_tol and ks_q <= ks_tol)
    return WilksReport(n, spec.trials, d, mean_w, mean_q, ks_w, ks_q,
                       len(rows) - len(ok), passed)


# ---------------------------------------------------------------------------
# Critical sample size and loss comparison
# ---------------------------------------------------------------------------

def quantile_bootstrap_ci(values, q: float, n_boot: int = 500, seed=0,
                          level: float = 0.95):
    """Percentile-bootstrap CI for a quantile."""
    values = np.asarray(values, dtype=float)
    gen = rngmod.stream(seed, "bootstrap")
    stats = np.empty(n_boot)
    for b in range(n_boot):
        idx = gen.integers(0, values.size, size=values.size)
        stats[b] = np.quantile(values[idx], q)
    lo = (1.0 - level) / 2.0
    return float(np.quantile(stats, lo)), float(np.quantile(stats, 1.0 - lo))


def critical_n_estimate(rows, q: float = 0.9, cap: float = 4.0, seed=0):
    """Smallest grid n whose empirical q-quantile of ratio_crb is <= cap.

    Returns (n_crit, per_n) where per_n maps n -> (quantile, ci_lo, ci_hi);
    n_crit is +inf when no grid point satisfies the cap.  Non-converged
    trials count as infinite ratios.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0,1)")
    by_n = {}
    for r in rows:
        by_n.setdefault(r.n, []).append(
            r.ratio_crb if r.converged else math.inf)
    if not by_n:
        raise ValueError("no rows")
    per_n = {}
    n_crit = math.inf
    for n in sorted(by_n):
        vals = np.asarray(by_n[n], dtype=float)
        qv = float(np.quantile(vals, q))
        finite = vals[np.isfinite(vals)]
        if finite.size:
            lo, hi = quantile_bootstrap_ci(finite, q, seed=(seed, n))
        else:
            lo = hi = math.inf
        per_n[n] = (qv, lo, hi)
        if math.isinf(n_crit) and qv <= cap:
            n_crit = n
    return n_crit, per_n


def compare_losses(spec_a: ExperimentSpec, spec_b: ExperimentSpec,
                   quantiles=(0.5, 0.9), threads: int = 1):
    """Joined sweep comparison of two losses on a shared model and grid.

    Returns (rows, ncrit_a, ncrit_b) where rows are dicts, one per
    (n, quantile), with the per-loss excess-risk quantiles and their ratio.
    """
    if spec_a.n_grid != spec_b.n_grid:
        raise ValueError("n_grid mismatch between the two specs")
    if spec_a.trials != spec_b.trials or spec_a.seed != spec_b.seed:
        raise ValueError("trials/seed mismatch between the two specs")
    rows_a, _ = run_sweep(spec_a, threads=threads)
    rows_b, _ = run_sweep(spec_b, threads=threads)
    ncrit_a, _ = critical_n_estimate(rows_a)
    ncrit_b, _ = critical_n_estimate(rows_b)
    out = []
    for n in spec_a.n_grid:
        ex_a = np.asarray([r.excess_risk for r in rows_a if r.n == n and r.converged])
        ex_b = np.asarray([r.excess_risk for r in rows_b if r.n == n and r.converged])
        for q in quantiles:
            qa = float(np.quantile(ex_a, q)) if ex_a.size else math.nan
            qb = float(np.quantile(ex_b, q)) if ex_b.size else math.nan
            out.append({
                "n": n, "quantile": q,
                "excess_q_a": qa, "excess_q_b": qb,
                "ratio": qa / qb if qb not in (0.0,) and math.isfinite(qb) else math.nan,
                "ncrit_a": ncrit_a, "ncrit_b": ncrit_b,
            })
    return out, ncrit_a, ncrit_b
