"""l1-regularized M-estimation via proximal Newton.

The outer loop builds a quadratic model from the gradient and (optionally
subsampled) Hessian of the empirical risk; the inner loop solves the
l1-penalized model by cyclic coordinate descent with exact soft-threshold
updates (see ``kernels``), followed by a line search on the true
objective.  Convergence is certified by the subgradient optimality
conditions, never just by iteration count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .erm import Dataset, empirical_risk
from .kernels import cd_l1_quadratic
from .losses import LossModel

__all__ = [
    "SparseFit", "SparseOpts", "ConeReport",
    "soft_threshold", "fit_l1", "lambda_path", "cone_re_check",
    "sparse_error_metrics", "kkt_residuals",
]

SUPPORT_TOL = 1e-10
KKT_TOL = 1e-6


def soft_threshold(v, t: float):
    """Componentwise sign(v) * max(|v| - t, 0)."""
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


@dataclass
class SparseOpts:
    theta0: Optional[np.ndarray] = None
    tol_decrement: float = 1e-10    # outer stop on the model decrease
    inner_tol: float = 1e-12
    max_outer: int = 100
    max_inner_sweeps: int = 1000
    max_halvings: int = 60
    armijo_c1: float = 1e-4
    sketch_size: Optional[int] = None
    sketch_seed: int = 0


@dataclass
class SparseFit:
    theta_hat: np.ndarray
    lam: float
    support: np.ndarray             # indices with |theta_j| > 1e-10
    inner_iterations: int
    outer_iterations: int
    converged: bool
    sketch_size: Optional[int] = None
    jittered: bool = False
    objective: float = math.nan
    kkt_on_support: float = math.nan   # max |grad_j + lam sign(theta_j)|
    kkt_off_support: float = math.nan  # max |grad_j| off support

    @property
    def support_size(self) -> int:
        return int(self.support.size)


def _kkt_from_grad(g, theta, lam):
    on = np.abs(theta) > SUPPORT_TOL
    r_on = float(np.max(np.abs(g[on] + lam * np.sign(theta[on])))) if np.any(on) else 0.0
    r_off = float(np.max(np.abs(g[~on]))) if np.any(~on) else 0.0
    return r_on, r_off


def kkt_residuals(loss: LossModel, data: Dataset, theta, lam: float):
    """(on_support, off_support) subgradient residuals at theta."""
    g = empirical_risk(loss, data, theta, "grad").gradient
    return _kkt_from_grad(g, theta, lam)


def _model_hessian(loss, data, theta, opts, outer_idx):
    """Full empirical Hessian, or the subsample estimate
    H_m = (1/m) sum_j Xtilde_j Xtilde_j' drawn without replacement."""
    m = opts.sketch_size
    if m is None or m >= data.n:
        return empirical_risk(loss, data, theta, "hess").hessian, data.n
    gen = rngmod.stream(opts.sketch_seed, "sketch", outer_idx)
    idx = gen.choice(data.n, size=m, replace=False)
    X = data.design[idx]
    _, _, d2, _ = loss.evaluate(data.responses[idx], X @ theta)
    H = (X * (d2 / m)[:, None]).T @ X
    return 0.5 * (H + H.T), m


def fit_l1(loss: LossModel, data: Dataset, lam: float,
           opts: Optional[SparseOpts] = None) -> SparseFit:
    """Solve min_theta L_n(theta) + lam * |theta|_1 by proximal Newton."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    opts = opts or SparseOpts()
    theta = (np.array(opts.theta0, dtype=float) if opts.theta0 is not None
             else np.zeros(data.d))

    jittered = False
    inner_total = 0
    converged = False
    outer = 0
    value = empirical_risk(loss, data, theta, "value").value
    for outer in range(1, opts.max_outer + 1):
        g = empirical_risk(loss, data, theta, "grad").gradient
        r_on, r_off = _kkt_from_grad(g, theta, lam)
        if r_on <= KKT_TOL and r_off <= lam + KKT_TOL:
            converged = True
            break
        H, _ = _model_hessian(loss, data, theta, opts, outer)
        if np.any(np.diag(H) <= 0.0):
            H = H + (1e-10 * np.trace(H) / data.d + 1e-300) * np.eye(data.d)
            jittered = True

        z = theta.copy()
        inner_total += int(cd_l1_quadratic(H, g, theta, z, lam,
                                           opts.inner_tol, opts.max_inner_sweeps))
        p = z - theta
        dec = -(g @ p + 0.5 * p @ H @ p + lam * (np.abs(z).sum() - np.abs(theta).sum()))
        if dec <= opts.tol_decrement:
            # stalled model: take the prox point (costs at most the
            # decrement) and let the subgradient certificate decide
            cand_value = empirical_risk(loss, data, z, "value").value
            if cand_value + lam * np.abs(z).sum() <= value + lam * np.abs(theta).sum() + opts.tol_decrement:
                theta = z
                value = cand_value
            r_on, r_off = kkt_residuals(loss, data, theta, lam)
            converged = r_on <= KKT_TOL and r_off <= lam + KKT_TOL
            break

        slope = float(g @ p) + lam * (float(np.abs(z).sum()) - float(np.abs(theta).sum()))
        step = 1.0
        accepted = False
        for _ in range(opts.max_halvings + 1):
            cand = theta + step * p
            cand_value = empirical_risk(loss, data, cand, "value").value
            cand_obj = cand_value + lam * float(np.abs(cand).sum())
            cur_obj = value + lam * float(np.abs(theta).sum())
            if cand_obj <= cur_obj + opts.armijo_c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        theta = cand
        value = cand_value

    r_on, r_off = kkt_residuals(loss, data, theta, lam)
    certified = (r_on <= KKT_TOL) and (r_off <= lam + KKT_TOL)
    support = np.nonzero(np.abs(theta) > SUPPORT_TOL)[0]
    obj = empirical_risk(loss, data, theta, "value").value + lam * float(np.abs(theta).sum())
    return SparseFit(theta, lam, support, inner_total, outer,
                     converged and certified, opts.sketch_size, jittered,
                     obj, r_on, r_off)


def lambda_path(loss: LossModel, data: Dataset, lambdas,
                opts: Optional[SparseOpts] = None):
    """Warm-started fits from the largest lambda down; yields SparseFit."""
    opts = opts or SparseOpts()
    order = np.argsort(lambdas)[::-1]
    theta = (np.array(opts.theta0, dtype=float) if opts.theta0 is not None
             else np.zeros(data.d))
    fits = [None] * len(lambdas)
    for i in order:
        o = SparseOpts(**{**opts.__dict__, "theta0": theta})
        fit = fit_l1(loss, data, float(lambdas[i]), o)
        theta = fit.theta_hat
        fits[i] = fit
    return fits


@dataclass
class ConeReport:
    s: int
    ratio_checks: np.ndarray    # realized |Delta_Sc|_1 / |Delta_S|_1 per sample
    re_lower: float             # min of |Delta|_M^2 / |Delta|_2^2
    re_upper: float
    quad_ratios: np.ndarray = field(default_factory=lambda: np.empty(0))


def cone_re_check(M, s: int, trials: int, seed=0) -> ConeReport:
    """Empirical restricted-eigenvalue range of M over the cone
    |Delta_Sc|_1 <= 3 |Delta_S|_1 with random supports of size s."""
    M = np.asarray(M, dtype=float)
    d = M.shape[0]
    if not 1 <= s <= d:
        raise ValueError("need 1 <= s <= d")
    if trials < 1:
        raise ValueError("need at least one trial")
    gen = rngmod.stream(seed, "cone")
    lo, hi = math.inf, -math.inf
    ratios = np.empty(trials)
    quads = np.empty(trials)
    for k in range(trials):
        S = gen.choice(d, size=s, replace=False)
        delta = np.zeros(d)
        delta[S] = gen.standard_normal(s)
        l1_S = float(np.abs(delta[S]).sum())
        mask = np.ones(d, dtype=bool)
        mask[S] = False
        comp = np.nonzero(mask)[0]
        if comp.size:
            u = gen.random()
            mags = gen.random(comp.size)
            tot = mags.sum()
            if tot > 0:
                mags *= (u * 3.0 * l1_S) / tot
            delta[comp] = mags * gen.choice([-1.0, 1.0], size=comp.size)
            ratios[k] = u * 3.0
        else:
            ratios[k] = 0.0
        q = float(delta @ M @ delta) / float(delta @ delta)
        quads[k] = q
        lo = min(lo, q)
        hi = max(hi, q)
    return ConeReport(s, ratios, lo, hi, quads)


def sparse_error_metrics(fit: SparseFit, theta_star, H):
    """(l1_error, h_sq_error, support_recovered) against the truth."""
    theta_star = np.asarray(theta_star, dtype=float)
    if theta_star.shape != fit.theta_hat.shape:
        raise ValueError("dimension mismatch")
    diff = fit.theta_hat - theta_star
    l1 = float(np.abs(diff).sum())
    hsq = float(diff @ np.asarray(H, dtype=float) @ diff)
    true_support = set(np.nonzero(np.abs(theta_star) > SUPPORT_TOL)[0].tolist())
    got = set(fit.support.tolist())
    return l1, hsq, true_support.issubset(got)
