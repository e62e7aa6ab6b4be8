"""Empirical risk evaluation and the damped-Newton ERM solver.

Hessians are factored with plain Cholesky everywhere; there is no
pseudo-inverse fallback, because a degenerate Hessian signals a violated
curvature assumption that the experiment harness must surface, not mask.
Non-convergence, by contrast, is ordinary data for sweep experiments and
is reported through the ``converged`` flag rather than an exception.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .brackets import localization_certificate
from .losses import LossModel

__all__ = [
    "Dataset", "RiskEval", "FitResult", "SolverOpts",
    "SingularHessianError", "InfeasibleStepError",
    "empirical_risk", "fit_erm", "score_norm", "mahalanobis",
    "mom_aggregate", "feasible_start", "localization_radius",
    "instrument_localization",
]


class SingularHessianError(np.linalg.LinAlgError):
    pass


class InfeasibleStepError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    """An n x d design with paired responses (the empirical distribution).

    Entries must be finite; response validity against a particular loss is
    checked at evaluation time, and feasibility X_i' theta > 0 for
    positive-domain losses is checked per evaluation, never stored.
    """
    design: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.design, dtype=float)
        y = np.asarray(self.responses, dtype=float)
        if X.ndim != 2:
            raise ValueError("design must be a 2-D array")
        if y.shape != (X.shape[0],):
            raise ValueError("responses must have length n = %d" % X.shape[0])
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("design/responses contain NaN or Inf")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def d(self) -> int:
        return self.design.shape[1]


@dataclass
class RiskEval:
    value: float
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None


@dataclass
class FitResult:
    theta_hat: np.ndarray
    converged: bool
    iterations: int
    final_decrement: float
    trace: list = field(default_factory=list)   # rows (value, decrement, step)

    def trace_csv_rows(self):
        """Iterate (iter, value, decrement, step) rows for CSV export."""
        for i, (value, decrement, step) in enumerate(self.trace):
            yield i, value, decrement, step


@dataclass
class SolverOpts:
    theta0: Optional[np.ndarray] = None
    tol_decrement_sq: float = 1e-12
    max_iter: int = 200
    armijo_c1: float = 1e-4
    backtrack_beta: float = 0.5
    max_halvings: int = 60


def _eta(loss: LossModel, data: Dataset, theta):
    eta = data.design @ theta
    if loss.eta_domain == "positive-reals":
        bad = np.nonzero(eta <= 0.0)[0]
        if bad.size:
            raise InfeasibleStepError(
                "infeasible theta for %s: X[%d] . theta = %g <= 0"
                % (loss.name, int(bad[0]), float(eta[bad[0]])))
    return eta


def empirical_risk(loss: LossModel, data: Dataset, theta, level: str = "hess") -> RiskEval:
    """Value / gradient / Hessian of L_n(theta) = (1/n) sum ell(y_i, X_i'theta)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.d,):
        raise ValueError("theta must have length d = %d" % data.d)
    eta = _eta(loss, data, theta)
    val, d1, d2, _ = loss.evaluate(data.responses, eta)
    out = RiskEval(float(np.mean(val)))
    if level in ("grad", "hess"):
        out.gradient = data.design.T @ (d1 / data.n)
    if level == "hess":
        Xw = data.design * (d2 / data.n)[:, None]
        H = data.design.T @ Xw
        out.hessian = 0.5 * (H + H.T)
    return out


def feasible_start(loss: LossModel, data: Dataset) -> np.ndarray:
    """Default start point: the origin, or for positive-domain losses the
    uniform direction scaled so that min_i X_i' theta0 = 1 (assumes a
    nonnegative-cone design)."""
    if loss.eta_domain != "positive-reals":
        return np.zeros(data.d)
    theta = np.full(data.d, 1.0 / data.d)
    m = float(np.min(data.design @ theta))
    if m <= 0.0:
        raise InfeasibleStepError(
            "cannot build a feasible start for %s: uniform direction gives "
            "min eta = %g" % (loss.name, m))
    return theta / m


def _feasible(loss: LossModel, data: Dataset, theta) -> bool:
    if loss.eta_domain != "positive-reals":
        return True
    return bool(np.min(data.design @ theta) > 0.0)


def fit_erm(loss: LossModel, data: Dataset, opts: Optional[SolverOpts] = None) -> FitResult:
    """Damped-Newton empirical risk minimization.

    The Newton step is damped by 1/(1+lambda) for canonically
    self-concordant losses (lambda the Newton decrement) and run through
    Armijo backtracking otherwise; either way a step is only accepted if it
    decreases the objective, so the iteration is monotone.  Infeasible
    steps for positive-domain losses are halved, erroring after
    ``max_halvings`` attempts; plain non-descent exits with
    ``converged=False`` instead of raising.
    """
    opts = opts or SolverOpts()
    theta = (np.array(opts.theta0, dtype=float) if opts.theta0 is not None
             else feasible_start(loss, data))
    if not _feasible(loss, data, theta):
        raise InfeasibleStepError("start point infeasible for %s" % loss.name)

    trace = []
    converged = False
    decrement = math.inf
    it = 0
    value = empirical_risk(loss, data, theta, "value").value
    for it in range(1, opts.max_iter + 1):
        ev = empirical_risk(loss, data, theta, "hess")
        g, H = ev.gradient, ev.hessian
        value = ev.value
        try:
            cho = sla.cho_factor(H, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            cond = float(np.linalg.cond(H))
            raise SingularHessianError(
                "empirical Hessian not positive definite at iteration %d "
                "(condition estimate %.3e)" % (it, cond)) from exc
        p = -sla.cho_solve(cho, g, check_finite=False)
        dec_sq = float(-g @ p)  # g' H^-1 g
        decrement = math.sqrt(max(dec_sq, 0.0))
        if dec_sq <= opts.tol_decrement_sq:
            converged = True
            trace.append((value, decrement, 0.0))
            break

        step = 1.0 / (1.0 + decrement) if loss.sc_class == "scb" else 1.0
        slope = float(g @ p)  # = -dec_sq < 0
        accepted = False
        for _ in range(opts.max_halvings + 1):
            cand = theta + step * p
            if not _feasible(loss, data, cand):
                step *= opts.backtrack_beta
                continue
            cand_value = empirical_risk(loss, data, cand, "value").value
            if cand_value <= value + opts.armijo_c1 * step * slope:
                accepted = True
                break
            step *= opts.backtrack_beta
        if not accepted:
            if not _feasible(loss, data, theta + step * p):
                raise InfeasibleStepError(
                    "no feasible step after %d halvings" % opts.max_halvings)
            trace.append((value, decrement, 0.0))
            break
        theta = cand
        trace.append((cand_value, decrement, step))
        value = cand_value

    final_dec = decrement if math.isfinite(decrement) else math.inf
    return FitResult(theta, converged, it, final_dec, trace)


def _chol_pd(M, what: str):
    try:
        return sla.cho_factor(np.asarray(M, dtype=float), lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        lam = float(sla.eigvalsh(M, check_finite=False)[0])
        raise SingularHessianError(
            "%s is not positive definite (smallest eigenvalue %.3e)"
            % (what, lam)) from exc


def score_norm(loss: LossModel, data: Dataset, theta_star, H) -> float:
    """|grad L_n(theta_star)| in the H^-1 norm, via triangular solve."""
    g = empirical_risk(loss, data, theta_star, "grad").gradient
    cho = _chol_pd(H, "metric H")
    z = sla.solve_triangular(cho[0], g, lower=True, check_finite=False)
    return float(np.linalg.norm(z))


def mahalanobis(a, b, M) -> float:
    """|a - b| in the M norm for positive semidefinite M."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("a and b must have the same shape")
    M = np.asarray(M, dtype=float)
    diff = a - b
    try:
        cho = sla.cho_factor(M, lower=True, check_finite=False)
        return float(np.linalg.norm(cho[0].T @ diff))
    except np.linalg.LinAlgError:
        w, V = sla.eigh(M, check_finite=False)
        scale = max(abs(w[-1]), 1.0)
        if w[0] < -1e-10 * scale:
            raise ValueError("M is not positive semidefinite "
                             "(smallest eigenvalue %.3e)" % w[0]) from None
        q = float(diff @ (V @ (np.maximum(w, 0.0) * (V.T @ diff))))
        return math.sqrt(max(q, 0.0))


def mom_aggregate(fits) -> np.ndarray:
    """Median-of-means style aggregation over subsample estimators.

    ``fits`` is a sequence of (theta_hat, H_hat) pairs; returns the
    estimate whose median distance to the others, each measured in that
    other estimate's own local metric, is smallest.  Ties break toward the
    smallest index.
    """
    fits = list(fits)
    if not fits:
        raise ValueError("need at least one fit")
    thetas = [np.asarray(t, dtype=float) for t, _ in fits]
    chols = [_chol_pd(H, "H_hat[%d]" % j) for j, (_, H) in enumerate(fits)]
    k = len(fits)
    medians = np.empty(k)
    for i in range(k):
        dist = np.empty(k)
        for j in range(k):
            dist[j] = float(np.linalg.norm(chols[j][0].T @ (thetas[i] - thetas[j])))
        medians[i] = np.median(dist)
    return thetas[int(np.argmin(medians))]


def localization_radius(loss: LossModel, data: Dataset, theta_star, Hn) -> float:
    """Certified bound on the direction-vector norm R for the localization
    certificate, from the realized sample.

    Pseudo self-concordant losses:  R = c * max_i |X_i| in the Hn^-1 norm.
    Canonical losses:               R = c * max_i |Xtilde_i|_{Hn^-1} with
    the calibrated design Xtilde_i = sqrt(ell''(y_i, X_i'theta*)) X_i.
    The declared class constant enters because the third-derivative budget
    of the line restriction scales with it.
    """
    cho = _chol_pd(Hn, "Hn")
    if loss.sc_class == "scb":
        _, _, d2, _ = loss.evaluate(data.responses, _eta(loss, data, theta_star))
        rows = data.design * np.sqrt(d2)[:, None]
    elif loss.sc_class in ("sca", "quadratic"):
        rows = data.design
    else:
        raise ValueError("no localization certificate for class %r" % loss.sc_class)
    Z = sla.solve_triangular(cho[0], rows.T, lower=True, check_finite=False)
    r = float(np.max(np.linalg.norm(Z, axis=0)))
    c = loss.sc_constant if loss.sc_class in ("sca", "scb") else 0.0
    if loss.sc_class == "sca":
        return c * r
    if loss.sc_class == "scb":
        return c * r
    return 0.0  # quadratic: remainder is exactly quadratic, certificate free


def instrument_localization(loss: LossModel, data: Dataset, theta_star, theta_hat):
    """Evaluate the localization certificate on a realized fit.

    Returns (cert, held): ``cert`` carries the precondition, ``held`` is
    whether the conclusion |theta_hat - theta*|_{Hn} <= 4 nu came true.
    All quantities use the empirical Hessian at theta*.
    """
    ev = empirical_risk(loss, data, theta_star, "hess")
    Hn = ev.hessian
    cho = _chol_pd(Hn, "Hn")
    z = sla.solve_triangular(cho[0], ev.gradient, lower=True, check_finite=False)
    nu = float(np.linalg.norm(z))
    R = localization_radius(loss, data, theta_star, Hn)
    case = "canonical" if loss.sc_class == "scb" else "pseudo"
    cert = localization_certificate(nu, R, case)
    dist = mahalanobis(theta_hat, theta_star, Hn)
    return cert, bool(dist <= cert.radius_bound + 1e-12)
