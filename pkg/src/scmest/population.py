"""Population-level quantities for synthetic models.

For Gaussian designs most expectations reduce, by rotation invariance, to
one- or two-dimensional Gaussian integrals over the span of the relevant
parameter directions; those are evaluated with Gauss-Hermite rules (the
sharply peaked logistic constants use adaptive quadrature instead).  A
chunked Monte-Carlo path covers everything else, with per-chunk Philox
substreams and a fixed reduction order so results are bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.integrate import quad
from scipy.special import expit

from . import rng as rngmod
from .erm import (Dataset, SingularHessianError, SolverOpts, empirical_risk,
                  fit_erm)
from .losses import LossModel, to_signed_labels

__all__ = [
    "GaussianDesign", "RademacherDesign", "NoiseLaw",
    "GlmWellSpecified", "LinearPlusNoise", "LabelFlip", "PopulationModel",
    "PopulationMatrices", "TheoryReport", "RestrictedExcess",
    "population_minimizer", "population_matrices", "effective_dimension",
    "curvature_rho", "psi2_estimate", "logistic_gaussian_constants",
    "excess_risk", "excess_risk_mc", "restricted_excess_risk",
    "theory_report", "k2bar_estimate",
]

GH_NODES = 200
_MC_CHUNK = 200_000


# ---------------------------------------------------------------------------
# Model declaration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianDesign:
    sigma: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.sigma, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("sigma must be square")
        try:
            sla.cholesky(S, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("sigma must be positive definite") from exc
        object.__setattr__(self, "sigma", S)

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    def sigma_matrix(self) -> np.ndarray:
        return self.sigma

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        L = sla.cholesky(self.sigma, lower=True)
        return rng.standard_normal((n, self.dim)) @ L.T


@dataclass(frozen=True)
class RademacherDesign:
    dim: int

    def sigma_matrix(self) -> np.ndarray:
        return np.eye(self.dim)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(0, 2, size=(n, self.dim)).astype(float) * 2.0 - 1.0


@dataclass(frozen=True)
class NoiseLaw:
    """Symmetric response noise: gaussian / laplace / student_t."""
    kind: str
    scale: float = 1.0
    df: float = 5.0

    def variance(self) -> float:
        if self.kind == "gaussian":
            return self.scale ** 2
        if self.kind == "laplace":
            return 2.0 * self.scale ** 2
        if self.kind == "student_t":
            if self.df <= 2:
                return math.inf
            return self.scale ** 2 * self.df / (self.df - 2.0)
        raise ValueError("unknown noise kind %r" % self.kind)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            return self.scale * rng.standard_normal(n)
        if self.kind == "laplace":
            return rng.laplace(0.0, self.scale, size=n)
        if self.kind == "student_t":
            return self.scale * rng.standard_t(self.df, size=n)
        raise ValueError("unknown noise kind %r" % self.kind)

    def expectation(self, f) -> float:
        """E[f(eps)] by adaptive quadrature against the noise density."""
        if self.kind == "gaussian":
            dens = lambda x: math.exp(-0.5 * (x / self.scale) ** 2) / (
                self.scale * math.sqrt(2 * math.pi))
            lim = 10 * self.scale
        elif self.kind == "laplace":
            dens = lambda x: math.exp(-abs(x) / self.scale) / (2 * self.scale)
            lim = 40 * self.scale
        elif self.kind == "student_t":
            from scipy.stats import t as tdist
            dens = lambda x: tdist.pdf(x / self.scale, self.df) / self.scale
            lim = 400 * self.scale
        else:
            raise ValueError("unknown noise kind %r" % self.kind)
        val = 0.0
        for a, b in ((-lim, 0.0), (0.0, lim)):
            val += quad(lambda x: f(x) * dens(x), a, b, limit=400)[0]
        return val


@dataclass(frozen=True)
class GlmWellSpecified:
    kind: str = "glm_well_specified"

    def sample_response(self, rng, loss: LossModel, eta_star):
        return _sample_glm(rng, loss, eta_star)


@dataclass(frozen=True)
class LinearPlusNoise:
    noise: NoiseLaw
    kind: str = "linear_plus_noise"

    def sample_response(self, rng, loss: LossModel, eta_star):
        return eta_star + self.noise.sample(rng, eta_star.shape[0])


@dataclass(frozen=True)
class LabelFlip:
    """Well-specified binary labels flipped with probability eps.

    The flip mask is drawn from its own substream, so eps = 0 reproduces
    the well-specified draw bit for bit.
    """
    eps: float
    kind: str = "label_flip"

    def __post_init__(self):
        if not 0.0 <= self.eps < 0.5:
            raise ValueError("flip probability must be in [0, 1/2)")

    def sample_response(self, rng, loss: LossModel, eta_star, flip_rng=None):
        if loss.response_space not in ("binary01", "signed-binary"):
            raise ValueError("label_flip needs a binary loss, got %s" % loss.name)
        y = rng.binomial(1, expit(eta_star)).astype(float)
        flip_rng = flip_rng if flip_rng is not None else rng
        mask = (flip_rng.random(eta_star.shape[0]) < self.eps)
        y = np.where(mask, 1.0 - y, y)
        if loss.response_space == "signed-binary":
            y = to_signed_labels(y)
        return y


def _sample_glm(rng, loss: LossModel, eta_star):
    if loss.family == "logistic":
        return rng.binomial(1, expit(eta_star)).astype(float)
    if loss.family == "poisson":
        return rng.poisson(np.exp(eta_star)).astype(float)
    if loss.family == "exponential_response":
        # Y has density eta * exp(y * eta) on y < 0, so E[Y] = -1/eta
        if np.any(eta_star <= 0):
            raise ValueError("exponential response needs eta > 0 everywhere")
        return -rng.exponential(1.0 / eta_star)
    if loss.family == "quadratic":
        sigma = loss.params[0]
        return eta_star + sigma * rng.standard_normal(eta_star.shape[0])
    if loss.family == "sc_logistic":
        # well-specified under the logistic likelihood, signed labels
        return to_signed_labels(rng.binomial(1, expit(eta_star)).astype(float))
    raise ValueError("no well-specified sampler for loss %s" % loss.name)


@dataclass(frozen=True)
class PopulationModel:
    design: object            # GaussianDesign | RademacherDesign
    mechanism: object         # GlmWellSpecified | LinearPlusNoise | LabelFlip
    theta_star: np.ndarray    # truth of the generating mechanism

    def __post_init__(self):
        t = np.asarray(self.theta_star, dtype=float)
        if t.shape != (self.dim,):
            raise ValueError("theta_star must have length d = %d" % self.dim)
        object.__setattr__(self, "theta_star", t)

    @property
    def dim(self) -> int:
        return (self.design.dim if hasattr(self.design, "dim")
                else self.design.sigma.shape[0])

    def sample(self, loss: LossModel, n: int, rng, flip_rng=None):
        X = self.design.sample(rng, n)
        eta = X @ self.theta_star
        if isinstance(self.mechanism, LabelFlip):
            y = self.mechanism.sample_response(rng, loss, eta, flip_rng=flip_rng)
        else:
            y = self.mechanism.sample_response(rng, loss, eta)
        return X, y


# ---------------------------------------------------------------------------
# GLM structural glue for quadrature
# ---------------------------------------------------------------------------

def _cumulant_funcs(loss: LossModel):
    """(abar, aprime, a2) for losses of the form -y*eta + abar(eta) up to a
    response-only constant and a fixed positive scale (quadratic loss)."""
    if loss.family == "logistic":
        return (lambda e: np.logaddexp(0.0, e), expit,
                lambda e: expit(e) * expit(-e))
    if loss.family == "poisson":
        return np.exp, np.exp, np.exp
    if loss.family == "exponential_response":
        return (lambda e: -np.log(e), lambda e: -1.0 / e, lambda e: e ** -2.0)
    if loss.family == "quadratic":
        s2 = loss.params[0] ** 2
        return (lambda e: 0.5 * e * e / s2, lambda e: e / s2,
                lambda e: np.full_like(np.asarray(e, dtype=float), 1.0 / s2))
    raise ValueError("loss %s has no GLM structure" % loss.name)


def _conditional_moments(model: PopulationModel, loss: LossModel):
    """(m1, m2): conditional E[Y | eta*] and E[Y^2 | eta*] as functions."""
    mech = model.mechanism
    if isinstance(mech, GlmWellSpecified):
        if loss.family == "logistic":
            return expit, expit
        if loss.family == "poisson":
            return np.exp, lambda e: np.exp(e) + np.exp(2.0 * e)
        if loss.family == "exponential_response":
            return (lambda e: -1.0 / e, lambda e: 2.0 / e ** 2)
        if loss.family == "quadratic":
            s2 = loss.params[0] ** 2
            return (lambda e: e, lambda e: e * e + s2)
        if loss.family == "sc_logistic":
            # signed labels, logistic likelihood: E[Y] = 2 sigma(eta*) - 1
            return (lambda e: 2.0 * expit(e) - 1.0,
                    lambda e: np.ones_like(np.asarray(e, dtype=float)))
        raise ValueError("no conditional moments for %s" % loss.name)
    if isinstance(mech, LinearPlusNoise):
        v = mech.noise.variance()
        return (lambda e: e, lambda e: e * e + v)
    if isinstance(mech, LabelFlip):
        eps = mech.eps
        if loss.response_space == "binary01":
            m1 = lambda e: eps + (1.0 - 2.0 * eps) * expit(e)
            return m1, m1
        # signed labels: E[Y] = (1-2eps)(2 sigma - 1), Y^2 = 1
        return (lambda e: (1.0 - 2.0 * eps) * (2.0 * expit(e) - 1.0),
                lambda e: np.ones_like(np.asarray(e, dtype=float)))
    raise ValueError("unknown mechanism %r" % mech)


# ---------------------------------------------------------------------------
# Gaussian reductions
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _gh_nodes(k: int, n: int = GH_NODES):
    x, w = np.polynomial.hermite.hermgauss(n)
    z = math.sqrt(2.0) * x
    w = w / math.sqrt(math.pi)
    if k == 1:
        z, w = z[None, :], w
    else:
        z = np.stack(np.meshgrid(z, z, indexing="ij"), axis=0).reshape(2, -1)
        w = np.outer(w, w).reshape(-1)
    z.flags.writeable = False
    w.flags.writeable = False
    return z, w


def _gaussian_weighted_moment(Sigma, dirs, wfun, want_matrix=True):
    """E[w(s) X X'] (or E[w(s)]) for X ~ N(0, Sigma), s = (dirs' X).

    ``wfun`` receives a (len(dirs), m) array of span coordinates and
    returns m weights.  Zero or collinear directions are dropped from the
    integration basis and their coordinates reconstructed as linear
    functions of the kept ones, so callers always see all coordinates.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    full = [np.asarray(v, dtype=float) for v in dirs]
    norms2 = [float(v @ Sigma @ v) for v in full]
    keep = []
    for j, v in enumerate(full):
        if norms2[j] <= 1e-300:
            continue
        if keep:
            u = full[keep[0]]
            c2 = float(u @ Sigma @ v) ** 2 / (norms2[keep[0]] * norms2[j])
            if 1.0 - c2 <= 1e-12:
                continue
        keep.append(j)
    k = len(keep)
    if k == 0:
        s_full = np.zeros((len(full), 1))
        vals = np.asarray(wfun(s_full), dtype=float)
        Ew = float(vals[0])
        return (Ew * Sigma if want_matrix else Ew)
    B = np.stack([full[j] for j in keep], axis=1)
    Gbb = B.T @ Sigma @ B
    Ls = sla.cholesky(Gbb, lower=True)
    z, w = _gh_nodes(k)
    s = Ls @ z  # (k, m) coordinates of the kept directions
    # reconstruct every requested coordinate from the kept basis
    coef = np.linalg.solve(Gbb, B.T @ Sigma @ np.stack(full, axis=1))  # (k, all)
    s_full = coef.T @ s
    vals = np.asarray(wfun(s_full), dtype=float)
    Ew = float(np.sum(w * vals))
    if not want_matrix:
        return Ew
    A = Sigma @ B @ np.linalg.inv(Gbb)
    C = Sigma - A @ Gbb @ A.T
    Ess = (s * (w * vals)) @ s.T  # (k, k) second moments under the weight
    M = Ew * C + A @ Ess @ A.T
    return 0.5 * (M + M.T)


def _require_gaussian(model: PopulationModel):
    if not isinstance(model.design, GaussianDesign):
        raise ValueError("quadrature path requires a Gaussian design")
    return model.design.sigma


# ---------------------------------------------------------------------------
# Matrices, d_eff, rho
# ---------------------------------------------------------------------------

@dataclass
class PopulationMatrices:
    sigma: np.ndarray
    hess: np.ndarray        # H at the evaluation point
    grad_cov: np.ndarray    # G at the evaluation point
    method: str
    se_hess: Optional[np.ndarray] = None
    se_grad_cov: Optional[np.ndarray] = None


def population_matrices(model: PopulationModel, loss: LossModel,
                        theta_eval=None, method: str = "quadrature",
                        n_samples: int = 1_000_000, seed=0) -> PopulationMatrices:
    """Sigma, H(theta_eval) and G(theta_eval) for the synthetic model.

    ``theta_eval`` defaults to the mechanism truth; pass the computed
    population minimizer for misspecified mechanisms.  The quadrature
    method needs a Gaussian design and reduces to integrals over the span
    of (theta_eval, theta_star); the MC method draws ``n_samples`` points
    and reports per-entry standard errors.
    """
    theta_eval = (model.theta_star if theta_eval is None
                  else np.asarray(theta_eval, dtype=float))
    Sigma = model.design.sigma_matrix()
    if method == "quadrature":
        _require_gaussian(model)
        if loss.eta_domain == "positive-reals":
            raise ValueError("Gaussian quadrature is incompatible with a "
                             "positive-domain loss (infeasible predictors)")
        if loss.family == "contrast":
            if not isinstance(model.mechanism, LinearPlusNoise):
                raise ValueError("contrast losses need the linear_plus_noise "
                                 "mechanism for quadrature")
            if not np.allclose(theta_eval, model.theta_star):
                raise ValueError("contrast quadrature only at theta_star")
            w2 = model.mechanism.noise.expectation(
                lambda e: float(loss.evaluate(np.array([e]), np.array([0.0]))[2][0]))
            w1sq = model.mechanism.noise.expectation(
                lambda e: float(loss.evaluate(np.array([e]), np.array([0.0]))[1][0] ** 2))
            return PopulationMatrices(Sigma, w2 * Sigma, w1sq * Sigma, "quadrature")
        _, aprime, a2 = _cumulant_funcs(loss)
        m1, m2 = _conditional_moments(model, loss)
        dirs = [theta_eval, model.theta_star]

        def w_hess(s):
            return a2(s[0])

        def w_gcov(s):
            ap = aprime(s[0])
            return ap * ap - 2.0 * ap * m1(s[1]) + m2(s[1])

        H = _gaussian_weighted_moment(Sigma, dirs, w_hess)
        G = _gaussian_weighted_moment(Sigma, dirs, w_gcov)
        return PopulationMatrices(Sigma, H, G, "quadrature")

    if method != "mc":
        raise ValueError("method must be 'quadrature' or 'mc', got %r" % method)

    d = model.dim
    sum_h = np.zeros((d, d))
    sum_h2 = np.zeros((d, d))
    sum_g = np.zeros((d, d))
    sum_g2 = np.zeros((d, d))
    done = 0
    chunk_idx = 0
    while done < n_samples:
        m = min(_MC_CHUNK, n_samples - done)
        gen = rngmod.stream(seed, "mc", chunk_idx)
        X, y = model.sample(loss, m, gen, flip_rng=rngmod.stream(seed, "flip", chunk_idx))
        eta = X @ theta_eval
        _, d1, d2, _ = loss.evaluate(y, eta)
        A = X * X  # elementwise squares, for per-entry second moments
        sum_h += (X * d2[:, None]).T @ X
        sum_g += (X * (d1 * d1)[:, None]).T @ X
        sum_h2 += (A * (d2 * d2)[:, None]).T @ A
        sum_g2 += (A * (d1 ** 4)[:, None]).T @ A
        done += m
        chunk_idx += 1
    H = sum_h / n_samples
    G = sum_g / n_samples
    se_h = np.sqrt(np.maximum(sum_h2 / n_samples - H * H, 0.0) / n_samples)
    se_g = np.sqrt(np.maximum(sum_g2 / n_samples - G * G, 0.0) / n_samples)
    H = 0.5 * (H + H.T)
    G = 0.5 * (G + G.T)
    return PopulationMatrices(Sigma, H, G, "mc", se_h, se_g)


def effective_dimension(H, G) -> float:
    """tr(H^-1 G), the misspecification-aware replacement for d."""
    H = np.asarray(H, dtype=float)
    G = np.asarray(G, dtype=float)
    try:
        cho = sla.cho_factor(H, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError("H must be positive definite") from exc
    return float(np.trace(sla.cho_solve(cho, G, check_finite=False)))


def curvature_rho(Sigma, H) -> float:
    """Smallest rho with Sigma <= rho * H (largest whitened eigenvalue)."""
    Sigma = np.asarray(Sigma, dtype=float)
    H = np.asarray(H, dtype=float)
    try:
        L = sla.cholesky(H, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError("H must be positive definite") from exc
    A = sla.solve_triangular(L, Sigma, lower=True, check_finite=False)
    A = sla.solve_triangular(L, A.T, lower=True, check_finite=False)
    return float(sla.eigvalsh(0.5 * (A + A.T), check_finite=False)[-1])


# ---------------------------------------------------------------------------
# Subgaussian-constant and boundedness estimators
# ---------------------------------------------------------------------------

def psi2_estimate(samples: np.ndarray, directions: int = 64, seed=0) -> float:
    """Moment-based estimate of the psi_2 norm, up to a universal constant.

    max over random unit directions u and p in {2,4,6,8} of
    (mean |<Z,u>|^p)^{1/p} / sqrt(p).  Relative diagnostic only.
    """
    Z = np.asarray(samples, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 1000:
        raise ValueError("need a 2-D sample array with at least 1000 rows")
    gen = rngmod.stream(seed, "directions")
    U = gen.standard_normal((Z.shape[1], directions))
    U /= np.linalg.norm(U, axis=0, keepdims=True)
    proj = np.abs(Z @ U)
    best = 0.0
    for p in (2, 4, 6, 8):
        mom = np.mean(proj ** p, axis=0) ** (1.0 / p) / math.sqrt(p)
        best = max(best, float(np.max(mom)))
    return best


def logistic_gaussian_constants(t: float):
    """(kappa, kappa_perp, rho_bound) for logistic regression with standard
    Gaussian design at signal strength t = |theta*|_Sigma.

    kappa      = int a''(t u) u^2 phi(u) du   (spiked direction)
    kappa_perp = int a''(t u) phi(u) du       (orthogonal directions)
    rho_bound  = 1 / min(kappa, kappa_perp)

    Adaptive quadrature split at the origin: the integrand concentrates in
    a window of width ~1/t, which fixed Gauss-Hermite rules under-resolve
    for t beyond ~20.  The integrand is below 1e-30 outside |u| <= 12.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    phi_n = 1.0 / math.sqrt(2.0 * math.pi)

    def a2(u):
        e = t * u
        return expit(e) * expit(-e)

    kappa = kperp = 0.0
    for a, b in ((-12.0, 0.0), (0.0, 12.0)):
        kappa += quad(lambda u: a2(u) * u * u * phi_n * math.exp(-0.5 * u * u),
                      a, b, limit=400)[0]
        kperp += quad(lambda u: a2(u) * phi_n * math.exp(-0.5 * u * u),
                      a, b, limit=400)[0]
    return kappa, kperp, 1.0 / min(kappa, kperp)


# ---------------------------------------------------------------------------
# Population minimizer and excess risk
# ---------------------------------------------------------------------------

def population_minimizer(model: PopulationModel, loss: LossModel,
                         n_samples: int = 100_000, seed=0):
    """(theta, stderr): the population risk minimizer and a per-coordinate
    MC standard error (zero for the exact well-specified case)."""
    if isinstance(model.mechanism, GlmWellSpecified) or (
            isinstance(model.mechanism, LabelFlip) and model.mechanism.eps == 0.0):
        return model.theta_star.copy(), np.zeros(model.dim)
    gen = rngmod.stream(seed, "mc", 0)
    X, y = model.sample(loss, n_samples, gen,
                        flip_rng=rngmod.stream(seed, "flip", 0))
    data = Dataset(X, y)
    fit = fit_erm(loss, data, SolverOpts())
    if not fit.converged:
        raise RuntimeError("population-minimizer ERM did not converge")
    ev = empirical_risk(loss, data, fit.theta_hat, "hess")
    _, d1, _, _ = loss.evaluate(y, X @ fit.theta_hat)
    Gn = (X * d1[:, None]).T @ (X * d1[:, None]) / n_samples
    cho = sla.cho_factor(ev.hessian, lower=True, check_finite=False)
    Hi = sla.cho_solve(cho, np.eye(model.dim), check_finite=False)
    cov = Hi @ Gn @ Hi / n_samples
    return fit.theta_hat, np.sqrt(np.maximum(np.diag(cov), 0.0))


def _bregman_excess_quadrature(model, loss, theta, theta_ref):
    """E[ell(Y, eta) - ell(Y, eta_ref)] over the Gaussian design.

    When the reference point is the mechanism truth the integrand is the
    nonnegative Bregman form abar(eta) - abar(eta_ref) - m1(eta_ref) *
    (eta - eta_ref), which keeps the quadrature well conditioned for the
    tiny differences the sweeps measure.  Otherwise the two risks are
    integrated against the truth separately and differenced.
    """
    Sigma = _require_gaussian(model)
    abar, _, _ = _cumulant_funcs(loss)
    m1, _ = _conditional_moments(model, loss)
    theta = np.asarray(theta, dtype=float)
    theta_ref = np.asarray(theta_ref, dtype=float)
    truth = model.theta_star

    if np.allclose(truth, theta_ref):
        def w(s):
            eta, eta_s = s[0], s[1]
            return abar(eta) - abar(eta_s) - m1(eta_s) * (eta - eta_s)
        return _gaussian_weighted_moment(Sigma, [theta, theta_ref], w,
                                         want_matrix=False)

    def w_vs_truth(s):
        return abar(s[0]) - m1(s[1]) * s[0]

    e1 = _gaussian_weighted_moment(Sigma, [theta, truth], w_vs_truth,
                                   want_matrix=False)
    e2 = _gaussian_weighted_moment(Sigma, [theta_ref, truth], w_vs_truth,
                                   want_matrix=False)
    return e1 - e2


def excess_risk(model: PopulationModel, loss: LossModel, theta, theta_star,
                method: str = "quadrature", n_samples: int = 1_000_000,
                seed=0) -> float:
    """L(theta) - L(theta_star) for the synthetic model.

    Gaussian designs use span quadrature (exact to quadrature tolerance);
    other designs use common-random-numbers MC, which evaluates both
    parameter values on the same draws.
    """
    theta = np.asarray(theta, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(theta_star))):
        raise ValueError("parameters must be finite")
    if method == "quadrature":
        if loss.family == "contrast":
            if not isinstance(model.mechanism, LinearPlusNoise):
                raise ValueError("contrast quadrature needs linear_plus_noise")
            Sigma = _require_gaussian(model)
            diff = theta - model.theta_star
            ref = theta_star - model.theta_star
            s1 = math.sqrt(max(diff @ Sigma @ diff, 0.0))
            s0 = math.sqrt(max(ref @ Sigma @ ref, 0.0))
            z, w = _gh_nodes(1)
            noise = model.mechanism.noise

            def inner(e):
                a = float(np.sum(w * loss.evaluate(
                    np.full(z.shape[1], e), -s1 * z[0])[0]))
                b = float(np.sum(w * loss.evaluate(
                    np.full(z.shape[1], e), -s0 * z[0])[0]))
                return a - b

            return noise.expectation(inner)
        return float(_bregman_excess_quadrature(model, loss, theta, theta_star))
    if method == "mc":
        return excess_risk_mc(model, loss, theta, theta_star, n_samples, seed)[0]
    raise ValueError("method must be 'quadrature' or 'mc', got %r" % method)


def excess_risk_mc(model: PopulationModel, loss: LossModel, theta, theta_star,
                   n_samples: int = 1_000_000, seed=0):
    """(estimate, stderr) by common-random-numbers Monte Carlo."""
    theta = np.asarray(theta, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    total = 0.0
    total2 = 0.0
    done = 0
    chunk_idx = 0
    while done < n_samples:
        m = min(_MC_CHUNK, n_samples - done)
        gen = rngmod.stream(seed, "mc", chunk_idx)
        X, y = model.sample(loss, m, gen, flip_rng=rngmod.stream(seed, "flip", chunk_idx))
        diff = (loss.evaluate(y, X @ theta)[0] - loss.evaluate(y, X @ theta_star)[0])
        total += float(np.sum(diff))
        total2 += float(np.sum(diff * diff))
        done += m
        chunk_idx += 1
    mean = total / n_samples
    var = max(total2 / n_samples - mean * mean, 0.0)
    return mean, math.sqrt(var / n_samples)


@dataclass
class RestrictedExcess:
    value: float
    stderr: float
    keep_probability: float
    low_mass_warning: bool


def restricted_excess_risk(model: PopulationModel, loss: LossModel, theta,
                           theta_star, radius: float, which: str = "design",
                           n_samples: int = 1_000_000, seed=0) -> RestrictedExcess:
    """MC estimate of E[(ell(theta) - ell(theta*)) 1{norm <= radius}].

    ``which="design"`` truncates on |X| in the Sigma^-1 norm,
    ``which="calibrated"`` on |Xtilde| in the H^-1 norm with the calibrated
    design at theta_star.  The realized keep probability is reported, with
    a warning flag when less than 1% of the mass survives.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if which not in ("design", "calibrated"):
        raise ValueError("which must be 'design' or 'calibrated'")
    theta = np.asarray(theta, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    Sigma = model.design.sigma_matrix()
    if which == "design":
        L = sla.cholesky(Sigma, lower=True)
    else:
        mats = population_matrices(model, loss, theta_star,
                                   method="quadrature"
                                   if isinstance(model.design, GaussianDesign)
                                   else "mc", n_samples=200_000, seed=(seed, 1))
        L = sla.cholesky(mats.hess, lower=True)
    total = 0.0
    total2 = 0.0
    kept = 0
    done = 0
    chunk_idx = 0
    while done < n_samples:
        m = min(_MC_CHUNK, n_samples - done)
        gen = rngmod.stream(seed, "mc", chunk_idx)
        X, y = model.sample(loss, m, gen, flip_rng=rngmod.stream(seed, "flip", chunk_idx))
        if which == "design":
            Z = sla.solve_triangular(L, X.T, lower=True, check_finite=False)
        else:
            _, _, d2, _ = loss.evaluate(y, X @ theta_star)
            Z = sla.solve_triangular(L, (X * np.sqrt(d2)[:, None]).T,
                                     lower=True, check_finite=False)
        keep = np.linalg.norm(Z, axis=0) <= radius
        diff = (loss.evaluate(y, X @ theta)[0]
                - loss.evaluate(y, X @ theta_star)[0]) * keep
        total += float(np.sum(diff))
        total2 += float(np.sum(diff * diff))
        kept += int(np.sum(keep))
        done += m
        chunk_idx += 1
    mean = total / n_samples
    var = max(total2 / n_samples - mean * mean, 0.0)
    p = kept / n_samples
    return RestrictedExcess(mean, math.sqrt(var / n_samples), p, p < 0.01)


# ---------------------------------------------------------------------------
# Theory report
# ---------------------------------------------------------------------------

@dataclass
class TheoryReport:
    sigma: np.ndarray
    hess: np.ndarray
    grad_cov: np.ndarray
    d_eff: float
    rho: float
    k0: float
    k1: float
    k2: float
    b0: float
    b2: float
    delta: float
    method: str
    mc_samples: int = 0

    def to_json(self) -> str:
        def mat(M):
            M = np.asarray(M)
            return {"rows": M.shape[0], "cols": M.shape[1],
                    "data": [float(v) for v in M.ravel()]}
        return json.dumps({
            "sigma": mat(self.sigma), "hess": mat(self.hess),
            "grad_cov": mat(self.grad_cov),
            "d_eff": self.d_eff, "rho": self.rho,
            "k0": self.k0, "k1": self.k1, "k2": self.k2,
            "b0": self.b0, "b2": self.b2, "delta": self.delta,
            "method": self.method, "mc_samples": self.mc_samples,
        })


def theory_report(model: PopulationModel, loss: LossModel, theta_eval=None,
                  method: str = "quadrature", n_samples: int = 200_000,
                  delta: float = 0.01, seed=0) -> TheoryReport:
    """Assemble the population quantities for a synthetic model.

    Matrices come from ``population_matrices``; the psi_2 constants K0, K1,
    K2 are moment-based estimates on a fresh sample (relative diagnostics,
    not absolutes), and B0, B2 are the empirical (1-delta)-quantiles of the
    decorrelated and calibrated design norms.
    """
    theta_eval = (model.theta_star if theta_eval is None
                  else np.asarray(theta_eval, dtype=float))
    mats = population_matrices(model, loss, theta_eval, method=method,
                               n_samples=max(n_samples, 200_000), seed=seed)
    d_eff = effective_dimension(mats.hess, mats.grad_cov)
    rho = curvature_rho(mats.sigma, mats.hess)

    gen = rngmod.stream(seed, "theory")
    X, y = model.sample(loss, n_samples, gen, flip_rng=rngmod.stream(seed, "flip", 99))
    eta = X @ theta_eval
    _, d1, d2, _ = loss.evaluate(y, eta)
    Ls = sla.cholesky(mats.sigma, lower=True)
    Lh = sla.cholesky(mats.hess, lower=True)
    Lg = sla.cholesky(mats.grad_cov, lower=True)
    Z0 = sla.solve_triangular(Ls, X.T, lower=True, check_finite=False).T
    Zg = sla.solve_triangular(Lg, (X * d1[:, None]).T, lower=True,
                              check_finite=False).T
    Z2 = sla.solve_triangular(Lh, (X * np.sqrt(d2)[:, None]).T, lower=True,
                              check_finite=False).T
    k0 = psi2_estimate(Z0, seed=(seed, 10))
    k1 = psi2_estimate(Zg, seed=(seed, 11))
    k2 = psi2_estimate(Z2, seed=(seed, 12))
    b0 = float(np.quantile(np.linalg.norm(Z0, axis=1), 1.0 - delta))
    b2 = float(np.quantile(np.linalg.norm(Z2, axis=1), 1.0 - delta))
    return TheoryReport(mats.sigma, mats.hess, mats.grad_cov, d_eff, rho,
                        k0, k1, k2, b0, b2, delta, mats.method,
                        n_samples if method == "mc" else 0)


def k2bar_estimate(model: PopulationModel, loss: LossModel, radius: float,
                   n_samples: int = 50_000, n_theta: int = 8, seed=0) -> float:
    """Dikin-ellipsoid psi_2 diagnostic: the largest moment-based subgaussian
    estimate of the whitened calibrated design over points at H-distance
    ``radius`` from theta_star (radius 0 reproduces the K2 estimate)."""
    mats = population_matrices(model, loss, method="quadrature"
                               if isinstance(model.design, GaussianDesign)
                               else "mc", n_samples=200_000, seed=(seed, 2))
    Lh = sla.cholesky(mats.hess, lower=True)
    gen = rngmod.stream(seed, "directions", 1)
    best = 0.0
    points = max(1, n_theta) if radius > 0 else 1
    for j in range(points):
        if radius == 0:
            theta = model.theta_star
        else:
            u = gen.standard_normal(model.dim)
            u = sla.solve_triangular(Lh.T, u, lower=False, check_finite=False)
            theta = model.theta_star + radius * u / mahal_norm(u, mats.hess)
        m_at = population_matrices(model, loss, theta, method="quadrature"
                                   if isinstance(model.design, GaussianDesign)
                                   else "mc", n_samples=200_000, seed=(seed, 3, j))
        L_at = sla.cholesky(m_at.hess, lower=True)
        gen_s = rngmod.stream(seed, "mc", 1000 + j)
        X, y = model.sample(loss, n_samples, gen_s,
                            flip_rng=rngmod.stream(seed, "flip", 1000 + j))
        _, _, d2, _ = loss.evaluate(y, X @ theta)
        Z = sla.solve_triangular(L_at, (X * np.sqrt(d2)[:, None]).T,
                                 lower=True, check_finite=False).T
        best = max(best, psi2_estimate(Z, seed=(seed, 20, j)))
    return best


def mahal_norm(v, M) -> float:
    v = np.asarray(v, dtype=float)
    return math.sqrt(max(float(v @ np.asarray(M, dtype=float) @ v), 0.0))
