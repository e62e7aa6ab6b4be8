"""Univariate losses ell(y, eta) with derivatives up to third order.

Every model evaluates (ell, ell', ell'', ell''') with derivatives taken
in the linear predictor eta, using numerically stable forms for the
cancellation-prone expressions, and declares its self-concordance class:

* ``sca``       |ell'''| <= c * ell''            (pseudo self-concordance)
* ``scb``       |ell'''| <= c * ell''^(3/2)      (canonical self-concordance)
* ``quadratic`` ell''' identically zero
* ``none``      no smoothness certificate (plain Huber)

The two conjugate-constructed losses (robust pseudo-Huber variant and the
classification loss) are built from log-barriers via Fenchel duality; the
barrier side is exposed for the round-trip identities used in tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kernels import logistic_terms

__all__ = [
    "LossModel", "GridSpec", "ScReport",
    "make_logistic", "make_poisson", "make_exponential_response",
    "make_quadratic", "make_huber", "make_pseudo_huber",
    "make_sc_pseudo_huber", "make_sc_logistic",
    "verify_sc", "registered_losses", "loss_from_name",
    "to_signed_labels", "to_binary_labels",
    "symmetric_log_barrier", "negative_unit_log_barrier",
    "sc_pseudo_huber_contrast", "sc_logistic_margin",
]

SC_LOGISTIC_SCALE = 1.0 / (2.0 * math.log(2.0))
# Supremum of |phi'''|/phi''^{3/2} for the classification loss, inherited
# from the log-barrier pair through conjugation and the 1/(2 log 2) scaling.
SC_LOGISTIC_CONSTANT = 2.0 * math.sqrt(2.0 * math.log(2.0))


class LossDomainError(ValueError):
    """Input outside the loss domain (bad response or infeasible eta)."""


@dataclass(frozen=True)
class LossModel:
    """A loss ell(y, eta) together with its derivative evaluator.

    ``evaluate`` returns arrays (ell, d1, d2, d3) broadcast over the
    inputs.  Instances are immutable and safe to share across threads.
    """

    name: str
    eta_domain: str          # "all-reals" | "positive-reals"
    response_space: str      # "reals" | "binary01" | "signed-binary" | "nonneg-integers"
    sc_class: str            # "sca" | "scb" | "quadratic" | "none"
    sc_constant: float
    _eval: Callable = field(repr=False)
    kink_flag: Optional[Callable] = field(default=None, repr=False)
    family: str = ""         # structural family for sampling/quadrature glue
    params: tuple = ()       # (tau,) / (sigma,) / (kind, tau)

    def evaluate(self, y, eta):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        self._check_response(y)
        if self.eta_domain == "positive-reals" and np.any(eta <= 0.0):
            raise LossDomainError(
                "%s requires eta > 0; got min eta = %r" % (self.name, float(np.min(eta))))
        return self._eval(y, eta)

    def _check_response(self, y):
        if self.response_space == "binary01":
            if not np.all((y == 0.0) | (y == 1.0)):
                raise LossDomainError("%s expects responses in {0, 1}" % self.name)
        elif self.response_space == "signed-binary":
            if not np.all((y == -1.0) | (y == 1.0)):
                raise LossDomainError("%s expects responses in {-1, +1}" % self.name)
        elif self.response_space == "nonneg-integers":
            if np.any(y < 0) or not np.all(y == np.round(y)):
                raise LossDomainError("%s expects nonnegative integer responses" % self.name)


def to_signed_labels(y01):
    """{0,1} labels -> {-1,+1}."""
    y01 = np.asarray(y01, dtype=float)
    return 2.0 * y01 - 1.0


def to_binary_labels(ysigned):
    """{-1,+1} labels -> {0,1}."""
    ysigned = np.asarray(ysigned, dtype=float)
    return 0.5 * (ysigned + 1.0)


# ---------------------------------------------------------------------------
# GLM losses
# ---------------------------------------------------------------------------

def make_logistic() -> LossModel:
    """Logistic loss -y*eta + log(1+e^eta); pseudo self-concordant with c = 1."""

    def ev(y, eta):
        y, eta = np.broadcast_arrays(np.asarray(y, dtype=float),
                                     np.asarray(eta, dtype=float))
        val, p, w = logistic_terms(np.ascontiguousarray(y).ravel(),
                                   np.ascontiguousarray(eta).ravel())
        val, p, w = (z.reshape(eta.shape) for z in (val, p, w))
        return val, p - y, w.copy(), w * (1.0 - 2.0 * p)

    return LossModel("logistic", "all-reals", "binary01", "sca", 1.0, ev,
                     family="logistic")


def make_poisson() -> LossModel:
    """Poisson regression loss -y*eta + e^eta (the -log y! term is dropped:
    it is constant in eta and affects neither the argmin nor excess risk)."""

    def ev(y, eta):
        ex = np.exp(eta)
        val = ex - y * eta
        d1 = ex - y
        d2 = ex + np.zeros_like(val)
        d3 = ex + np.zeros_like(val)
        return val, d1, d2, d3

    return LossModel("poisson", "all-reals", "nonneg-integers", "sca", 1.0, ev,
                     family="poisson")


def make_exponential_response() -> LossModel:
    """Exponential-response GLM loss -y*eta - log(eta) on eta > 0.

    Canonically self-concordant with the exact constant 2:
    |ell'''| = 2 (ell'')^{3/2} at every point of the domain.
    """

    def ev(y, eta):
        val = -y * eta - np.log(eta)
        d1 = -y - 1.0 / eta
        d2 = eta ** -2.0 + np.zeros_like(val)
        d3 = -2.0 * eta ** -3.0 + np.zeros_like(val)
        return val, d1, d2, d3

    return LossModel("exponential_response", "positive-reals", "reals", "scb", 2.0, ev,
                     family="exponential_response")


def make_quadratic(sigma: float) -> LossModel:
    """Normalized square loss (y - eta)^2 / (2 sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive, got %r" % sigma)
    inv = 1.0 / (sigma * sigma)

    def ev(y, eta):
        r = eta - y
        val = 0.5 * inv * r * r
        d1 = inv * r
        d2 = inv + np.zeros_like(val)
        d3 = np.zeros_like(val)
        return val, d1, d2, d3

    return LossModel("quadratic(sigma=%g)" % sigma, "all-reals", "reals",
                     "quadratic", 0.0, ev, family="quadratic", params=(sigma,))


# ---------------------------------------------------------------------------
# Robust contrasts ell(y, eta) = contrast(y - eta)
# ---------------------------------------------------------------------------

KINK_TOL = 1e-8


def make_huber(tau: float) -> LossModel:
    """Plain Huber contrast.  Not C^3: ell''' is reported as 0 away from the
    kinks at |y - eta| = tau and the model carries a kink-proximity flag.
    Baseline only; excluded from self-concordance verification."""
    if tau <= 0:
        raise ValueError("tau must be positive, got %r" % tau)

    def ev(y, eta):
        y, eta = np.broadcast_arrays(y, eta)
        t = y - eta
        at = np.abs(t)
        quad = at <= tau
        val = np.where(quad, 0.5 * t * t, tau * at - 0.5 * tau * tau)
        p1 = np.where(quad, t, tau * np.sign(t))     # d contrast / dt
        p2 = np.where(quad, 1.0, 0.0)
        return val, -p1, p2, np.zeros_like(val)

    def kink(y, eta):
        t = np.abs(np.asarray(y, dtype=float) - np.asarray(eta, dtype=float))
        return np.abs(t - tau) < KINK_TOL

    return LossModel("huber(tau=%g)" % tau, "all-reals", "reals", "none", 0.0, ev,
                     kink_flag=kink, family="contrast", params=(tau,))


def _logcosh_contrast(t, tau):
    # tau^2 * log(cosh(t/tau)); sech^2 through exp(-2|u|) so the curvature
    # decays smoothly instead of hitting 1 - tanh^2 == 0 at |u| ~ 19
    u = t / tau
    au = np.abs(u)
    q = np.exp(-2.0 * au)
    val = tau * tau * (au + np.log1p(q) - math.log(2.0))
    th = np.tanh(u)
    sech2 = 4.0 * q / (1.0 + q) ** 2
    return val, tau * th, sech2, (-2.0 / tau) * th * sech2


def _sqrt_contrast(t, tau):
    # tau^2 * (sqrt(1 + (t/tau)^2) - 1)
    u = t / tau
    s = np.sqrt(1.0 + u * u)
    val = tau * tau * (u * u) / (s + 1.0)   # = tau^2 (s - 1), cancellation-free
    return val, tau * u / s, s ** -3.0, (-3.0 / tau) * u * s ** -5.0


def make_pseudo_huber(kind: str, tau: float) -> LossModel:
    """Smooth Huber surrogates tau^2 * contrast(t / tau).

    ``kind="logcosh"`` is pseudo self-concordant with c = 2/tau and
    ``kind="sqrt"`` with c = 3/tau; both satisfy contrast''(0) = 1 and
    |contrast'| <= tau.
    """
    if tau <= 0:
        raise ValueError("tau must be positive, got %r" % tau)
    if kind == "logcosh":
        base, c = _logcosh_contrast, 2.0
    elif kind == "sqrt":
        base, c = _sqrt_contrast, 3.0
    else:
        raise ValueError("kind must be 'logcosh' or 'sqrt', got %r" % kind)

    def ev(y, eta):
        y, eta = np.broadcast_arrays(y, eta)
        val, p1, p2, p3 = base(y - eta, tau)
        return val, -p1, p2 + np.zeros_like(val), -p3

    return LossModel("pseudo_huber_%s(tau=%g)" % (kind, tau), "all-reals", "reals",
                     "sca", c / tau, ev, family="contrast", params=(kind, tau))


def sc_pseudo_huber_contrast(t, tau=1.0):
    """Contrast of the canonically self-concordant pseudo-Huber loss.

    tau^2 * phi(t/tau) with phi the Fenchel conjugate of the symmetric
    log-barrier -log(1-u^2)/2.  Returns (phi, phi', phi'', phi''').
    The closed form sqrt(1+4t^2) - 1 + log((sqrt(1+4t^2)-1)/(2t^2)) is
    evaluated through s = sqrt(1+4t^2) and (s-1)/(2t^2) = 2/(s+1), which
    is exact at t = 0.
    """
    u = np.asarray(t, dtype=float) / tau
    s = np.sqrt(1.0 + 4.0 * u * u)
    val = tau * tau * 0.5 * (s - 1.0 - np.log(0.5 * (s + 1.0)))
    p1 = tau * 2.0 * u / (s + 1.0)
    p2 = 2.0 / (s * (s + 1.0))
    p3 = (-8.0 / tau) * u * (2.0 * s + 1.0) / (s ** 3 * (s + 1.0) ** 2)
    return val, p1, p2, p3


def make_sc_pseudo_huber(tau: float) -> LossModel:
    """Canonically self-concordant pseudo-Huber loss.

    Even, contrast''(0) = 1, |contrast'| < tau, and
    |contrast'''| <= (2*sqrt(2)/tau) * contrast''^{3/2}; the recorded
    constant is the verified supremum ratio 2*sqrt(2)/tau.
    """
    if tau <= 0:
        raise ValueError("tau must be positive, got %r" % tau)

    def ev(y, eta):
        y, eta = np.broadcast_arrays(y, eta)
        val, p1, p2, p3 = sc_pseudo_huber_contrast(y - eta, tau)
        return val, -p1, p2 + np.zeros_like(val), -p3

    return LossModel("sc_pseudo_huber(tau=%g)" % tau, "all-reals", "reals",
                     "scb", 2.0 * math.sqrt(2.0) / tau, ev,
                     family="contrast", params=(tau,))


def sc_logistic_margin(m):
    """Margin function psi(m) of the self-concordant classification loss and
    its three derivatives, before the 1/(2 log 2) scaling and +2 shift.

    psi(m) = -1 - m + s - log(2(s+1)) with s = sqrt(1+m^2); the log term is
    the stable rewrite of log((s-1)/(2 m^2)) = -log(2(s+1)).
    """
    m = np.asarray(m, dtype=float)
    s = np.sqrt(1.0 + m * m)
    val = -1.0 - m + s - np.log(2.0 * (s + 1.0))
    p1 = -1.0 + m / (s + 1.0)
    p2 = 1.0 / (s * (s + 1.0))
    p3 = -m * (2.0 * s + 1.0) / (s ** 3 * (s + 1.0) ** 2)
    return val, p1, p2, p3


def make_sc_logistic() -> LossModel:
    """Canonically self-concordant surrogate of the logistic loss.

    Acts through the margin m = y*eta with y in {-1,+1}; equals 1 at m = 0,
    is negative for m > 2.3955, and has bounded slope.  The self-concordance
    constant 2*sqrt(2*log 2) is inherited from the [-1,0] log-barrier through
    conjugation and rescaling.
    """

    def ev(y, eta):
        y, eta = np.broadcast_arrays(np.asarray(y, dtype=float),
                                     np.asarray(eta, dtype=float))
        val, p1, p2, p3 = sc_logistic_margin(y * eta)
        # d/deta = y * psi', d2 = psi'', d3 = y * psi''' (y^2 = 1)
        return (2.0 + SC_LOGISTIC_SCALE * val,
                SC_LOGISTIC_SCALE * y * p1,
                SC_LOGISTIC_SCALE * p2,
                SC_LOGISTIC_SCALE * y * p3)

    return LossModel("sc_logistic", "all-reals", "signed-binary", "scb",
                     SC_LOGISTIC_CONSTANT, ev, family="sc_logistic")


# ---------------------------------------------------------------------------
# Barrier side of the conjugate constructions (round-trip identities)
# ---------------------------------------------------------------------------

def symmetric_log_barrier(u):
    """-log(1-u^2)/2 on (-1,1) with derivatives; phi''(0) = 1."""
    u = np.asarray(u, dtype=float)
    if np.any(np.abs(u) >= 1.0):
        raise LossDomainError("symmetric log-barrier needs |u| < 1")
    val = -0.5 * (np.log1p(-u) + np.log1p(u))
    p1 = u / (1.0 - u * u)
    p2 = (1.0 + u * u) / (1.0 - u * u) ** 2
    p3 = 2.0 * u * (3.0 + u * u) / (1.0 - u * u) ** 3
    return val, p1, p2, p3


def negative_unit_log_barrier(u):
    """-log(-u(1+u))/2 on (-1,0) with derivatives (barrier of [-1,0])."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= -1.0) or np.any(u >= 0.0):
        raise LossDomainError("barrier of [-1,0] needs -1 < u < 0")
    val = -0.5 * (np.log(-u) + np.log1p(u))
    p1 = -0.5 * (1.0 / u + 1.0 / (1.0 + u))
    p2 = 0.5 * (u ** -2.0 + (1.0 + u) ** -2.0)
    p3 = -(u ** -3.0 + (1.0 + u) ** -3.0)
    return val, p1, p2, p3


# ---------------------------------------------------------------------------
# Numerical self-concordance audit
# ---------------------------------------------------------------------------

@dataclass
class GridSpec:
    """Evaluation grid for verify_sc: responses x etas, with FD steps.

    ``h_scale`` multiplies the default per-point steps
    h1 = max(1e-4, 1e-4 |eta|) (first stage) and
    h3 = max(1e-3, 1e-3 |eta|) (stages feeding the third derivative).
    """
    ys: np.ndarray
    etas: np.ndarray
    h_scale: float = 1.0


@dataclass
class ScReport:
    loss: str
    sc_class: str
    declared_c: float
    max_ratio_analytic: float
    max_ratio_fd: float
    worst_point: tuple          # (y, eta) of the analytic max
    passes: bool
    fd_max_rel_err: float       # worst relative FD-vs-analytic deviation
    low_curvature_points: int   # grid points with ell'' < 1e-300 (ratio skipped)

    def to_json(self) -> str:
        return json.dumps({
            "loss": self.loss,
            "class": self.sc_class,
            "declared_c": self.declared_c,
            "max_ratio_analytic": self.max_ratio_analytic,
            "max_ratio_fd": self.max_ratio_fd,
            "worst_point": list(self.worst_point),
            "passes": self.passes,
            "fd_max_rel_err": self.fd_max_rel_err,
            "low_curvature_points": self.low_curvature_points,
        })


def _fd1(f, x, h):
    """Fourth-order central first difference of a vectorized function."""
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def fd_derivatives(loss: LossModel, y, eta, h_scale=1.0):
    """Finite-difference ladder: d1 from values, d2 from analytic d1, d3 from
    analytic d2, each via 4th-order central first differences.

    Direct high-order differences of the values cannot reach 1e-5 relative
    accuracy in the flat tails at float64; the staged ladder can, and still
    cross-checks each analytic derivative against the one below it.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if loss.eta_domain == "positive-reals":
        # purely relative steps: the curvature scale is 1/eta, and the
        # stencil stays strictly feasible
        h1 = h_scale * 1e-4 * eta
        h3 = h_scale * 1e-3 * eta
    else:
        h1 = h_scale * np.maximum(1e-4, 1e-4 * np.abs(eta))
        h3 = h_scale * np.maximum(1e-3, 1e-3 * np.abs(eta))
    d1 = _fd1(lambda e: loss.evaluate(y, e)[0], eta, h1)
    d2 = _fd1(lambda e: loss.evaluate(y, e)[1], eta, h3)
    d3 = _fd1(lambda e: loss.evaluate(y, e)[2], eta, h3)
    return d1, d2, d3


def _ratios(d2, d3, sc_class):
    ok = d2 >= 1e-300
    r = np.zeros_like(d2)
    if sc_class == "scb":
        r[ok] = np.abs(d3[ok]) / d2[ok] ** 1.5
    else:
        r[ok] = np.abs(d3[ok]) / d2[ok]
    return r, ok


def verify_sc(loss: LossModel, grid: GridSpec) -> ScReport:
    """Audit the declared self-concordance class on a finite grid.

    Evaluates |ell'''|/ell'' (pseudo) or |ell'''|/ell''^{3/2} (canonical)
    from analytic derivatives and from the finite-difference ladder, and
    passes iff the analytic maximum is <= declared_c * (1 + 1e-6).
    Grid points with ell'' < 1e-300 are counted, not failed.
    """
    if loss.sc_class == "none":
        raise ValueError("%s declares no self-concordance class" % loss.name)
    yy, ee = np.meshgrid(np.asarray(grid.ys, dtype=float),
                         np.asarray(grid.etas, dtype=float), indexing="ij")
    yy = yy.ravel()
    ee = ee.ravel()
    _, d1, d2, d3 = loss.evaluate(yy, ee)
    fd1_, fd2_, fd3_ = fd_derivatives(loss, yy, ee, grid.h_scale)

    ra, ok = _ratios(d2, d3, loss.sc_class)
    rf, _ = _ratios(np.maximum(fd2_, 0.0), fd3_, loss.sc_class)
    rf = np.where(ok, rf, 0.0)

    rel = 0.0
    for a, f in ((d1, fd1_), (d2, fd2_), (d3, fd3_)):
        big = np.abs(a) > 1e-8
        if np.any(big):
            rel = max(rel, float(np.max(np.abs(a[big] - f[big]) / np.abs(a[big]))))
        small = ~big
        if np.any(small):
            # two-tier tolerance: where |deriv| <= 1e-8 the check is absolute
            # (<= 1e-8); dividing by 1e-3 maps that onto the same 1e-5 gate
            rel = max(rel, float(np.max(np.abs(a[small] - f[small]))) / 1e-3)

    i = int(np.argmax(ra))
    max_a = float(ra[i])
    max_f = float(np.max(rf)) if rf.size else 0.0
    if loss.sc_class == "quadratic":
        passes = max_a == 0.0
        declared = 0.0
    else:
        declared = loss.sc_constant
        passes = max_a <= declared * (1.0 + 1e-6)
    return ScReport(loss.name, loss.sc_class, declared, max_a, max_f,
                    (float(yy[i]), float(ee[i])), passes, rel,
                    int(np.sum(~ok)))


# ---------------------------------------------------------------------------
# Registry (CLI / verify-losses)
# ---------------------------------------------------------------------------

def registered_losses() -> dict:
    """Name -> (LossModel, default verification GridSpec)."""
    eta_wide = np.linspace(-30.0, 30.0, 2001)
    t_wide = np.linspace(-50.0, 50.0, 2001)
    eta_pos = np.geomspace(1e-3, 1e3, 2001)
    return {
        "logistic": (make_logistic(), GridSpec(np.array([0.0, 1.0]), eta_wide)),
        "poisson": (make_poisson(), GridSpec(np.array([0.0, 1.0, 3.0, 7.0]), eta_wide)),
        "exponential_response": (make_exponential_response(),
                                 GridSpec(np.array([-2.0, -0.5, 0.0]), eta_pos)),
        "quadratic": (make_quadratic(1.0), GridSpec(np.array([0.0, 1.5]), eta_wide)),
        "pseudo_huber_logcosh": (make_pseudo_huber("logcosh", 1.0),
                                 GridSpec(np.array([0.0]), t_wide)),
        "pseudo_huber_sqrt": (make_pseudo_huber("sqrt", 1.0),
                              GridSpec(np.array([0.0]), t_wide)),
        "sc_pseudo_huber": (make_sc_pseudo_huber(1.0), GridSpec(np.array([0.0]), t_wide)),
        "sc_logistic": (make_sc_logistic(), GridSpec(np.array([-1.0, 1.0]), eta_wide)),
        "huber": (make_huber(1.0), GridSpec(np.array([0.0]), t_wide)),
    }


def loss_from_name(name: str, tau: float = 1.0, sigma: float = 1.0) -> LossModel:
    if name == "logistic":
        return make_logistic()
    if name == "poisson":
        return make_poisson()
    if name == "exponential_response":
        return make_exponential_response()
    if name == "quadratic":
        return make_quadratic(sigma)
    if name == "huber":
        return make_huber(tau)
    if name == "pseudo_huber_logcosh":
        return make_pseudo_huber("logcosh", tau)
    if name == "pseudo_huber_sqrt":
        return make_pseudo_huber("sqrt", tau)
    if name == "sc_pseudo_huber":
        return make_sc_pseudo_huber(tau)
    if name == "sc_logistic":
        return make_sc_logistic()
    raise ValueError("unknown loss %r" % name)
