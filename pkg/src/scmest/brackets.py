"""Closed-form bracket envelopes and localization certificates.

These functions sandwich the second-order remainder of a convex function
whose line restrictions have a controlled third derivative.  Three cases
are covered, indexed by how the third-derivative budget S enters:

* ``pseudo``     |g'''(t)| <= S g''(t)             -> exponential bracket
* ``aux``        |g'''(t)| <= S g''(t) / (1 - t)   -> rational bracket
* ``canonical``  |g'''(t)| <= S g''(t) / (1 - S t) -> bracket at the scaled
  point t = 1/S, with coefficients (1/(3 S^2), 1/S^2)

All brackets are exposed at the endpoint only (t = 1, or t = 1/S for the
canonical case); intermediate-t forms are used as test oracles.
The same machinery yields two-sided envelopes for the second derivative
itself and the localization certificate: when the product of the design
radius R and the score norm nu is below the case threshold, the minimizer
exists and lies within 4*nu of the expansion point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "BracketBound", "LocalizationCertificate",
    "bracket_pseudo", "bracket_aux", "bracket_canonical",
    "hessian_envelope_canonical", "hessian_envelope_pseudo",
    "localization_certificate",
]

SERIES_CUTOFF = 1e-4


@dataclass(frozen=True)
class BracketBound:
    """Two-sided bound on the second-order remainder, normalized by g''(0).

    For the pseudo and aux cases both coefficients bracket 1/2 and tend to
    1/2 as S -> 0.  The canonical case normalizes at the scaled point
    t = 1/S instead, so its coefficients follow the 1/S^2 scale.
    ``upper_coeff`` is +inf when S exceeds the validity range (aux, S >= 2).
    """
    S: float
    lower_coeff: float
    upper_coeff: float
    case: str


@dataclass(frozen=True)
class LocalizationCertificate:
    score_norm: float     # nu = |grad F(theta0)| in the H0^-1 norm
    design_radius: float  # R = |W| in the H0^-1 norm
    case: str
    threshold_c: float
    holds: bool
    radius_bound: float   # 4 nu, meaningful when holds

    def to_json_dict(self):
        return {
            "score_norm": self.score_norm,
            "design_radius": self.design_radius,
            "case": self.case,
            "threshold_c": self.threshold_c,
            "holds": self.holds,
            "radius_bound": self.radius_bound,
        }


def bracket_pseudo(S: float) -> BracketBound:
    """Exponential bracket (e^-S + S - 1)/S^2 <= coeff <= (e^S - S - 1)/S^2.

    Below S = 1e-4 both coefficients are evaluated by a 4-term Taylor
    series; direct evaluation loses roughly 8 digits at S = 1e-6.
    """
    if S < 0:
        raise ValueError("S must be nonnegative")
    if S < SERIES_CUTOFF:
        upper = 0.5 + S / 6.0 + S * S / 24.0 + S ** 3 / 120.0
        lower = 0.5 - S / 6.0 + S * S / 24.0 - S ** 3 / 120.0
    else:
        upper = (math.exp(S) - S - 1.0) / (S * S)
        lower = (math.exp(-S) + S - 1.0) / (S * S)
    return BracketBound(S, lower, upper, "pseudo")


def bracket_aux(S: float) -> BracketBound:
    """Rational bracket 1/(2+S) <= coeff <= 1/(2-S), upper valid for S < 2."""
    if S < 0:
        raise ValueError("S must be nonnegative")
    upper = 1.0 / (2.0 - S) if S < 2.0 else math.inf
    return BracketBound(S, 1.0 / (2.0 + S), upper, "aux")


def bracket_canonical(S: float) -> BracketBound:
    """Bracket of F(theta_{1/S}) - F(theta_0) - (1/S) <grad, theta_1 - theta_0>,
    normalized by |theta_1 - theta_0|^2 in the H0 norm: (1/(3S^2), 1/S^2)."""
    if S <= 0:
        raise ValueError("canonical bracket needs S > 0 (S = 0 is exactly quadratic)")
    return BracketBound(S, 1.0 / (3.0 * S * S), 1.0 / (S * S), "canonical")


def hessian_envelope_canonical(g0: float, c: float, t: float):
    """Two-sided envelope g0/(1 +- c|t|sqrt(g0))^2 for |g'| <= 2c g^{3/2}.

    Returns (lower, upper, valid); the upper bound requires
    c |t| sqrt(g0) < 1 and is +inf (valid=False) otherwise.
    """
    if g0 < 0 or c < 0:
        raise ValueError("g0 and c must be nonnegative")
    u = c * abs(t) * math.sqrt(g0)
    lower = g0 / (1.0 + u) ** 2
    if u < 1.0:
        return lower, g0 / (1.0 - u) ** 2, True
    return lower, math.inf, False


def hessian_envelope_pseudo(g0: float, c: float, t: float):
    """Envelope (g0 e^{-c|t|sqrt(g0)}, g0 e^{c|t|sqrt(g0)}) for
    |g'| <= c sqrt(g0) g."""
    if g0 < 0 or c < 0:
        raise ValueError("g0 and c must be nonnegative")
    u = c * abs(t) * math.sqrt(g0)
    return g0 * math.exp(-u), g0 * math.exp(u)


def localization_certificate(score_norm: float, design_radius: float,
                             case: str) -> LocalizationCertificate:
    """Existence-and-proximity certificate for the minimizer.

    ``holds`` iff R * nu <= 1/2 (pseudo, aux) or <= 1/4 (canonical); the
    minimizer is then unique and within 4*nu of the expansion point in the
    local metric.
    """
    if case in ("pseudo", "aux"):
        c = 0.5
    elif case == "canonical":
        c = 0.25
    else:
        raise ValueError("case must be 'pseudo', 'aux' or 'canonical', got %r" % case)
    if not (math.isfinite(score_norm) and math.isfinite(design_radius)):
        raise ValueError("score_norm and design_radius must be finite")
    if score_norm < 0 or design_radius < 0:
        raise ValueError("score_norm and design_radius must be nonnegative")
    holds = design_radius * score_norm <= c
    return LocalizationCertificate(score_norm, design_radius, case, c, holds,
                                   4.0 * score_norm)
