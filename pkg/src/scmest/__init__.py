"""Self-concordant M-estimation toolkit.

Losses with certified self-concordance classes, bracket envelopes and
localization certificates, damped-Newton and proximal-Newton solvers,
population oracles for synthetic models, and a reproducible Monte-Carlo
experiment harness.
"""

__version__ = "0.1.0"

from .brackets import (BracketBound, LocalizationCertificate, bracket_aux,
                       bracket_canonical, bracket_pseudo,
                       hessian_envelope_canonical, hessian_envelope_pseudo,
                       localization_certificate)
from .erm import (Dataset, FitResult, RiskEval, SolverOpts, empirical_risk,
                  fit_erm, mahalanobis, mom_aggregate, score_norm)
from .losses import (GridSpec, LossModel, ScReport, make_exponential_response,
                     make_huber, make_logistic, make_poisson,
                     make_pseudo_huber, make_quadratic, make_sc_logistic,
                     make_sc_pseudo_huber, registered_losses, verify_sc)
from .population import (GaussianDesign, GlmWellSpecified, LabelFlip,
                         LinearPlusNoise, NoiseLaw, PopulationModel,
                         RademacherDesign, TheoryReport, curvature_rho,
                         effective_dimension, excess_risk,
                         logistic_gaussian_constants, population_matrices,
                         population_minimizer, psi2_estimate,
                         restricted_excess_risk, theory_report)
from .sparse import (ConeReport, SparseFit, SparseOpts, cone_re_check, fit_l1,
                     lambda_path, soft_threshold, sparse_error_metrics)

__all__ = [name for name in dir() if not name.startswith("_")]
