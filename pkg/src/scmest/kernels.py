"""Hot numeric kernels with numba-accelerated and pure-numpy implementations.

The package works either way; set the environment variable
``SCMEST_DISABLE_NUMBA=1`` before import to force the numpy paths
(useful for debugging and as a no-JIT fallback).  Both implementations
of each kernel are exported so they can be benchmarked against each
other (see ``benchmarks/bench_kernels.py``).
"""

import os

import numpy as np

DISABLE_ENV = "SCMEST_DISABLE_NUMBA"


def _env_disabled() -> bool:
    return os.environ.get(DISABLE_ENV, "").strip().lower() in {"1", "true", "yes", "on"}


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# logistic terms: val = log(1+e^eta) - y*eta, p = sigmoid, w = p(1-p)
# Fused evaluation, overflow-safe for |eta| up to ~745 either sign.  The
# value is computed per label in its cancellation-free branch
# (log1p(e^{-eta}) for y = 1), which keeps finite differences of the value
# accurate deep into the flat tails.
# ---------------------------------------------------------------------------

def logistic_terms_numpy(y, eta):
    # softplus((1-2y) eta) equals log(1+e^eta) - y*eta for y in {0,1}
    val = np.logaddexp(0.0, (1.0 - 2.0 * y) * eta)
    ae = np.abs(eta)
    q = np.exp(-ae)
    p = np.where(eta >= 0, 1.0 / (1.0 + q), q / (1.0 + q))
    w = p * (1.0 - p)
    return val, p, w


def _logistic_terms_loop(y, eta, val, p, w):
    for i in range(eta.shape[0]):
        e = eta[i]
        s = (1.0 - 2.0 * y[i]) * e
        if s >= 0.0:
            val[i] = s + np.log1p(np.exp(-s))
        else:
            val[i] = np.log1p(np.exp(s))
        if e >= 0.0:
            q = np.exp(-e)
            p[i] = 1.0 / (1.0 + q)
        else:
            q = np.exp(e)
            p[i] = q / (1.0 + q)
        w[i] = p[i] * (1.0 - p[i])


if HAVE_NUMBA:
    _logistic_terms_loop_jit = numba.njit(cache=True)(_logistic_terms_loop)


def logistic_terms_numba(y, eta):
    y = np.ascontiguousarray(y, dtype=np.float64)
    eta = np.ascontiguousarray(eta, dtype=np.float64)
    val = np.empty_like(eta)
    p = np.empty_like(eta)
    w = np.empty_like(eta)
    _logistic_terms_loop_jit(y, eta, val, p, w)
    return val, p, w


# ---------------------------------------------------------------------------
# cyclic coordinate descent on an l1-penalized quadratic model
#
#   minimize_z  g0.(z - x0) + 0.5 (z - x0)' H (z - x0) + lam |z|_1
#
# z is updated in place (callers pass the warm start).  Returns the
# number of full sweeps performed.  Stops when the largest coordinate
# move in one sweep is <= tol.
# ---------------------------------------------------------------------------

def cd_l1_quadratic_numpy(hess, grad0, x0, z, lam, tol, max_sweeps):
    d = z.shape[0]
    v = hess @ (z - x0)  # running H (z - x0)
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        max_move = 0.0
        for j in range(d):
            hjj = hess[j, j]
            gj = grad0[j] + v[j]
            u = z[j] - gj / hjj
            thr = lam / hjj
            znew = 0.0
            if u > thr:
                znew = u - thr
            elif u < -thr:
                znew = u + thr
            delta = znew - z[j]
            if delta != 0.0:
                z[j] = znew
                v += hess[:, j] * delta
                move = abs(delta) * np.sqrt(hjj)
                if move > max_move:
                    max_move = move
        if max_move <= tol:
            break
    return sweeps


def _cd_l1_quadratic_loop(hess, grad0, x0, z, lam, tol, max_sweeps):
    d = z.shape[0]
    v = np.zeros(d)
    for j in range(d):
        dj = z[j] - x0[j]
        if dj != 0.0:
            for i in range(d):
                v[i] += hess[i, j] * dj
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        max_move = 0.0
        for j in range(d):
            hjj = hess[j, j]
            gj = grad0[j] + v[j]
            u = z[j] - gj / hjj
            thr = lam / hjj
            znew = 0.0
            if u > thr:
                znew = u - thr
            elif u < -thr:
                znew = u + thr
            delta = znew - z[j]
            if delta != 0.0:
                z[j] = znew
                for i in range(d):
                    v[i] += hess[i, j] * delta
                move = abs(delta) * np.sqrt(hjj)
                if move > max_move:
                    max_move = move
        if max_move <= tol:
            break
    return sweeps


if HAVE_NUMBA:
    _cd_l1_quadratic_jit = numba.njit(cache=True)(_cd_l1_quadratic_loop)


def cd_l1_quadratic_numba(hess, grad0, x0, z, lam, tol, max_sweeps):
    return _cd_l1_quadratic_jit(
        np.ascontiguousarray(hess), np.ascontiguousarray(grad0),
        np.ascontiguousarray(x0), z, lam, tol, max_sweeps)


if USE_NUMBA:
    logistic_terms = logistic_terms_numba
    cd_l1_quadratic = cd_l1_quadratic_numba
else:
    logistic_terms = logistic_terms_numpy
    cd_l1_quadratic = cd_l1_quadratic_numpy
