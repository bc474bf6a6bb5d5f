"""Shared numerical kernels.

Symmetric solves with a condition gate, central-difference Jacobians,
special functions used by the Weibull closed forms, and the adaptive
quadrature oracle for model-conditional moments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special
from scipy import integrate

EULER_GAMMA = float(np.euler_gamma)
MAX_CONDITION = 1e12


class NumericalError(RuntimeError):
    """Base class for numerical failures reported by the estimators."""


class SingularMatrixError(NumericalError):
    def __init__(self, message, block=None, condition=None):
        super().__init__(message)
        self.block = block
        self.condition = condition


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class NonConvergenceError(NumericalError):
    pass


class SeparationError(NumericalError):
    pass


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class SolveReport:
    solution: np.ndarray
    condition_estimate: float
    definiteness: str  # "PD", "PSD" or "indefinite"


def _check_symmetric(A, tol=1e-10):
    scale = max(np.max(np.abs(A)), 1.0)
    if not np.allclose(A, A.T, rtol=0.0, atol=tol * scale):
        raise ValueError("matrix is not symmetric")


def solve_sym(A, B, require_pd=True, max_condition=MAX_CONDITION, name=None):
    """Solve ``A X = B`` for symmetric ``A`` through a Cholesky factorization.

    The condition estimate is the squared ratio of the extreme diagonal
    entries of the Cholesky factor. It is a cheap lower bound on the
    spectral condition number and is used as a gate, not as a diagnosis.

    Raises
    ------
    SingularMatrixError
        If the condition estimate exceeds ``max_condition``.
    NotPositiveDefiniteError
        If ``require_pd`` and the factorization fails.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    label = name or "matrix"
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{label} must be square, got shape {A.shape}")
    _check_symmetric(A)
    try:
        c, lower = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        evals = np.linalg.eigvalsh(A)
        lam_max = np.max(np.abs(evals))
        if np.min(evals) >= -1e-12 * max(lam_max, 1e-300):
            definiteness = "PSD"
        else:
            definiteness = "indefinite"
        if require_pd:
            raise NotPositiveDefiniteError(f"{label} is not positive definite ({definiteness})", block=name)
        cond = np.inf if np.min(np.abs(evals)) == 0 else lam_max / np.min(np.abs(evals))
        if cond > max_condition:
            raise SingularMatrixError(f"{label} is singular (condition {cond:.3g})", block=name, condition=cond)
        X = np.linalg.solve(A, B)
        return SolveReport(X, float(cond), definiteness)
    diag = np.abs(np.diag(c))
    cond = float((diag.max() / diag.min()) ** 2) if diag.min() > 0 else np.inf
    cond = max(cond, 1.0)
    if cond > max_condition:
        raise SingularMatrixError(f"{label} is numerically singular (condition estimate {cond:.3g})",
                                  block=name, condition=cond)
    X = scipy.linalg.cho_solve((c, lower), B)
    return SolveReport(X, cond, "PD")


def finite_diff_jacobian(f, theta, h_rel=1e-6):
    """Central-difference Jacobian of a vector function.

    Step for coordinate ``j`` is ``h_rel * max(1, |theta_j|)``. The output
    has shape ``f(theta).shape + (len(theta),)``.
    """
    theta = np.asarray(theta, dtype=float)
    f0 = np.asarray(f(theta), dtype=float)
    if not np.all(np.isfinite(f0)):
        raise ValueError("non-finite function value at the expansion point")
    jac = np.empty(f0.shape + theta.shape)
    for j in range(theta.size):
        h = h_rel * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        fp = np.asarray(f(tp), dtype=float)
        fm = np.asarray(f(tm), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ValueError(f"non-finite function value when perturbing coordinate {j}")
        jac[..., j] = (fp - fm) / (2.0 * h)
    return jac


def _positive(x, fname):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError(f"{fname} requires positive arguments")
    return x


def gamma(x):
    return scipy.special.gamma(_positive(x, "gamma"))


def log_gamma(x):
    return scipy.special.gammaln(_positive(x, "log_gamma"))


def digamma(x):
    return scipy.special.digamma(_positive(x, "digamma"))


def trigamma(x):
    return scipy.special.polygamma(1, _positive(x, "trigamma"))


def euler_gamma():
    return EULER_GAMMA


def quad_cond_mean(momfun, model, theta, x, tol=1e-10, limit=200):
    """Integrate a moment function against the Weibull conditional density.

    Uses the substitution ``t = y**alpha * exp(eta)`` so that the measure
    becomes the unit exponential ``exp(-t) dt`` on ``(0, inf)``. The range is
    split at ``t = 1`` to isolate the logarithmic behaviour near zero.
    """
    from .model import WeibullModel

    if not isinstance(model, WeibullModel):
        raise TypeError("quadrature oracle is only defined for continuous-response models")
    theta = model.check_theta(theta)
    x = np.asarray(x, dtype=float).reshape(-1)
    alpha, beta = theta[0], theta[1:]
    eta = beta[0] + x @ beta[1:]
    xrow = x[None, :]

    def integrand(t):
        y = (t * np.exp(-eta)) ** (1.0 / alpha)
        if y <= 0.0 or not np.isfinite(y):
            return np.zeros(momfun.q)
        return momfun.eval_h(xrow, np.array([y]))[0] * np.exp(-t)

    total = np.zeros(momfun.q)
    for lo, hi in ((0.0, 1.0), (1.0, np.inf)):
        res, err, info = integrate.quad_vec(integrand, lo, hi, epsabs=tol / 2, epsrel=0.0,
                                            norm="max", limit=limit, full_output=True)
        if info.status != 0 or not np.all(np.isfinite(res)):
            raise NonConvergenceError(f"adaptive quadrature did not converge on [{lo}, {hi}] "
                                      f"(error estimate {err:.3g})")
        total += res
    return total
