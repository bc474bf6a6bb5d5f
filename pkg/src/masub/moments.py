"""Moment functions, their model-conditional means, and whole-data averages.

A moment function ``h(x, y)`` maps an observation to a ``q``-vector. The
estimator needs its conditional mean ``m(x; theta) = E[h(x, Y) | x; theta]``
and the Jacobian of that mean, both in closed form here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import map_chunks
from .model import LogisticModel, WeibullModel, _out, _rows, add_intercept, weighted_gram
from .numerics import EULER_GAMMA, digamma, gamma, trigamma


class MomentFunction:
    q: int
    kind: str

    def eval_h(self, X, y):
        raise NotImplementedError

    def h_sum(self, X, y, weights=None):
        """``sum_i w_i h(x_i, y_i)``; subclasses override with BLAS forms."""
        h = self.eval_h(X, y)
        if weights is not None:
            h = h * np.asarray(weights, dtype=float)[:, None]
        return h.sum(axis=0)

    def cond_mean(self, model, theta, X):
        raise NotImplementedError

    def cond_mean_jac(self, model, theta, X):
        raise NotImplementedError

    def cond_mean_jac_sum(self, model, theta, X, weights):
        """``sum_i w_i dm(x_i; theta)/dtheta`` as a ``q x d`` matrix."""
        return np.einsum("i,ijk->jk", np.asarray(weights, dtype=float), self.cond_mean_jac(model, theta, X))


class XYMoment(MomentFunction):
    """``h(x, y) = x * y`` on the raw covariates (no intercept), ``q = p``."""

    kind = "xy"

    def __init__(self, p):
        if p < 1:
            raise ValueError("the XY moment needs at least one covariate")
        self.p = int(p)
        self.q = int(p)

    def eval_h(self, X, y):
        X, y, single = _rows(X, y)
        return _out(X * y[:, None], single)

    def h_sum(self, X, y, weights=None):
        X, y, _ = _rows(X, y)
        return (y if weights is None else y * weights) @ X

    def cond_mean(self, model, theta, X):
        X, _, single = _rows(X)
        return _out(X * model.mean_response(theta, X)[:, None], single)

    def cond_mean_jac(self, model, theta, X):
        X, _, single = _rows(X)
        dmean = model.mean_response_jac(theta, X)
        return _out(X[:, :, None] * dmean[:, None, :], single)

    def cond_mean_jac_sum(self, model, theta, X, weights):
        X, _, _ = _rows(X)
        wX = X * np.asarray(weights, dtype=float)[:, None]
        return wX.T @ model.mean_response_jac(theta, X)

    def __repr__(self):
        return f"XYMoment(p={self.p})"


class OptimalScoreMoment(MomentFunction):
    """The score evaluated at a fixed pilot estimate, ``h = psi(x, y; theta_check)``."""

    kind = "opt"

    def __init__(self, model, theta_check):
        self.model = model
        self.theta_check = model.check_theta(theta_check).copy()
        self.q = model.d

    def eval_h(self, X, y):
        return self.model.score(self.theta_check, X, y)

    def h_sum(self, X, y, weights=None):
        return self.model.score_sum(self.theta_check, X, y, weights)

    def cond_mean(self, model, theta, X):
        self._check_model(model)
        X, _, single = _rows(X)
        if isinstance(model, LogisticModel):
            diff = model.mean_response(theta, X) - model.mean_response(self.theta_check, X)
            return _out(diff[:, None] * add_intercept(X), single)
        return _out(self._weibull_mean(theta, X), single)

    def cond_mean_jac(self, model, theta, X):
        self._check_model(model)
        X, _, single = _rows(X)
        if isinstance(model, LogisticModel):
            s = expit(model.linear_predictor(theta, X))
            Z = add_intercept(X)
            return _out((s * (1.0 - s))[:, None, None] * Z[:, :, None] * Z[:, None, :], single)
        return _out(self._weibull_jac(theta, X), single)

    def cond_mean_jac_sum(self, model, theta, X, weights):
        if not isinstance(model, LogisticModel):
            return super().cond_mean_jac_sum(model, theta, X, weights)
        self._check_model(model)
        X, _, _ = _rows(X)
        s = expit(model.linear_predictor(theta, X))
        return weighted_gram(X, np.asarray(weights, dtype=float) * s * (1.0 - s))

    def _check_model(self, model):
        if model != self.model:
            raise ValueError(f"moment was built for {self.model!r}, not {model!r}")

    def _weibull_terms(self, theta, X):
        # t = y^alpha e^eta is unit exponential; with r = alpha_check / alpha,
        # E[t^r] = Gamma(1+r) and E[t^r log t] = Gamma(1+r) digamma(1+r).
        theta = self.model.check_theta(theta)
        alpha = theta[0]
        alpha_c = self.theta_check[0]
        eta = theta[1] + X @ theta[2:]
        eta_c = self.theta_check[1] + X @ self.theta_check[2:]
        r = alpha_c / alpha
        G = gamma(1.0 + r)
        if not np.isfinite(G):
            raise OverflowError(f"Gamma(1 + {r:.6g}) overflows; shape ratio out of range")
        P = digamma(1.0 + r)
        E = np.exp(eta_c - eta * r)
        return alpha, alpha_c, eta, r, G, P, E

    def _weibull_mean(self, theta, X):
        alpha, alpha_c, eta, r, G, P, E = self._weibull_terms(theta, X)
        out = np.empty((X.shape[0], self.q))
        out[:, 0] = 1.0 / alpha_c - (EULER_GAMMA + eta) / alpha - G * E * (P - eta) / alpha
        out[:, 1:] = (1.0 - G * E)[:, None] * add_intercept(X)
        return out

    def _weibull_jac(self, theta, X):
        alpha, alpha_c, eta, r, G, P, E = self._weibull_terms(theta, X)
        T = trigamma(1.0 + r)
        Z = add_intercept(X)
        m, d = X.shape[0], self.q
        # derivatives w.r.t. alpha through r = alpha_c / alpha
        dG = -G * P * r / alpha
        dP = -T * r / alpha
        dE = E * eta * r / alpha
        K = G * E * (P - eta) / alpha
        dK = (dG * E * (P - eta) + G * dE * (P - eta) + G * E * dP) / alpha - K / alpha
        out = np.empty((m, d, d))
        out[:, 0, 0] = (EULER_GAMMA + eta) / alpha**2 - dK
        out[:, 0, 1:] = (-1.0 / alpha + G * E * (r * (P - eta) + 1.0) / alpha)[:, None] * Z
        out[:, 1:, 0] = -(dG * E + G * dE)[:, None] * Z
        out[:, 1:, 1:] = (G * E * r)[:, None, None] * Z[:, :, None] * Z[:, None, :]
        return out

    def __repr__(self):
        return f"OptimalScoreMoment({self.model!r}, theta_check={self.theta_check.tolist()})"


def build_optimal_moment(model, theta_check):
    return OptimalScoreMoment(model, theta_check)


def make_moment(kind, model, theta_check=None):
    if kind in (None, "none"):
        return None
    if kind == "xy":
        return XYMoment(model.p)
    if kind == "opt":
        if theta_check is None:
            raise ValueError("the optimal moment needs a pilot estimate")
        return build_optimal_moment(model, theta_check)
    raise ValueError(f"unknown moment {kind!r}; expected 'none', 'xy' or 'opt'")


@dataclass(frozen=True)
class WholeDataMoment:
    mu_hat: np.ndarray
    count: int


def moment_chunk(momfun):
    """Chunk function returning ``(sum of h over kept rows, kept row count)``."""
    def fn(idx, X, y, mask):
        if mask is None:
            return momfun.h_sum(X, y), X.shape[0]
        return momfun.h_sum(X, y, mask.astype(float)), int(mask.sum())
    return fn


def reduce_moment(parts, q):
    """Left-to-right reduction of per-chunk sums into a :class:`WholeDataMoment`."""
    total = np.zeros(q)
    count = 0
    for s, c in parts:
        total = total + s
        count += c
    if count == 0:
        raise ValueError("cannot compute a whole-data moment over an empty dataset")
    mu = total / count
    if not np.all(np.isfinite(mu)):
        raise ValueError("whole-data moment is not finite")
    return WholeDataMoment(mu, count)


def whole_data_moment(momfun, dataset, threads=1):
    """Average ``h`` over every record of ``dataset`` in one streaming pass.

    Per-chunk sums are reduced left to right in record order, so the result
    is identical for any thread count.
    """
    return reduce_moment(map_chunks(dataset, moment_chunk(momfun), threads), momfun.q)
