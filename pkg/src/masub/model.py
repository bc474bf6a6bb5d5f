"""Parametric conditional-density models.

Both models prepend a constant-1 feature to the raw covariates internally,
so callers pass ``X`` with ``p`` columns. Every method is vectorised over
rows: ``X`` has shape ``(m, p)`` and ``y`` shape ``(m,)``. A single
observation can be passed as a 1-d ``x`` and scalar ``y``, in which case the
leading row axis is dropped from the result.
"""
from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np
from scipy.special import expit

from .numerics import InvalidParameterError, digamma, gamma


def _rows(X, y=None):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if y is None:
        return X, None, single
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
    return X, y, single


def _out(arr, single):
    return arr[0] if single else arr


def add_intercept(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([np.ones((X.shape[0], 1)), X])


_GRAM_BLOCK = 4096


def weighted_gram(X, w):
    """``sum_i w_i z_i z_i'`` with ``z_i = (1, x_i)``, without forming ``Z``."""
    k = X.shape[1] + 1
    out = np.empty((k, k))
    out[0, 0] = w.sum()
    out[0, 1:] = out[1:, 0] = w @ X
    block = np.zeros((k - 1, k - 1))
    # cache-sized row blocks are markedly faster than one tall product
    for start in range(0, X.shape[0], _GRAM_BLOCK):
        Xb = X[start:start + _GRAM_BLOCK]
        block += (Xb * w[start:start + _GRAM_BLOCK, None]).T @ Xb
    out[1:, 1:] = block
    return out


class ConditionalModel(ABC):
    """A conditional density ``f(y | x; theta)`` with analytic derivatives."""

    name: str

    def __init__(self, p):
        if p < 0:
            raise ValueError("covariate dimension must be non-negative")
        self.p = int(p)

    @property
    @abstractmethod
    def d(self):
        """Parameter dimension."""

    @abstractmethod
    def default_theta(self):
        """Starting value used when no pilot estimate is available."""

    def check_theta(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.d:
            raise InvalidParameterError(f"{self.name} model expects {self.d} parameters, got {theta.shape[0]}")
        if not np.all(np.isfinite(theta)):
            raise InvalidParameterError("parameter vector contains non-finite values")
        return theta

    def score_norm(self, theta, X, y):
        return np.linalg.norm(self.score(theta, X, y), axis=1)

    def newton_sums(self, theta, X, y, weights=None):
        """``(score_sum, jacobian_sum)`` in one pass; models may share work."""
        return self.score_sum(theta, X, y, weights), self.jacobian_sum(theta, X, y, weights)

    @abstractmethod
    def check_response(self, y):
        """Raise ``ValueError`` if ``y`` is outside the model's support."""

    def check_observations(self, X, y):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.p:
            raise ValueError(f"expected covariates with {self.p} columns, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates must be finite")
        self.check_response(y)

    def __repr__(self):
        return f"{type(self).__name__}(p={self.p})"

    def __eq__(self, other):
        return type(self) is type(other) and self.p == other.p

    def __hash__(self):
        return hash((type(self).__name__, self.p))


class LogisticModel(ConditionalModel):
    """Bernoulli GLM with canonical (logit) link; ``theta = (intercept, slopes)``."""

    name = "logistic"

    @property
    def d(self):
        return self.p + 1

    def default_theta(self):
        return np.zeros(self.d)

    def coordinate_names(self):
        return ["intercept"] + [f"x{j + 1}" for j in range(self.p)]

    def check_response(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("logistic responses must be exactly 0 or 1")

    def linear_predictor(self, theta, X):
        theta = self.check_theta(theta)
        X, _, single = _rows(X)
        return _out(theta[0] + X @ theta[1:], single)

    def log_density(self, theta, X, y):
        X, y, single = _rows(X, y)
        eta = self.linear_predictor(theta, X)
        # log(1 + e^eta) through logaddexp keeps large |eta| finite
        return _out(y * eta - np.logaddexp(0.0, eta), single)

    def score(self, theta, X, y):
        X, y, single = _rows(X, y)
        eta = self.linear_predictor(theta, X)
        r = y - expit(eta)
        out = np.empty((X.shape[0], self.d))
        out[:, 0] = r
        out[:, 1:] = r[:, None] * X
        return _out(out, single)

    def score_sum(self, theta, X, y, weights=None):
        """``sum_i w_i * score_i`` through matrix-vector products."""
        X, y, _ = _rows(X, y)
        r = y - expit(self.linear_predictor(theta, X))
        if weights is not None:
            r = r * weights
        return np.concatenate([[r.sum()], r @ X])

    def score_jacobian(self, theta, X, y=None):
        X, _, single = _rows(X)
        eta = self.linear_predictor(theta, X)
        s = expit(eta)
        w = s * (1.0 - s)
        Z = add_intercept(X)
        return _out(-w[:, None, None] * Z[:, :, None] * Z[:, None, :], single)

    def jacobian_sum(self, theta, X, y, weights=None):
        """``sum_i w_i * score_jacobian_i`` without forming per-row matrices."""
        X, _, _ = _rows(X)
        s = expit(self.linear_predictor(theta, X))
        w = s * (1.0 - s)
        if weights is not None:
            w = w * weights
        return -weighted_gram(X, w)

    def newton_sums(self, theta, X, y, weights=None):
        X, y, _ = _rows(X, y)
        s = expit(self.linear_predictor(theta, X))
        r = y - s
        w = s * (1.0 - s)
        if weights is not None:
            r = r * weights
            w = w * weights
        return np.concatenate([[r.sum()], r @ X]), -weighted_gram(X, w)

    def score_norm(self, theta, X, y):
        X, y, _ = _rows(X, y)
        r = y - expit(self.linear_predictor(theta, X))
        return np.abs(r) * np.sqrt(1.0 + np.einsum("ij,ij->i", X, X))

    def mean_response(self, theta, X):
        X, _, single = _rows(X)
        return _out(expit(self.linear_predictor(theta, X)), single)

    def mean_response_jac(self, theta, X):
        X, _, single = _rows(X)
        s = expit(self.linear_predictor(theta, X))
        return _out((s * (1.0 - s))[:, None] * add_intercept(X), single)

    def sample_response(self, theta, X, u):
        X, u, single = _rows(X, u)
        if np.any((u <= 0.0) | (u >= 1.0)):
            raise ValueError("uniform draws must lie in (0, 1)")
        return _out((u < self.mean_response(theta, X)).astype(float), single)


class WeibullModel(ConditionalModel):
    """Weibull accelerated-failure-time model.

    ``Y = W * exp(-(1, x') beta / alpha)`` with ``W ~ Weibull(alpha, 1)``, so

        log f(y | x) = log(alpha) + (alpha - 1) log(y) + eta - y**alpha * exp(eta),

    where ``eta = (1, x') beta``. ``theta = (alpha, beta)`` and ``beta``
    includes the intercept.
    """

    name = "weibull"

    @property
    def d(self):
        return self.p + 2

    def default_theta(self):
        theta = np.zeros(self.d)
        theta[0] = 1.0
        return theta

    def coordinate_names(self):
        return ["alpha", "intercept"] + [f"x{j + 1}" for j in range(self.p)]

    def check_theta(self, theta):
        theta = super().check_theta(theta)
        if not theta[0] > 0.0:
            raise InvalidParameterError(f"Weibull shape must be positive, got {theta[0]!r}")
        return theta

    def check_response(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y) & (y > 0.0)):
            raise ValueError("Weibull responses must be finite and strictly positive")

    def linear_predictor(self, theta, X):
        theta = self.check_theta(theta)
        X, _, single = _rows(X)
        return _out(theta[1] + X @ theta[2:], single)

    def _parts(self, theta, X, y):
        theta = self.check_theta(theta)
        alpha = theta[0]
        eta = theta[1] + X @ theta[2:]
        logy = np.log(y)
        w = np.exp(alpha * logy + eta)
        return alpha, eta, logy, w

    def log_density(self, theta, X, y):
        X, y, single = _rows(X, y)
        alpha, eta, logy, w = self._parts(theta, X, y)
        out = np.log(alpha) + (alpha - 1.0) * logy + eta - w
        if not np.all(np.isfinite(out)):
            raise InvalidParameterError("log-density is not finite at this parameter")
        return _out(out, single)

    def score(self, theta, X, y):
        X, y, single = _rows(X, y)
        alpha, eta, logy, w = self._parts(theta, X, y)
        out = np.empty((X.shape[0], self.d))
        out[:, 0] = 1.0 / alpha + logy - w * logy
        r = 1.0 - w
        out[:, 1] = r
        out[:, 2:] = r[:, None] * X
        return _out(out, single)

    def score_sum(self, theta, X, y, weights=None):
        X, y, _ = _rows(X, y)
        alpha, eta, logy, w = self._parts(theta, X, y)
        a = 1.0 / alpha + logy - w * logy
        r = 1.0 - w
        if weights is not None:
            a = a * weights
            r = r * weights
        return np.concatenate([[a.sum(), r.sum()], r @ X])

    def score_jacobian(self, theta, X, y):
        X, y, single = _rows(X, y)
        alpha, eta, logy, w = self._parts(theta, X, y)
        Z = add_intercept(X)
        m = X.shape[0]
        out = np.empty((m, self.d, self.d))
        out[:, 0, 0] = -1.0 / alpha**2 - w * logy**2
        cross = -(w * logy)[:, None] * Z
        out[:, 0, 1:] = cross
        out[:, 1:, 0] = cross
        out[:, 1:, 1:] = -w[:, None, None] * Z[:, :, None] * Z[:, None, :]
        return _out(out, single)

    def jacobian_sum(self, theta, X, y, weights=None):
        X, y, _ = _rows(X, y)
        alpha, eta, logy, w = self._parts(theta, X, y)
        ones = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        out = np.empty((self.d, self.d))
        out[0, 0] = -np.sum(ones / alpha**2 + ones * w * logy**2)
        wl = ones * w * logy
        cross = -np.concatenate([[wl.sum()], wl @ X])
        out[0, 1:] = cross
        out[1:, 0] = cross
        out[1:, 1:] = -weighted_gram(X, ones * w)
        return out

    def mean_response(self, theta, X):
        X, _, single = _rows(X)
        theta = self.check_theta(theta)
        alpha = theta[0]
        eta = theta[1] + X @ theta[2:]
        return _out(np.exp(-eta / alpha) * gamma(1.0 + 1.0 / alpha), single)

    def mean_response_jac(self, theta, X):
        X, _, single = _rows(X)
        theta = self.check_theta(theta)
        alpha = theta[0]
        eta = theta[1] + X @ theta[2:]
        mean = np.exp(-eta / alpha) * gamma(1.0 + 1.0 / alpha)
        out = np.empty((X.shape[0], self.d))
        out[:, 0] = mean * (eta - digamma(1.0 + 1.0 / alpha)) / alpha**2
        out[:, 1:] = -(mean / alpha)[:, None] * add_intercept(X)
        return _out(out, single)

    def sample_response(self, theta, X, u):
        X, u, single = _rows(X, u)
        if np.any((u <= 0.0) | (u >= 1.0)):
            raise ValueError("uniform draws must lie in (0, 1)")
        theta = self.check_theta(theta)
        alpha = theta[0]
        eta = theta[1] + X @ theta[2:]
        return _out((-np.log(u)) ** (1.0 / alpha) * np.exp(-eta / alpha), single)


def make_model(name, p):
    if name == "logistic":
        return LogisticModel(p)
    if name == "weibull":
        return WeibullModel(p)
    raise ValueError(f"unknown model {name!r}; expected 'logistic' or 'weibull'")
