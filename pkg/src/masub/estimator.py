"""Subsample estimating equations and the one-step moment-assisted GMM update.

Notation follows the usual stacked-GMM layout: ``u`` is the d-vector
subsample estimating function, ``v = (rho / p) * (m(x; theta) - mu_hat)`` the
q-vector auxiliary function, ``g`` their stacked subsample mean (divided by
the expected subsample size ``n``), ``G`` its Jacobian and ``Omega`` the
estimated covariance of ``sqrt(n) * g``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import map_chunks
from .model import LogisticModel, add_intercept, weighted_gram
from .numerics import (MAX_CONDITION, InvalidParameterError, NonConvergenceError,
                       NotPositiveDefiniteError, SeparationError, SingularMatrixError,
                       solve_sym)

JITTER_EPS = 1e-10
SEPARATION_NORM = 50.0


class EstimatorKind(str, enum.Enum):
    UNIFORM_MLE = "uni"
    IPW = "ipw"
    MSCL = "mscl"


def check_kind(kind, model):
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.MSCL and not isinstance(model, LogisticModel):
        raise ValueError("MSCL needs a closed-form sampled conditional probability; "
                         "only the logistic model is supported")
    return kind


def _probs(plan, X, y, probs):
    if probs is not None:
        p = np.asarray(probs, dtype=float)
    else:
        p = plan.prob(X, y)
    if np.any(p <= 0.0):
        raise ValueError("inclusion probabilities must be positive")
    return p


def mscl_pi_bar(model, plan, theta, X):
    """Sampled conditional probability ``pi_bar(x; theta)`` and its gradient."""
    if not isinstance(model, LogisticModel):
        raise ValueError("pi_bar is only available in closed form for binary responses")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p1 = plan.prob_at(X, 1.0)
    p0 = plan.prob_at(X, 0.0)
    s = expit(model.linear_predictor(theta, X))
    pi_bar = p1 * s + p0 * (1.0 - s)
    if np.any(pi_bar <= 0.0):
        raise ValueError("sampled conditional probability must be positive")
    pi_dot = ((p1 - p0) * s * (1.0 - s))[:, None] * add_intercept(X)
    return pi_bar, pi_dot


def eval_u(kind, model, plan, theta, X, y, probs=None):
    kind = check_kind(kind, model)
    psi = model.score(theta, np.atleast_2d(X), y)
    if kind is EstimatorKind.UNIFORM_MLE:
        return psi
    if kind is EstimatorKind.IPW:
        p = _probs(plan, X, y, probs)
        return (plan.rho / p)[:, None] * psi
    pi_bar, pi_dot = mscl_pi_bar(model, plan, theta, X)
    return psi - pi_dot / pi_bar[:, None]


def eval_u_jac(kind, model, plan, theta, X, y, probs=None):
    kind = check_kind(kind, model)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    jac = model.score_jacobian(theta, X, y)
    if kind is EstimatorKind.UNIFORM_MLE:
        return jac
    if kind is EstimatorKind.IPW:
        p = _probs(plan, X, y, probs)
        return (plan.rho / p)[:, None, None] * jac
    p1 = plan.prob_at(X, 1.0)
    p0 = plan.prob_at(X, 0.0)
    s = expit(model.linear_predictor(theta, X))
    Z = add_intercept(X)
    ZZ = Z[:, :, None] * Z[:, None, :]
    pi_bar = p1 * s + p0 * (1.0 - s)
    w = s * (1.0 - s)
    pi_dot = ((p1 - p0) * w)[:, None] * Z
    pi_ddot = ((p1 - p0) * w * (1.0 - 2.0 * s))[:, None, None] * ZZ
    outer = pi_dot[:, :, None] * pi_dot[:, None, :]
    return jac - pi_ddot / pi_bar[:, None, None] + outer / (pi_bar**2)[:, None, None]


def eval_u_jac_sum(kind, model, plan, theta, X, y, probs=None):
    """``sum_i eval_u_jac`` over rows, using the models' BLAS sums when possible."""
    kind = check_kind(kind, model)
    if kind is EstimatorKind.UNIFORM_MLE:
        return model.jacobian_sum(theta, X, y)
    if kind is EstimatorKind.IPW:
        p = _probs(plan, X, y, probs)
        return model.jacobian_sum(theta, X, y, weights=plan.rho / p)
    # every MSCL Jacobian term is a scalar multiple of z z'
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p1 = plan.prob_at(X, 1.0)
    p0 = plan.prob_at(X, 0.0)
    s = expit(model.linear_predictor(theta, X))
    pi_bar = p1 * s + p0 * (1.0 - s)
    w = s * (1.0 - s)
    a = (p1 - p0) * w / pi_bar
    return -weighted_gram(X, w + a * (1.0 - 2.0 * s) - a * a)


@dataclass(frozen=True)
class PlainFit:
    theta: np.ndarray
    iterations: int
    grad_norm: float


def newton_solve(fun, theta0, model, count, tol=1e-8, max_iter=100, max_halvings=30, polish=False):
    """Newton iteration on a summed estimating equation.

    ``fun(theta)`` returns ``(sum_u, sum_u_jac)``. Steps are halved until the
    norm of ``sum_u`` decreases. Converged when ``||sum_u|| / count < tol``.
    With ``polish`` one further full step is taken after convergence and kept
    if it does not increase the norm; by quadratic convergence this reaches
    rounding level at the cost of one evaluation.
    """
    theta = model.check_theta(theta0).copy()
    total, jac = fun(theta)
    norm = np.linalg.norm(total)
    for it in range(max_iter + 1):
        if norm / count < tol:
            if polish and norm > 0:
                theta, norm = _polish(fun, theta, total, jac, norm)
            return PlainFit(theta, it, norm / count)
        if it == max_iter:
            break
        cond = np.linalg.cond(jac)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularMatrixError(f"singular estimating-equation Jacobian (condition {cond:.3g})",
                                      block="Jacobian", condition=cond)
        step = np.linalg.solve(jac, total)
        t = 1.0
        for _ in range(max_halvings):
            cand = theta - t * step
            try:
                c_total, c_jac = fun(cand)
                c_norm = np.linalg.norm(c_total)
            except (InvalidParameterError, FloatingPointError):
                c_norm = np.inf
            if np.isfinite(c_norm) and c_norm < norm:
                break
            t *= 0.5
        else:
            raise NonConvergenceError(f"line search failed at iteration {it} "
                                      f"(||sum u|| / n = {norm / count:.3g})")
        theta, total, jac, norm = cand, c_total, c_jac, c_norm
        if isinstance(model, LogisticModel) and np.linalg.norm(theta) > SEPARATION_NORM:
            raise SeparationError(f"||theta|| exceeded {SEPARATION_NORM:g}; the responses look separable")
    raise NonConvergenceError(f"Newton iteration did not converge in {max_iter} iterations "
                              f"(||sum u|| / n = {norm / count:.3g})")


def _polish(fun, theta, total, jac, norm):
    try:
        cand = theta - np.linalg.solve(jac, total)
        c_norm = np.linalg.norm(fun(cand)[0])
    except (np.linalg.LinAlgError, InvalidParameterError, FloatingPointError):
        return theta, norm
    return (cand, c_norm) if np.isfinite(c_norm) and c_norm <= norm else (theta, norm)


def solve_plain(kind, subsample, model, plan, theta_init=None, tol=1e-8, max_iter=100):
    """Solve the plain subsample equation ``sum_{i in S} u(x_i, y_i; theta) = 0``."""
    kind = check_kind(kind, model)
    if subsample.size == 0:
        raise ValueError("cannot solve on an empty subsample")
    X, y, probs = subsample.X, subsample.y, subsample.probs
    if theta_init is None:
        theta_init = model.default_theta()

    def fun(theta):
        with np.errstate(over="raise", invalid="raise"):
            u = eval_u(kind, model, plan, theta, X, y, probs)
            return u.sum(axis=0), eval_u_jac_sum(kind, model, plan, theta, X, y, probs)

    return newton_solve(fun, theta_init, model, subsample.size, tol=tol, max_iter=max_iter, polish=True)


def whole_data_mle(model, dataset, theta_init=None, tol=1e-8, max_iter=100, threads=1):
    """Full-data maximum likelihood by Newton's method, one pass per iteration."""
    def fun(theta):
        def part(idx, X, y, mask):
            w = None if mask is None else mask.astype(float)
            with np.errstate(over="raise", invalid="raise"):
                return model.newton_sums(theta, X, y, w)
        parts = map_chunks(dataset, part, threads)
        total = np.zeros(model.d)
        jac = np.zeros((model.d, model.d))
        for a, b in parts:
            total = total + a
            jac = jac + b
        return total, jac

    if theta_init is None:
        theta_init = model.default_theta()
    return newton_solve(fun, theta_init, model, dataset.n_rows, tol=tol, max_iter=max_iter)


def _sym(M):
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class GmmAssembly:
    g: np.ndarray
    G: np.ndarray
    Omega: np.ndarray
    theta_tilde: np.ndarray
    d: int
    q: int
    n_expected: float
    rho: float
    mu_hat: object = None

    @property
    def Omega11(self):
        return self.Omega[:self.d, :self.d]

    @property
    def Omega12(self):
        return self.Omega[:self.d, self.d:]

    @property
    def Omega22(self):
        return self.Omega[self.d:, self.d:]


def assemble_gmm(kind, subsample, model, plan, momfun, mu_hat, theta_tilde):
    """Stack ``u`` and ``v`` over the subsample at ``theta_tilde``.

    ``momfun=None`` gives the degenerate ``q = 0`` assembly holding only the
    ``u`` block. All sums are divided by the expected size ``n``.
    """
    kind = check_kind(kind, model)
    if subsample.size == 0:
        raise ValueError("cannot assemble over an empty subsample")
    theta_tilde = model.check_theta(theta_tilde)
    X, y, p = subsample.X, subsample.y, subsample.probs
    n = float(subsample.expected_n)
    rho = plan.rho
    d = model.d
    U = eval_u(kind, model, plan, theta_tilde, X, y, p)
    Ud_sum = eval_u_jac_sum(kind, model, plan, theta_tilde, X, y, p)
    if momfun is None:
        Omega = _sym(U.T @ U) / n
        return GmmAssembly(U.sum(axis=0) / n, Ud_sum / n, Omega, theta_tilde, d, 0, n, rho, mu_hat)

    mu = np.asarray(getattr(mu_hat, "mu_hat", mu_hat), dtype=float)
    q = momfun.q
    if mu.shape != (q,):
        raise ValueError(f"moment dimension {q} does not match mu_hat of shape {mu.shape}")
    w = rho / p
    V = w[:, None] * (momfun.cond_mean(model, theta_tilde, X) - mu)
    Vd_sum = momfun.cond_mean_jac_sum(model, theta_tilde, X, w)
    H = momfun.eval_h(X, y) - mu

    g = np.concatenate([U.sum(axis=0), V.sum(axis=0)]) / n
    G = np.vstack([Ud_sum, Vd_sum]) / n
    O11 = _sym(U.T @ U)
    O12 = U.T @ (V - rho * H)
    VH = V.T @ H
    O22 = _sym(V.T @ V) - rho * (VH + VH.T) + rho**2 * _sym(H.T @ (H / p[:, None]))
    Omega = np.block([[O11, O12], [O12.T, O22]]) / n
    return GmmAssembly(g, G, Omega, theta_tilde, d, q, n, rho, mu_hat)


def _diagnose_omega(Omega, d):
    """Name the block of Omega responsible for a failed factorization."""
    for name, block in (("Omega11", Omega[:d, :d]), ("Omega22", Omega[d:, d:])):
        if block.size == 0:
            continue
        try:
            solve_sym(block, np.eye(block.shape[0]), name=name)
        except (SingularMatrixError, NotPositiveDefiniteError):
            return name
    return "Omega (Schur complement of Omega11)"


def _jittered(assembly):
    if assembly.q == 0:
        return assembly.Omega, 0.0
    Omega = assembly.Omega.copy()
    O22 = Omega[assembly.d:, assembly.d:]
    eps = JITTER_EPS * np.trace(O22) / assembly.q
    Omega[assembly.d:, assembly.d:] = O22 + eps * np.eye(assembly.q)
    return Omega, eps


def _normal_equations(G, Omega, g, d):
    try:
        rep = solve_sym(Omega, np.column_stack([G, g]), name="Omega")
    except (SingularMatrixError, NotPositiveDefiniteError) as exc:
        block = _diagnose_omega(Omega, d)
        cls = type(exc)
        raise cls(f"estimated covariance is not invertible; offending block: {block} ({exc})",
                  block=block) from exc
    OiG, Oig = rep.solution[:, :-1], rep.solution[:, -1]
    M = _sym(G.T @ OiG)
    return M, G.T @ Oig, rep.condition_estimate


def _information(M):
    try:
        return solve_sym(M, np.eye(M.shape[0]), name="G'Omega^-1 G")
    except (SingularMatrixError, NotPositiveDefiniteError) as exc:
        raise NotPositiveDefiniteError(f"G'Omega^-1 G is rank deficient: {exc}", block="G'Omega^-1 G") from exc


def mas_step(assembly, jitter=False):
    """One-step update ``theta_tilde - (G' W G)^{-1} G' W g`` with ``W = Omega^{-1}``."""
    Omega = _jittered(assembly)[0] if jitter else assembly.Omega
    if assembly.q == 0:
        cond = np.linalg.cond(assembly.G)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularMatrixError(f"square G is singular (condition {cond:.3g})", block="G", condition=cond)
        return assembly.theta_tilde - np.linalg.solve(assembly.G, assembly.g)
    M, b, _ = _normal_equations(assembly.G, Omega, assembly.g, assembly.d)
    try:
        delta = solve_sym(M, b, name="G'Omega^-1 G").solution
    except (SingularMatrixError, NotPositiveDefiniteError) as exc:
        raise NotPositiveDefiniteError(f"G'Omega^-1 G is rank deficient: {exc}", block="G'Omega^-1 G") from exc
    return assembly.theta_tilde - delta


def sandwich(G, Omega):
    """``(G' Omega^{-1} G)^{-1}`` as a symmetric matrix."""
    M, _, _ = _normal_equations(G, Omega, np.zeros(G.shape[0]), G.shape[1])
    return _sym(_information(M).solution)


def variance_estimate(assembly, jitter=False):
    """Plug-in asymptotic variance and standard errors ``sqrt(diag(V) / n)``."""
    Omega = _jittered(assembly)[0] if jitter else assembly.Omega
    V = sandwich(assembly.G, Omega)
    return V, _std_errors(V, assembly.n_expected)


def _std_errors(V, n):
    diag = np.diag(V)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise NotPositiveDefiniteError("variance estimate has non-positive diagonal", block="V")
    return np.sqrt(diag / n)


def plain_variance(kind, subsample, model, plan, theta_tilde):
    """Sandwich variance of the plain subsample estimator."""
    asm = assemble_gmm(kind, subsample, model, plan, None, None, theta_tilde)
    return sandwich(asm.G, asm.Omega)


@dataclass
class MasResult:
    theta_mas: np.ndarray
    v_hat: np.ndarray
    std_errors: np.ndarray
    condition_omega: float
    diagnostics: dict = field(default_factory=dict)


def fit_mas(assembly, jitter=False, diagnostics=None):
    """Closed-form estimate plus variance from one assembly."""
    Omega, eps = _jittered(assembly) if jitter else (assembly.Omega, 0.0)
    jittered = GmmAssembly(assembly.g, assembly.G, Omega, assembly.theta_tilde, assembly.d,
                           assembly.q, assembly.n_expected, assembly.rho, assembly.mu_hat)
    theta = mas_step(jittered)
    V, se = variance_estimate(jittered)
    try:
        cond = solve_sym(Omega, np.eye(Omega.shape[0]), name="Omega").condition_estimate
    except (SingularMatrixError, NotPositiveDefiniteError):
        cond = float("inf")
    diag = dict(diagnostics or {})
    if jitter:
        diag["omega22_jitter"] = eps
    return MasResult(theta, V, se, cond, diag)
