"""Poisson subsampling designs and counter-based inclusion draws.

Every inclusion decision is a pure function of ``(seed, record index)``
through a 64-bit avalanche mix, so a subsample does not depend on chunking,
thread count or iteration order.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import ExcludingDataset, map_chunks

logger = logging.getLogger(__name__)

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
CLAMP_LO_FACTOR = 0.1
CLAMP_HI_FACTOR = 10.0
MAX_CLAMP_ROUNDS = 20
MAX_PILOT_RETRIES = 8


def _splitmix_int(z):
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _finalize(z):
    # in place on z to keep temporaries to one buffer
    t = np.right_shift(z, np.uint64(30))
    np.bitwise_xor(z, t, out=z)
    np.multiply(z, np.uint64(_M1), out=z)
    np.right_shift(z, np.uint64(27), out=t)
    np.bitwise_xor(z, t, out=z)
    np.multiply(z, np.uint64(_M2), out=z)
    np.right_shift(z, np.uint64(31), out=t)
    np.bitwise_xor(z, t, out=z)
    return z


def mix64(seed, index):
    """Stateless 64-bit hash of ``(seed, index)`` (splitmix64 finalizer)."""
    key = _splitmix_int((int(seed) + _GOLDEN) & _MASK)
    index = np.asarray(index, dtype=np.int64)
    z = index.reshape(-1).astype(np.uint64)
    with np.errstate(over="ignore"):
        z += np.uint64(1)
        z *= np.uint64(_GOLDEN)
        z += np.uint64(key)
        z = _finalize(z)
    return z.reshape(index.shape) if index.ndim else z[0]


def unit_uniform(seed, index):
    """Map ``mix64(seed, index)`` to a double strictly inside (0, 1)."""
    bits = mix64(seed, index) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def derive_seed(seed, *tags):
    """Derive an independent 64-bit stream seed from a master seed and tags."""
    text = ":".join([str(int(seed))] + [str(t) for t in tags])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class SubsamplingPlan:
    """A Poisson inclusion-probability rule ``p(x, y)``.

    Score-norm plans store the pilot estimate and a scalar transform
    ``p = clip(scale * ||psi(x, y; theta_check)||, lower, upper)``, which is
    exactly what the normalise/clamp/rescale loop produces, so no per-record
    state is kept after construction.
    """

    design: str
    n: float
    N: int
    rho: float
    clamp_lo: float
    clamp_hi: float
    model: object = None
    theta_check: np.ndarray = None
    scale: float = 0.0
    lower: float = 0.0
    upper: float = 1.0
    rounds: int = 0
    warnings: tuple = field(default_factory=tuple)

    def prob(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.design == "uniform":
            return np.broadcast_to(self.rho, (X.shape[0],))
        norms = self.model.score_norm(self.theta_check, X, y)
        return np.clip(self.scale * norms, self.lower, self.upper)

    def prob_at(self, X, y_value):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.prob(X, np.full(X.shape[0], float(y_value)))


def _bounds(rho):
    return CLAMP_LO_FACTOR * rho, min(1.0, CLAMP_HI_FACTOR * rho)


def uniform_plan(n, N):
    if N < 1:
        raise ValueError("population must contain at least one record")
    if not 0 < n <= N:
        raise ValueError(f"expected subsample size must lie in (0, N={N}], got {n}")
    rho = n / N
    lo, hi = _bounds(rho)
    return SubsamplingPlan("uniform", float(n), int(N), rho, lo, hi, lower=rho, upper=rho)


def clamp_rescale(norms, n, lo, hi, max_rounds=MAX_CLAMP_ROUNDS, rtol=1e-12):
    """Run normalise -> (clamp -> rescale)* on ``norms`` in scalar form.

    Returns ``(scale, lower, upper, rounds, converged)`` such that the final
    probabilities are ``clip(scale * norms, lower, upper)``. A clip of a clip
    is a clip with clipped bounds, which is what keeps the state scalar.
    """
    norms = np.asarray(norms, dtype=float)
    scale = n / norms.sum()
    lower, upper = 0.0, np.inf
    for rounds in range(1, max_rounds + 1):
        lower, upper = min(max(lower, lo), hi), min(max(upper, lo), hi)
        total = np.clip(scale * norms, lower, upper).sum()
        if abs(total - n) <= rtol * n:
            return scale, lower, upper, rounds, True
        k = n / total
        scale, lower, upper = scale * k, lower * k, upper * k
    lower, upper = min(max(lower, lo), hi), min(max(upper, lo), hi)
    return scale, lower, upper, max_rounds, False


def norms_chunk(model, theta_check):
    """Chunk function returning the score norms of the rows in a chunk."""
    def fn(idx, X, y, mask):
        norms = model.score_norm(theta_check, X, y)
        return norms if mask is None else norms[mask]
    return fn


def plan_from_norms(norms, n, model, theta_check):
    """Score-norm plan from the norms of every record in the population."""
    norms = np.asarray(norms, dtype=float)
    base = uniform_plan(n, norms.shape[0])
    if not np.all(np.isfinite(norms)):
        raise ValueError("non-finite score norms at the pilot estimate")
    if norms.sum() <= 0.0:
        logger.warning("all score norms are zero; falling back to uniform subsampling")
        return SubsamplingPlan(**{**base.__dict__, "warnings": ("degenerate_scores_uniform_fallback",)})
    scale, lower, upper, rounds, ok = clamp_rescale(norms, n, base.clamp_lo, base.clamp_hi)
    warns = () if ok else ("clamp_rescale_not_converged",)
    if not ok:
        logger.warning("clamp/rescale loop did not converge in %d rounds", rounds)
    return SubsamplingPlan("scorenorm", float(n), base.N, base.rho, base.clamp_lo, base.clamp_hi,
                           model=model, theta_check=theta_check, scale=float(scale),
                           lower=float(lower), upper=float(upper), rounds=rounds, warnings=warns)


def make_plan(design, dataset, n, model=None, theta_check=None, threads=1):
    """Build a subsampling plan over ``dataset`` with expected size ``n``.

    ``design`` is ``"uniform"`` or ``"scorenorm"``. The score-norm design
    sets ``p_i`` proportional to ``||psi(x_i, y_i; theta_check)||`` and then
    clamps to ``[0.1 rho, min(1, 10 rho)]`` while keeping ``sum p_i = n``.
    The norms are held only while the plan is built.
    """
    if design == "uniform":
        return uniform_plan(n, dataset.n_rows)
    if design != "scorenorm":
        raise ValueError(f"unknown design {design!r}; expected 'uniform' or 'scorenorm'")
    if model is None or theta_check is None:
        raise ValueError("the score-norm design needs a model and a pilot estimate")
    theta_check = model.check_theta(theta_check).copy()
    uniform_plan(n, dataset.n_rows)
    parts = map_chunks(dataset, norms_chunk(model, theta_check), threads)
    norms = np.concatenate(parts) if parts else np.empty(0)
    return plan_from_norms(norms, n, model, theta_check)


@dataclass(frozen=True)
class Subsample:
    """Records selected by a Poisson draw, with their inclusion probabilities."""

    indices: np.ndarray
    X: np.ndarray
    y: np.ndarray
    probs: np.ndarray
    expected_n: float

    @property
    def size(self):
        return self.indices.shape[0]

    def __len__(self):
        return self.size


def draw_chunk(plan, seed):
    """Chunk function performing the Poisson draw on one chunk."""
    def fn(idx, X, y, mask):
        u = unit_uniform(seed, idx)
        if plan.design == "uniform":
            keep = u < plan.rho
            if mask is not None:
                keep &= mask
            return idx[keep], X[keep], y[keep], np.full(int(keep.sum()), plan.rho)
        # p never exceeds plan.upper, so only rows with u < upper can be kept
        cand = np.flatnonzero(u < plan.upper if mask is None else (u < plan.upper) & mask)
        p = plan.prob(X[cand], y[cand])
        hit = u[cand] < p
        rows = cand[hit]
        return idx[rows], X[rows], y[rows], p[hit]
    return fn


def collect_draw(parts, plan, p_dim):
    """Concatenate per-chunk draw results into a :class:`Subsample`."""
    if not parts:
        return Subsample(np.empty(0, np.int64), np.empty((0, p_dim)), np.empty(0), np.empty(0), plan.n)
    return Subsample(np.concatenate([c[0] for c in parts]),
                     np.concatenate([c[1] for c in parts]).reshape(-1, p_dim),
                     np.concatenate([c[2] for c in parts]),
                     np.concatenate([c[3] for c in parts]),
                     plan.n)


def draw_poisson(plan, dataset, seed, threads=1):
    """Include record ``i`` iff ``unit_uniform(seed, i) < p_i``."""
    if dataset.n_rows != plan.N:
        raise ValueError(f"plan was built for N={plan.N} records, dataset has {dataset.n_rows}")
    return collect_draw(map_chunks(dataset, draw_chunk(plan, seed), threads), plan, dataset.p)


@dataclass(frozen=True)
class PilotSplit:
    pilot: Subsample
    remainder: ExcludingDataset
    seed: int


def draw_pilot(dataset, n0, seed, threads=1):
    """Uniform Poisson pilot at rate ``n0 / N`` plus the complementary view.

    An empty pilot is redrawn with ``seed + 1`` up to 8 times.
    """
    N = dataset.n_rows
    if not 0 < n0 <= N:
        raise ValueError(f"pilot size must lie in (0, N={N}], got {n0}")
    plan = uniform_plan(n0, N)
    for attempt in range(MAX_PILOT_RETRIES + 1):
        s = (int(seed) + attempt) & _MASK
        pilot = draw_poisson(plan, dataset, s, threads)
        if pilot.size > 0:
            break
    else:
        raise RuntimeError(f"pilot subsample was empty after {MAX_PILOT_RETRIES} retries")
    return PilotSplit(pilot, ExcludingDataset(dataset, pilot.indices), s)
