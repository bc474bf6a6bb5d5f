"""End-to-end moment-assisted subsampling fits.

With a pilot (``n0 > 0``) this is the two-step procedure: a uniform pilot
gives ``theta_check``, the remaining records act as the whole data for the
sampling plan, the main Poisson draw and the whole-data moment. With
``n0 = 0`` the general one-step procedure runs directly on the full data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .estimator import (EstimatorKind, assemble_gmm, check_kind, fit_mas, plain_variance,
                        solve_plain)
from .data import fused, map_chunks, unzip
from .moments import make_moment, moment_chunk, reduce_moment
from .sampling import (collect_draw, derive_seed, draw_chunk, draw_pilot, norms_chunk,
                       plan_from_norms, uniform_plan)

logger = logging.getLogger(__name__)


@dataclass
class FitResult:
    estimator: str
    theta_mas: np.ndarray
    theta_tilde: np.ndarray
    theta_check: np.ndarray
    v_hat: np.ndarray
    std_errors: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def label(design, kind, moment):
    method = {"uni": "UNI", "ipw": "IPW", "mscl": "MSCL"}[EstimatorKind(kind).value]
    if moment in (None, "none"):
        return f"{method}-Plain"
    return f"{method}-MAS-{moment.upper()}"


def default_design(kind):
    return "uniform" if EstimatorKind(kind) is EstimatorKind.UNIFORM_MLE else "scorenorm"


@dataclass
class PilotStage:
    theta_check: object
    whole: object
    diagnostics: dict


def pilot_stage(model, dataset, n0, seed, threads=1):
    """Uniform pilot fit; the records it did not select become the whole data.

    With ``n0 = 0`` there is no pilot and the full dataset is the whole data.
    """
    if not n0:
        return PilotStage(None, dataset, {"N": dataset.n_rows})
    split = draw_pilot(dataset, n0, derive_seed(seed, "pilot"), threads)
    model.check_observations(split.pilot.X, split.pilot.y)
    pilot_fit = solve_plain(EstimatorKind.UNIFORM_MLE, split.pilot, model, None)
    if split.remainder.n_rows == 0:
        raise ValueError("the pilot consumed every record; nothing is left as whole data")
    return PilotStage(pilot_fit.theta, split.remainder,
                      {"N": dataset.n_rows, "pilot_size": split.pilot.size,
                       "pilot_iterations": pilot_fit.iterations})


def scan_whole_data(design, whole, n, model, theta_check, momfuns, seed, threads=1):
    """Plan, main draw and whole-data moments in at most two passes over ``whole``.

    A uniform plan needs no pass of its own, so the moments are accumulated
    during the draw. A score-norm plan needs every norm before any draw, so
    the norms and the moments share the first pass and the draw is the
    second. Returns ``(plan, subsample, [mu_hat per moment function])``.
    """
    if design not in ("uniform", "scorenorm"):
        raise ValueError(f"unknown design {design!r}; expected 'uniform' or 'scorenorm'")
    momfuns = list(momfuns)
    moment_fns = [moment_chunk(mf) for mf in momfuns]
    if design == "uniform":
        plan = uniform_plan(n, whole.n_rows)
        fns = [draw_chunk(plan, seed)] + moment_fns
        cols = unzip(map_chunks(whole, fused(*fns), threads), len(fns))
        sub = collect_draw(cols[0], plan, whole.p)
    else:
        if theta_check is None:
            raise ValueError("the score-norm design needs a pilot estimate")
        uniform_plan(n, whole.n_rows)
        fns = [norms_chunk(model, theta_check)] + moment_fns
        cols = unzip(map_chunks(whole, fused(*fns), threads), len(fns))
        plan = plan_from_norms(np.concatenate(cols[0]), n, model, theta_check)
        sub = collect_draw(map_chunks(whole, draw_chunk(plan, seed), threads), plan, whole.p)
    mus = [reduce_moment(col, mf.q) for col, mf in zip(cols[1:], momfuns)]
    return plan, sub, mus


def estimate(model, kind, design, moment, plan, sub, theta_check, momfun=None, mu=None,
             jitter=False, diagnostics=None):
    """Plain solve on ``sub`` followed, when a moment is given, by the MAS update."""
    kind = check_kind(kind, model)
    diagnostics = dict(diagnostics or {})
    if sub.size == 0:
        raise ValueError("the main subsample is empty; increase n")
    model.check_observations(sub.X, sub.y)
    plain = solve_plain(kind, sub, model, plan, theta_check)
    diagnostics.update(newton_iterations=plain.iterations, subsample_size=sub.size,
                       expected_subsample_size=plan.n, rho=plan.rho,
                       plan_warnings=list(plan.warnings))
    if momfun is None:
        V = plain_variance(kind, sub, model, plan, plain.theta)
        se = np.sqrt(np.diag(V) / plan.n)
        return FitResult(label(design, kind, moment), plain.theta, plain.theta, theta_check, V, se,
                         diagnostics)
    asm = assemble_gmm(kind, sub, model, plan, momfun, mu, plain.theta)
    res = fit_mas(asm, jitter=jitter, diagnostics=diagnostics)
    res.diagnostics["condition_omega"] = res.condition_omega
    return FitResult(label(design, kind, moment), res.theta_mas, plain.theta, theta_check, res.v_hat,
                     res.std_errors, res.diagnostics)


def fit(model, dataset, n, n0=200, kind="uni", moment="opt", design=None, seed=0, threads=1,
        jitter=False):
    """Run the full pipeline on ``dataset`` and return a :class:`FitResult`."""
    kind = check_kind(kind, model)
    design = design or default_design(kind)
    if not n0 and (design != "uniform" or moment == "opt"):
        raise ValueError("non-uniform designs and the optimal moment need a pilot (n0 > 0)")
    stage = pilot_stage(model, dataset, n0, seed, threads)
    momfun = make_moment(moment, model, stage.theta_check)
    plan, sub, mus = scan_whole_data(design, stage.whole, n, model, stage.theta_check,
                                     [momfun] if momfun else [], derive_seed(seed, "main"), threads)
    return estimate(model, kind, design, moment, plan, sub, stage.theta_check, momfun,
                    mus[0] if mus else None, jitter, stage.diagnostics)
