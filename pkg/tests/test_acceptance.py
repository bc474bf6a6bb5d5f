"""Acceptance criteria, each run at its stated tolerance.

Every test prints (and the session summary repeats) one PASS/FAIL line.
"""
import numpy as np
import pytest

from masub.estimator import (GmmAssembly, assemble_gmm, eval_u, eval_u_jac, fit_mas, mas_step,
                             mscl_pi_bar, solve_plain)
from masub.harness import (builtin_scenario, generate_dataset, monte_carlo_population, report_csv_text,
                           run_replications, ScenarioConfig, timing_report)
from masub.model import LogisticModel, WeibullModel
from masub.moments import OptimalScoreMoment, XYMoment, make_moment, whole_data_moment
from masub.numerics import finite_diff_jacobian, quad_cond_mean
from masub.pipeline import fit
from masub.sampling import draw_poisson, make_plan, uniform_plan

from conftest import record_criterion
from oracles import LinearlyMixedMoment, gmm_lstsq_step, naive_assembly

DESK_THETA0 = np.r_[0.0, np.full(9, 0.2)]
SLOPES = slice(1, None)
MAS_LABELS = [f"{k}-MAS-{m}" for k in ("UNI", "IPW", "MSCL") for m in ("XY", "OPT")]


def logistic_data(N, seed, p=3):
    theta0 = np.r_[0.0, np.linspace(0.5, -0.5, p)]
    return LogisticModel(p), generate_dataset(LogisticModel(p), theta0, N, seed), theta0


def test_criterion_1_efficiency_gain(desk_report):
    report, seconds = desk_report
    plain = report.cell("UNI-Plain").msd[SLOPES]
    opt = report.cell("UNI-MAS-OPT").msd[SLOPES] / plain
    xy = report.cell("UNI-MAS-XY").msd[SLOPES] / plain
    ok = opt.max() <= 0.6 and xy.max() <= 0.9 and seconds <= 600
    assert record_criterion(1, ok, f"max slope MSD ratio OPT/Plain {opt.max():.3f} (<= 0.6), "
                                   f"XY/Plain {xy.max():.3f} (<= 0.9), desk run {seconds:.1f} s (<= 600)")


def test_criterion_2_unbiasedness(desk_report):
    report, _ = desk_report
    worst = {lab: float(np.max(np.abs(report.cell(lab).bias))) for lab in report.config.labels}
    bad = {k: round(v, 4) for k, v in worst.items() if v > 0.01}
    msd = max(float(np.max(report.cell(lab).msd)) for lab in worst)
    se = msd / np.sqrt(report.config.replications)
    ok = not bad
    assert record_criterion(2, ok, f"max |bias| {max(worst.values()):.4f} (<= 0.01); "
                                   f"Monte Carlo SE of a bias up to {se:.4f}; over limit: {bad or 'none'}")


def test_criterion_3_esd_fidelity(desk_report):
    report, _ = desk_report
    ratios = np.concatenate([report.cell(lab).esd / report.cell(lab).msd for lab in MAS_LABELS])
    ok = ratios.min() >= 0.8 and ratios.max() <= 1.25
    assert record_criterion(3, ok, f"ESD/MSD over MAS estimators in [{ratios.min():.3f}, {ratios.max():.3f}]"
                                   " (within [0.8, 1.25])")


def test_criterion_4_mscl_equals_ipw_under_uniform():
    worst = 0.0
    for seed in range(10):
        m, ds, _ = logistic_data(5000, seed)
        plan = uniform_plan(600, 5000)
        sub = draw_poisson(plan, ds, seed)
        a = solve_plain("ipw", sub, m, plan).theta
        b = solve_plain("mscl", sub, m, plan).theta
        worst = max(worst, float(np.max(np.abs(a - b))))
    assert record_criterion(4, worst <= 1e-8, f"max |theta_IPW - theta_MSCL| {worst:.2e} over 10 subsamples "
                                               "(<= 1e-8)")


def test_criterion_5a_mas_step_least_squares():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        d, q = int(rng.integers(1, 8)), int(rng.integers(0, 8))
        G = rng.normal(size=(d + q, d))
        A = rng.normal(size=(d + q, d + q))
        Omega = A @ A.T + 0.1 * np.eye(d + q)
        asm = GmmAssembly(rng.normal(size=d + q), G, Omega, rng.normal(size=d), d, q, 100.0, 0.01)
        oracle = gmm_lstsq_step(asm.theta_tilde, asm.g, G, Omega)
        worst = max(worst, float(np.max(np.abs(mas_step(asm) - oracle)) / max(1.0, np.max(np.abs(oracle)))))
    assert record_criterion("5a", worst <= 1e-8, f"max scaled gap to the least-squares minimiser {worst:.2e} "
                                                  "over 100 assemblies (<= 1e-8)")


def test_criterion_5b_blocks_match_naive_loops():
    worst, largest = 0.0, 0
    cases = 0
    for seed in range(6):
        for kind in ("uni", "ipw", "mscl"):
            for moment in ("xy", "opt"):
                m, ds, theta0 = logistic_data(500, 40 + seed)
                design = "uniform" if kind == "uni" else "scorenorm"
                plan = make_plan(design, ds, 40, m, theta0 + 0.1)
                sub = draw_poisson(plan, ds, seed)
                mf = make_moment(moment, m, theta0 + 0.1)
                mu = whole_data_moment(mf, ds)
                theta = theta0 - 0.05
                asm = assemble_gmm(kind, sub, m, plan, mf, mu, theta)
                ref = naive_assembly(kind, m, plan, mf, mu.mu_hat, theta, sub.X, sub.y, sub.probs, plan.n)
                for got, want in zip((asm.g, asm.G, asm.Omega), ref):
                    worst = max(worst, float(np.max(np.abs(got - want))))
                largest = max(largest, sub.size)
                cases += 1
    mw = WeibullModel(2)
    tw = np.array([1.4, 0.1, 0.3, -0.2])
    dsw = generate_dataset(mw, tw, 500, 9)
    for moment in ("xy", "opt"):
        for kind in ("uni", "ipw"):
            plan = make_plan("uniform" if kind == "uni" else "scorenorm", dsw, 40, mw, tw)
            sub = draw_poisson(plan, dsw, 1)
            mf = make_moment(moment, mw, tw)
            mu = whole_data_moment(mf, dsw)
            asm = assemble_gmm(kind, sub, mw, plan, mf, mu, tw * 1.02)
            ref = naive_assembly(kind, mw, plan, mf, mu.mu_hat, tw * 1.02, sub.X, sub.y, sub.probs, plan.n)
            for got, want in zip((asm.g, asm.G, asm.Omega), ref):
                worst = max(worst, float(np.max(np.abs(got - want)) / max(1.0, np.max(np.abs(want)))))
            largest = max(largest, sub.size)
            cases += 1
    ok = worst <= 1e-12 and largest <= 100
    assert record_criterion("5b", ok, f"max block gap {worst:.2e} over {cases} assemblies with |S| <= {largest} "
                                      "(<= 1e-12)")


def random_weibull_point(rng, p):
    alpha = rng.uniform(0.6, 3.0)
    theta = np.r_[alpha, rng.normal(0, 0.5, p + 1)]
    check = np.r_[alpha * rng.uniform(0.7, 1.4), theta[1:] + rng.normal(0, 0.2, p + 1)]
    return theta, check, rng.uniform(-1, 1, p)


def test_criterion_5c_weibull_closed_forms_vs_quadrature():
    rng = np.random.default_rng(77)
    m = WeibullModel(3)
    worst = 0.0
    for k in range(100):
        theta, check, x = random_weibull_point(rng, 3)
        mf = OptimalScoreMoment(m, check) if k % 2 == 0 else XYMoment(3)
        worst = max(worst, float(np.max(np.abs(mf.cond_mean(m, theta, x) - quad_cond_mean(mf, m, theta, x)))))
    assert record_criterion("5c", worst <= 1e-8, f"max closed-form vs quadrature gap {worst:.2e} over 100 points "
                                                  "(<= 1e-8)")


def _rel_gap(J, fd):
    return float(np.max(np.abs(J - fd)) / max(1.0, np.max(np.abs(J))))


def test_criterion_5d_jacobians_vs_central_differences():
    rng = np.random.default_rng(5)
    gaps = {}

    def note(name, J, fd):
        gaps[name] = max(gaps.get(name, 0.0), _rel_gap(J, fd))

    lm, wm = LogisticModel(3), WeibullModel(3)
    for _ in range(20):
        theta_w, check_w, x = random_weibull_point(rng, 3)
        theta_l, check_l = theta_w[1:], check_w[1:]
        yl = np.array([float(rng.uniform() < 0.5)])
        yw = np.array([rng.weibull(theta_w[0])])
        for name, m, th, y in (("logistic score", lm, theta_l, yl), ("weibull score", wm, theta_w, yw)):
            note(name, m.score_jacobian(th, x[None, :], y)[0],
                 finite_diff_jacobian(lambda t: m.score(t, x[None, :], y)[0], th))
        for mname, m, th, ck in (("logistic", lm, theta_l, check_l), ("weibull", wm, theta_w, check_w)):
            for moment in ("xy", "opt"):
                mf = make_moment(moment, m, ck)
                note(f"{mname} {moment} conditional mean", mf.cond_mean_jac(m, th, x),
                     finite_diff_jacobian(lambda t: mf.cond_mean(m, t, x), th))
    m, ds, theta0 = logistic_data(2000, 3)
    plan = make_plan("scorenorm", ds, 200, m, theta0)
    sub = draw_poisson(plan, ds, 4)
    for i in range(10):
        xs, ys, ps = sub.X[i:i + 1], sub.y[i:i + 1], sub.probs[i:i + 1]
        th = theta0 + rng.normal(0, 0.3, 4)
        for kind in ("uni", "ipw", "mscl"):
            note(f"{kind} estimating function", eval_u_jac(kind, m, plan, th, xs, ys, ps)[0],
                 finite_diff_jacobian(lambda t: eval_u(kind, m, plan, t, xs, ys, ps)[0], th))
        note("sampled-conditional probability", mscl_pi_bar(m, plan, th, xs)[1][0],
             finite_diff_jacobian(lambda t: mscl_pi_bar(m, plan, t, xs)[0], th)[0])
    worst_name = max(gaps, key=gaps.get)
    ok = gaps[worst_name] <= 1e-5
    assert record_criterion("5d", ok, f"max relative Jacobian gap {gaps[worst_name]:.2e} ({worst_name}) "
                                      f"over {len(gaps)} Jacobian families (<= 1e-5)")


def test_criterion_6a_linear_invariance():
    m, ds, theta0 = logistic_data(20000, 12)
    plan = make_plan("scorenorm", ds, 1000, m, theta0)
    sub = draw_poisson(plan, ds, 1)
    theta = solve_plain("ipw", sub, m, plan).theta
    base = OptimalScoreMoment(m, theta0 + 0.05)
    ref = fit_mas(assemble_gmm("ipw", sub, m, plan, base, whole_data_moment(base, ds), theta))
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        A = rng.normal(size=(4, 4))
        while abs(np.linalg.det(A)) < 0.1:
            A = rng.normal(size=(4, 4))
        mixed = LinearlyMixedMoment(base, A)
        res = fit_mas(assemble_gmm("ipw", sub, m, plan, mixed, whole_data_moment(mixed, ds), theta))
        worst = max(worst, float(np.max(np.abs(res.theta_mas - ref.theta_mas))),
                    float(np.max(np.abs(res.v_hat - ref.v_hat)) / np.max(np.abs(ref.v_hat))))
    assert record_criterion("6a", worst <= 1e-8, f"max change of theta_MAS / V_h under h -> A h {worst:.2e} "
                                                  "over 20 matrices (<= 1e-8)")


def test_criterion_6b_population_loewner_order():
    m = LogisticModel(9)
    pop = monte_carlo_population(m, DESK_THETA0, OptimalScoreMoment(m, DESK_THETA0), 200000, 31,
                                 rho=0.02)
    margin = pop.eig_diff / pop.eig_se
    ok = bool(np.all(pop.eig_diff >= -3 * pop.eig_se))
    assert record_criterion("6b", ok, f"min eigenvalue of V_S - V_h {pop.eig_diff.min():.3e} "
                                      f"= {margin.min():.2f} Monte Carlo SE (>= -3 SE)")


def test_criterion_7_consistency_decay():
    m = LogisticModel(9)
    N, sizes = 10**5, (2000, 8000)
    mf = OptimalScoreMoment(m, DESK_THETA0)
    oracles = {n: monte_carlo_population(m, DESK_THETA0, mf, 10**6, 99, rho=n / N) for n in sizes}
    errs = {n: ([], []) for n in sizes}
    for seed in range(50):
        ds = generate_dataset(m, DESK_THETA0, N, 1000 + seed)
        mu = whole_data_moment(mf, ds)
        for n in sizes:
            plan = uniform_plan(n, N)
            sub = draw_poisson(plan, ds, seed)
            theta = solve_plain("uni", sub, m, plan).theta
            asm = assemble_gmm("uni", sub, m, plan, mf, mu, theta)
            pop = oracles[n]
            errs[n][0].append(np.linalg.norm(asm.G - pop.G) / np.linalg.norm(pop.G))
            errs[n][1].append(np.linalg.norm(asm.Omega - pop.Omega) / np.linalg.norm(pop.Omega))
    rg = np.median(errs[8000][0]) / np.median(errs[2000][0])
    ro = np.median(errs[8000][1]) / np.median(errs[2000][1])
    ok = rg < 0.6 and ro < 0.6
    assert record_criterion(7, ok, f"median Frobenius error ratio n=8000 / n=2000: G {rg:.3f}, Omega {ro:.3f} "
                                   "(< 0.6)")


def test_criterion_8_determinism_and_thread_invariance():
    m, ds, theta0 = logistic_data(60000, 8, p=5)
    checks = {}
    plan = make_plan("scorenorm", ds, 3000, m, theta0)
    subs = [draw_poisson(plan, ds, 17, threads=t) for t in (1, 2, 4, 1)]
    checks["draws"] = all(np.array_equal(s.indices, subs[0].indices) and np.array_equal(s.probs, subs[0].probs)
                          for s in subs)
    mf = OptimalScoreMoment(m, theta0)
    mus = [whole_data_moment(mf, ds, threads=t).mu_hat for t in (1, 3, 1)]
    checks["mu_hat"] = all(np.array_equal(v, mus[0]) for v in mus)
    fits = [fit(m, ds, 3000, 200, "mscl", "opt", seed=4, threads=t) for t in (1, 4)]
    checks["fit"] = np.array_equal(fits[0].theta_mas, fits[1].theta_mas) and np.array_equal(
        fits[0].v_hat, fits[1].v_hat)
    cfg = ScenarioConfig.from_dict(dict(model="logistic", p=5, theta0=tuple(theta0), N=20000, n=1000, seed=3,
                                        replications=8, estimators=["UNI-MAS-OPT", "IPW-MAS-XY", "MSCL-Plain"]))
    texts = [report_csv_text(run_replications(cfg, workers=w, threads=t)) for w, t in ((1, 1), (2, 2), (1, 1))]
    checks["report"] = len(set(texts)) == 1
    ok = all(checks.values())
    assert record_criterion(8, ok, "byte-identical across threads and repeats: "
                                   + ", ".join(f"{k} {'yes' if v else 'no'}" for k, v in checks.items()))


def test_criterion_9_timing():
    config = builtin_scenario("logistic-paper", full=True, n=10**4, ns=(), seed=1)
    rep = timing_report(config, runs=5)
    ratios = rep.ratios()
    fast = all(r < 0.1 for r in ratios.values())
    overhead = {}
    for kind in ("UNI", "IPW", "MSCL"):
        for moment in ("XY", "OPT"):
            overhead[f"{kind}-MAS-{moment}"] = rep.medians[f"{kind}-MAS-{moment}"] / rep.medians[f"{kind}-Plain"]
    cheap = all(v <= 2.0 for v in overhead.values())
    worst_ratio = max(ratios, key=ratios.get)
    worst_over = max(overhead, key=overhead.get)
    detail = (f"MLE median {rep.mle_median:.3f} s; slowest estimator {worst_ratio} at "
              f"{ratios[worst_ratio]:.1%} of MLE (< 10%); largest MAS/Plain {worst_over} {overhead[worst_over]:.2f}x "
              f"(<= 2x); medians " + ", ".join(f"{k} {v:.3f}" for k, v in rep.medians.items()))
    assert record_criterion(9, fast and cheap, detail)


def test_bias_shrinks_with_n(desk_report):
    """Harness invariant: |bias| at n=1e4 is at most |bias| at n=1e3 plus 3 Monte Carlo SEs."""
    report, _ = desk_report
    reps = report.config.replications
    for lab in report.config.labels:
        small, large = report.cell(lab, 1000), report.cell(lab, 10000)
        se = np.sqrt(small.msd**2 + large.msd**2) / np.sqrt(reps)
        assert np.all(np.abs(large.bias) <= np.abs(small.bias) + 3 * se), lab
