"""Simulation harness: synthetic data, replication studies, timing and oracles.

Replications are independent given their derived seeds, so they run on a
process pool and are aggregated in replication order. Reports are therefore
identical for any worker count.
"""
from __future__ import annotations

import csv
import dataclasses
import functools
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ArrayDataset
from .estimator import EstimatorKind, eval_u, eval_u_jac, whole_data_mle
from .model import make_model
from .moments import make_moment
from .numerics import NumericalError, solve_sym
from .pipeline import default_design, estimate, fit, label, pilot_stage, scan_whole_data
from .sampling import derive_seed, uniform_plan, unit_uniform

logger = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.05
DESK_NS = (1000, 2000, 5000, 10000)

LOGISTIC_ESTIMATORS = tuple((default_design(k), k, m) for k in ("uni", "ipw", "mscl")
                            for m in ("none", "xy", "opt"))
WEIBULL_ESTIMATORS = tuple((default_design(k), k, m) for k in ("uni", "ipw")
                           for m in ("none", "xy", "opt"))


class ConfigError(ValueError):
    """Invalid scenario configuration."""


class ReplicationAborted(RuntimeError):
    """More than the tolerated share of replications failed for some estimator."""


def parse_estimator(entry):
    """Accept ``(design, kind, moment)`` or a label such as ``"IPW-MAS-XY"``."""
    if isinstance(entry, str):
        parts = entry.strip().split("-")
        try:
            kind = EstimatorKind(parts[0].lower())
        except ValueError:
            raise ConfigError(f"unknown estimator {entry!r}") from None
        if parts[1:] == ["Plain"] or parts[1:] == ["plain"]:
            moment = "none"
        elif len(parts) == 3 and parts[1].upper() == "MAS" and parts[2].lower() in ("xy", "opt"):
            moment = parts[2].lower()
        else:
            raise ConfigError(f"unknown estimator {entry!r}; expected e.g. 'UNI-Plain' or 'IPW-MAS-OPT'")
        return default_design(kind), kind.value, moment
    try:
        design, kind, moment = entry
    except (TypeError, ValueError):
        raise ConfigError(f"estimator must be a label or a (design, kind, moment) triple, got {entry!r}") from None
    if design not in ("uniform", "scorenorm"):
        raise ConfigError(f"unknown design {design!r}")
    if moment in (None, "none"):
        moment = "none"
    if moment not in ("none", "xy", "opt"):
        raise ConfigError(f"unknown moment {moment!r}")
    try:
        kind = EstimatorKind(kind).value
    except ValueError:
        raise ConfigError(f"unknown estimator kind {kind!r}") from None
    return design, kind, moment


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    ``n`` is the subsample size reported in the CSV; ``ns`` lists every size
    run (it always contains ``n``) for RMSE-versus-n curves.
    """

    model: str
    p: int
    theta0: tuple
    N: int
    n: int
    n0: int = 200
    replications: int = 200
    seed: int = 0
    estimators: tuple = LOGISTIC_ESTIMATORS
    ns: tuple = ()
    fresh_dataset: bool = True

    def __post_init__(self):
        object.__setattr__(self, "theta0", tuple(float(t) for t in self.theta0))
        object.__setattr__(self, "estimators", tuple(parse_estimator(e) for e in self.estimators))
        ns = tuple(sorted(set(int(v) for v in self.ns) | {int(self.n)}))
        object.__setattr__(self, "ns", ns)
        try:
            model = make_model(self.model, self.p)
            model.check_theta(self.theta0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.n0 < 0 or any(v <= 0 for v in ns):
            raise ConfigError("subsample sizes must be positive and n0 non-negative")
        if self.n0 + max(ns) > self.N:
            raise ConfigError(f"n0 + n = {self.n0 + max(ns)} exceeds N = {self.N}")
        for design, kind, moment in self.estimators:
            if kind == "mscl" and self.model != "logistic":
                raise ConfigError("MSCL is only available for the logistic model")
            if self.n0 == 0 and (design != "uniform" or moment == "opt"):
                raise ConfigError(f"{label(design, kind, moment)} needs a pilot (n0 > 0)")

    @property
    def labels(self):
        return [label(*e) for e in self.estimators]

    def make_model(self):
        return make_model(self.model, self.p)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["theta0"] = list(self.theta0)
        out["estimators"] = [list(e) for e in self.estimators]
        out["ns"] = list(self.ns)
        return out

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def builtin_scenario(name, full=False, **overrides):
    """The two reference designs; desk scale unless ``full`` is set."""
    scale = dict(N=10**6, replications=1000) if full else dict(N=10**5, replications=200)
    if name == "logistic-paper":
        base = dict(model="logistic", p=9, theta0=(0.0,) + (0.2,) * 9, estimators=LOGISTIC_ESTIMATORS)
    elif name == "weibull-paper":
        base = dict(model="weibull", p=9, theta0=(0.5, 0.0) + (0.2,) * 9, estimators=WEIBULL_ESTIMATORS)
    else:
        raise ConfigError(f"unknown scenario {name!r}; expected 'logistic-paper' or 'weibull-paper'")
    return ScenarioConfig.from_dict({**base, **scale, "n": 2000, "n0": 200, "ns": DESK_NS, **overrides})


# -- data generation ---------------------------------------------------------

def generate_chunks(model, theta0, N, seed, chunk_size=1 << 16):
    """Yield ``(X, y)`` blocks of a synthetic dataset in record order.

    Covariate ``j`` of record ``i`` is ``2 u - 1`` with ``u`` the counter
    uniform at position ``i (p + 1) + j``; the response uses position
    ``i (p + 1) + p``. Records are therefore independent of ``chunk_size``.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    theta0 = model.check_theta(theta0)
    s = derive_seed(seed, "generate")
    width = model.p + 1
    for start in range(0, N, chunk_size):
        stop = min(start + chunk_size, N)
        pos = np.arange(start * width, stop * width, dtype=np.int64).reshape(-1, width)
        U = unit_uniform(s, pos)
        X = 2.0 * U[:, :-1] - 1.0
        yield X, model.sample_response(theta0, X, U[:, -1])


def generate_dataset(model, theta0, N, seed, chunk_size=1 << 16):
    blocks = list(generate_chunks(model, theta0, N, seed, chunk_size))
    return ArrayDataset(np.concatenate([b[0] for b in blocks]), np.concatenate([b[1] for b in blocks]))


@functools.lru_cache(maxsize=2)
def _fixed_dataset(model_name, p, theta0, N, seed):
    return generate_dataset(make_model(model_name, p), np.array(theta0), N, seed)


def replication_seed(config, r):
    return derive_seed(config.seed, "rep", r)


def replication_dataset(config, r):
    if config.fresh_dataset:
        return generate_dataset(config.make_model(), np.array(config.theta0), config.N,
                                derive_seed(replication_seed(config, r), "data"))
    return _fixed_dataset(config.model, config.p, config.theta0, config.N,
                          derive_seed(config.seed, "data"))


# -- replications ------------------------------------------------------------

def run_single_replication(config, r, threads=1):
    """All estimators and subsample sizes for replication ``r``.

    The pilot is shared by every estimator. For each size and design the plan,
    main draw and whole-data moments are shared by every estimator using that
    design, with the same seed derivation as :func:`masub.pipeline.fit`; a
    single estimator in this loop reproduces ``fit(..., seed=replication_seed)``.
    Returns ``{(n, label): (theta, std_errors, seconds) or error string}``.
    """
    model = config.make_model()
    seed = replication_seed(config, r)
    dataset = replication_dataset(config, r)
    out = {}
    try:
        stage = pilot_stage(model, dataset, config.n0, seed, threads)
    except (NumericalError, ValueError, ArithmeticError, RuntimeError) as exc:
        msg = f"pilot: {type(exc).__name__}: {exc}"
        return {(n, label(*e)): msg for n in config.ns for e in config.estimators}
    designs = sorted({e[0] for e in config.estimators})
    for n in config.ns:
        for design in designs:
            group = [e for e in config.estimators if e[0] == design]
            moments = sorted({e[2] for e in group} - {"none"})
            t0 = time.perf_counter()
            try:
                momfuns = [make_moment(m, model, stage.theta_check) for m in moments]
                plan, sub, mus = scan_whole_data(design, stage.whole, n, model, stage.theta_check,
                                                 momfuns, derive_seed(seed, "main"), threads)
            except (NumericalError, ValueError, ArithmeticError) as exc:
                for e in group:
                    out[(n, label(*e))] = f"scan: {type(exc).__name__}: {exc}"
                continue
            shared = time.perf_counter() - t0
            by_moment = dict(zip(moments, zip(momfuns, mus)))
            for _, kind, moment in group:
                momfun, mu = by_moment.get(moment, (None, None))
                t1 = time.perf_counter()
                try:
                    res = estimate(model, kind, design, moment, plan, sub, stage.theta_check,
                                   momfun, mu)
                except (NumericalError, ValueError, ArithmeticError, FloatingPointError) as exc:
                    out[(n, label(design, kind, moment))] = f"{type(exc).__name__}: {exc}"
                    continue
                out[(n, res.estimator)] = (res.theta_mas, res.std_errors,
                                           shared + time.perf_counter() - t1)
    return out


@dataclass
class CellSummary:
    """Aggregates over successful replications for one (n, estimator)."""

    bias: np.ndarray
    msd: np.ndarray
    rmse: np.ndarray
    esd: np.ndarray
    mean_time: float
    successes: int
    failures: int
    errors: list = field(default_factory=list)


@dataclass
class ReplicationReport:
    config: ScenarioConfig
    seeds: list
    cells: dict
    coordinates: list

    def cell(self, estimator, n=None):
        return self.cells[(self.config.n if n is None else n, estimator)]

    def rows(self, n=None):
        n = self.config.n if n is None else n
        for lab in self.config.labels:
            c = self.cells[(n, lab)]
            for j, name in enumerate(self.coordinates):
                yield lab, name, float(c.bias[j]), float(c.msd[j]), float(c.rmse[j]), float(c.esd[j])

    def total_rmse(self, estimator, n):
        """Root of the summed per-coordinate mean squared errors."""
        return float(np.sqrt(np.sum(self.cells[(n, estimator)].rmse ** 2)))


def summarise(estimates, std_errors, theta0):
    """Bias, MSD (population standard deviation), RMSE and mean ESD per coordinate."""
    est = np.asarray(estimates, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    err = est - theta0
    bias = err.mean(axis=0)
    msd = est.std(axis=0, ddof=0)
    rmse = np.sqrt(np.mean(err**2, axis=0))
    esd = np.asarray(std_errors, dtype=float).mean(axis=0)
    return bias, msd, rmse, esd


def run_replications(config, workers=1, threads=1):
    """Run ``config.replications`` replications and aggregate them."""
    reps = range(config.replications)
    if workers > 1 and config.replications > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_single_replication, [config] * len(reps), reps,
                                    [threads] * len(reps)))
    else:
        results = [run_single_replication(config, r, threads) for r in reps]

    cells = {}
    for n in config.ns:
        for lab in config.labels:
            thetas, ses, times, errors = [], [], [], []
            for r, res in enumerate(results):
                item = res[(n, lab)]
                if isinstance(item, str):
                    errors.append(f"replication {r}: {item}")
                    continue
                thetas.append(item[0])
                ses.append(item[1])
                times.append(item[2])
            if len(errors) > MAX_FAILURE_FRACTION * config.replications:
                raise ReplicationAborted(f"{lab} at n={n} failed in {len(errors)} of "
                                         f"{config.replications} replications; first: {errors[0]}")
            for msg in errors:
                logger.warning("%s at n=%d: %s", lab, n, msg)
            bias, msd, rmse, esd = summarise(thetas, ses, config.theta0)
            cells[(n, lab)] = CellSummary(bias, msd, rmse, esd, float(np.mean(times)),
                                          len(thetas), len(errors), errors)
    return ReplicationReport(config, [replication_seed(config, r) for r in reps], cells,
                             config.make_model().coordinate_names())


# -- reports -----------------------------------------------------------------

REPORT_COLUMNS = ("estimator", "coordinate", "bias", "msd", "rmse", "esd")


def report_csv_text(report, n=None):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for lab, name, *values in report.rows(n):
        writer.writerow([lab, name] + [repr(v) for v in values])
    return buf.getvalue()


def write_report_csv(report, path, n=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report_csv_text(report, n))


def write_rmse_svg(report, path):
    """Line chart of total RMSE against n, one line per estimator."""
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "masub"
    ns = list(report.config.ns)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for lab in report.config.labels:
        ax.plot(ns, [report.total_rmse(lab, n) for n in ns], marker="o", label=lab)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("expected subsample size n")
    ax.set_ylabel("RMSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- timing ------------------------------------------------------------------

@dataclass
class TimingReport:
    N: int
    n: int
    runs: int
    medians: dict
    mle_median: float = None

    def ratios(self):
        if self.mle_median is None:
            return {}
        return {k: v / self.mle_median for k, v in self.medians.items()}


def _median_time(fn, runs):
    times = []
    for r in range(runs):
        t0 = time.perf_counter()
        fn(r)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def timing_report(config, runs=5, include_mle=True, threads=1, dataset=None):
    """Median wall time of each full estimator pipeline over ``runs`` seeds.

    Each timed run starts from the raw dataset and includes the pilot, the
    whole-data passes and the solves. The baseline is the whole-data Newton
    maximum likelihood fit from the default start.
    """
    if runs < 5:
        raise ValueError("timing medians need at least 5 runs")
    model = config.make_model()
    if dataset is None:
        dataset = generate_dataset(model, np.array(config.theta0), config.N, derive_seed(config.seed, "data"))
    medians = {}
    for design, kind, moment in config.estimators:
        medians[label(design, kind, moment)] = _median_time(
            lambda r: fit(model, dataset, config.n, config.n0, kind, moment, design,
                          seed=derive_seed(config.seed, "timing", r), threads=threads), runs)
    mle = None
    if include_mle:
        mle = _median_time(lambda r: whole_data_mle(model, dataset, threads=threads), runs)
    return TimingReport(config.N, config.n, runs, medians, mle)


# -- population oracles ------------------------------------------------------

@dataclass
class PopulationMatrices:
    G: np.ndarray
    Omega: np.ndarray
    V_h: np.ndarray
    V_S: np.ndarray
    eig_diff: np.ndarray
    eig_se: np.ndarray


def _population_sums(model, kind, plan, momfun, theta0, X, y, mu):
    """Per-record expectations over the inclusion indicator, summed over rows.

    Each subsample sum ``sum_S f_i`` has expectation ``sum_i p_i f_i`` over
    the Poisson draw, so ``delta_i`` is replaced by ``p_i`` throughout.
    """
    d, q = model.d, momfun.q
    p = plan.prob(X, y)
    rho = plan.rho
    U = eval_u(kind, model, plan, theta0, X, y, p)
    Ud = eval_u_jac(kind, model, plan, theta0, X, y, p)
    w = rho / p
    V = w[:, None] * (momfun.cond_mean(model, theta0, X) - mu)
    Vd = w[:, None, None] * momfun.cond_mean_jac(model, theta0, X)
    H = momfun.eval_h(X, y) - mu
    G = np.zeros((d + q, d))
    G[:d] = np.einsum("i,ijk->jk", p, Ud)
    G[d:] = np.einsum("i,ijk->jk", p, Vd)
    Om = np.zeros((d + q, d + q))
    Om[:d, :d] = (U * p[:, None]).T @ U
    Om[:d, d:] = (U * p[:, None]).T @ (V - rho * H)
    Om[d:, :d] = Om[:d, d:].T
    PV = V * p[:, None]
    Om[d:, d:] = PV.T @ V - rho * (PV.T @ H + H.T @ PV) + rho**2 * H.T @ H
    return G, Om


def _variances(G, Omega, d):
    Vh = np.linalg.inv(solve_sym(Omega, G, require_pd=True, name="Omega").solution.T @ G)
    G11 = G[:d]
    Ginv = np.linalg.inv(G11)
    VS = Ginv @ Omega[:d, :d] @ Ginv.T
    return 0.5 * (Vh + Vh.T), 0.5 * (VS + VS.T)


def monte_carlo_population(model, theta0, momfun, M, seed, kind="uni", plan=None, rho=0.02,
                           batches=20, chunk_size=10000):
    """Monte Carlo population ``G`` and ``Omega`` at ``theta0`` under a fixed plan.

    ``M`` fresh records stand in for the population; the plan defaults to a
    uniform plan with rate ``rho``. The moment mean is the Monte Carlo mean of
    ``h``. Standard errors of the eigenvalues of ``V_S - V_h`` come from
    ``batches`` equal batch means.
    """
    if M < 10**4:
        raise ValueError("population oracles need M >= 10^4 draws")
    theta0 = model.check_theta(theta0)
    kind = EstimatorKind(kind)
    if plan is None:
        plan = uniform_plan(rho * M, M)
    data = generate_dataset(model, theta0, M, seed)
    X, y = data.X, data.y
    mu = momfun.h_sum(X, y) / M
    d, q = model.d, momfun.q
    edges = np.linspace(0, M, batches + 1).astype(int)
    Gs, Os, weights = [], [], []
    for b in range(batches):
        Gb = np.zeros((d + q, d))
        Ob = np.zeros((d + q, d + q))
        for start in range(edges[b], edges[b + 1], chunk_size):
            stop = min(start + chunk_size, edges[b + 1])
            g, o = _population_sums(model, kind, plan, momfun, theta0, X[start:stop], y[start:stop], mu)
            Gb += g
            Ob += o
        size = edges[b + 1] - edges[b]
        Gs.append(Gb / (plan.rho * size))
        Os.append(Ob / (plan.rho * size))
        weights.append(size)
    weights = np.array(weights, dtype=float) / M
    G = sum(w * g for w, g in zip(weights, Gs))
    Omega = sum(w * o for w, o in zip(weights, Os))
    Omega = 0.5 * (Omega + Omega.T)
    Vh, VS = _variances(G, Omega, d)
    eig = np.linalg.eigvalsh(VS - Vh)
    batch_eigs = []
    for g, o in zip(Gs, Os):
        bh, bs = _variances(g, 0.5 * (o + o.T), d)
        batch_eigs.append(np.linalg.eigvalsh(bs - bh))
    se = np.std(batch_eigs, axis=0, ddof=1) / np.sqrt(batches)
    return PopulationMatrices(G, Omega, Vh, VS, eig, se)
