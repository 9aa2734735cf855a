"""
Monte Carlo experiments on posterior contraction.

For each noise level ``tau`` a scenario draws ``R`` data sets, samples
``m`` posterior draws for each, measures the Prokhorov distance of every
posterior to the point mass at ``x_star`` and aggregates the ``R``
distances into an empirical Ky Fan distance. Slopes of log distance
against ``log(tau log(1/tau))`` are compared with predicted exponents.

Every random number comes from a stream keyed by (master seed, tau index,
replicate index, purpose), so rows do not depend on the degree of
parallelism.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from glip import bounds, config as cfgmod, metrics, rng
from glip.errors import GlipError
from glip.forward import ForwardOperator, LinkMap, build_grid
from glip.infer import Domain, GlipProblem, SamplerSettings, map_estimate, sample_posterior_batch
from glip.noise import NoiseFamily, NoiseKind, sample
from glip.prior import PriorModel, solve_x_star

log = logging.getLogger(__name__)

COLUMNS = (
    "scenario", "tau", "gamma", "nu", "n", "p", "replicates", "inner_draws",
    "kf_data_empirical", "kf_data_bound", "kf_posterior_empirical", "bound_overall",
    "bound_bias_random", "bound_bias_prior", "bound_variance", "x_star_offset",
    "failed", "wall_ms", "seed",
)

#: replicates per work unit; fixed so results never depend on scheduling
CHUNK = 25
MAX_FAILED_FRACTION = 0.1
REGRESSOR = "log(tau*log(1/tau))"

_WELL_POSED_A = np.array([
    [1.0, 0.2, 0.0, 0.0],
    [0.2, 1.0, 0.2, 0.0],
    [0.0, 0.2, 1.0, 0.2],
    [0.0, 0.0, 0.2, 1.0],
])
_WELL_POSED_X = np.array([1.0, -0.5, 0.25, 0.75])
_POISSON_A = np.array([
    [1.2, 0.4, 0.2, 0.2],
    [0.2, 1.2, 0.4, 0.2],
    [0.2, 0.2, 1.2, 0.4],
    [0.4, 0.2, 0.2, 1.2],
])
_POISSON_X = np.array([0.5, 0.4, 0.6, 0.5])
_RANK2_A = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
_RANK2_X = np.array([1.5, 0.5, 1.0, 2.0])
_BOUNDARY_A = np.array([[1.0, 0.5], [0.3, 1.0]])


def _gamma_for(cfg: dict, tau: float) -> float:
    rule = cfg["gamma_rule"]
    if rule["kind"] == "constant":
        return float(rule["gamma"])
    if rule["kind"] == "ill-posed":
        return math.sqrt(bounds.ill_posed_gamma2(tau))
    return math.sqrt(tau / bounds.spectral_nu(spectral_spec(cfg, tau), tau))


def spectral_spec(cfg: dict, tau: float, nu: float | None = None) -> bounds.SpectralSpec:
    par = cfg["params"]
    make = bounds.SpectralSpec.poisson if cfg["scenario"] == "SpectralPoisson" else bounds.SpectralSpec.gaussian
    return make(par["alpha"], par["beta"], par["kappa"], p=int(par["p"]), tau=tau, nu=tau if nu is None else nu)


def build_problem(cfg: dict, tau: float) -> GlipProblem:
    """The model of a scenario at noise level ``tau``."""
    name = cfg["scenario"]
    par = cfg["params"]
    gamma = _gamma_for(cfg, tau)
    if name == "WellPosedGaussian":
        return GlipProblem(NoiseFamily.gaussian(1.0, 4), ForwardOperator.dense(_WELL_POSED_A),
                           PriorModel.gaussian(np.eye(4), gamma=gamma), _WELL_POSED_X, tau)
    if name == "IllPosedGaussian":
        return GlipProblem(NoiseFamily.gaussian(1.0, 2), ForwardOperator.dense(_RANK2_A),
                           PriorModel.gaussian(np.eye(4), gamma=gamma), _RANK2_X, tau)
    if name == "WellPosedPoisson":
        return GlipProblem(NoiseFamily.scaled_poisson(4), ForwardOperator.dense(_POISSON_A),
                           PriorModel.gaussian(np.eye(4), gamma=gamma), _POISSON_X, tau, domain=Domain.NONNEG)
    if name == "IllPosedPoisson":
        return GlipProblem(NoiseFamily.scaled_poisson(2), ForwardOperator.dense(_RANK2_A),
                           PriorModel.gaussian(np.eye(4), gamma=gamma), _RANK2_X, tau, domain=Domain.NONNEG)
    if name == "GridVolterra":
        n, p = int(par["n"]), int(par["p"])
        u = np.arange(1, p + 1) / p
        return GlipProblem(NoiseFamily.gaussian(par["sigma2"], n), build_grid("volterra", n, p),
                           PriorModel.gaussian(np.eye(p), gamma=gamma), np.sin(np.pi * u), tau)
    if name.startswith("Spectral"):
        p = int(par["p"])
        j = np.arange(1, p + 1, dtype=float)
        prior = PriorModel.gaussian(np.diag(j ** (2 * par["kappa"] + 1)), gamma=gamma)
        x_true = j ** (-par["beta"] - 0.5)
        op = ForwardOperator.spectral(par["alpha"], p)
        if name == "SpectralPoisson":
            return GlipProblem(NoiseFamily.scaled_poisson(p), op, prior, x_true, tau, domain=Domain.NONNEG)
        return GlipProblem(NoiseFamily.gaussian(par.get("sigma2", 1.0), p), op, prior, x_true, tau)
    if name == "BoundaryPoisson":
        return GlipProblem(NoiseFamily.scaled_poisson(2), ForwardOperator.dense(_BOUNDARY_A),
                           PriorModel.gaussian(np.eye(2), gamma=gamma), np.zeros(2), tau, domain=Domain.NONNEG)
    if name == "BoundaryExponential":
        p = int(par["p"])
        return GlipProblem(NoiseFamily.shifted_exponential(par["rate"], p), ForwardOperator.dense(np.eye(p)),
                           PriorModel.gaussian(np.eye(p), gamma=gamma), np.zeros(p), tau, domain=Domain.NONNEG)
    if name == "Custom":
        return _custom_problem(cfg["model"], tau, gamma)
    raise cfgmod.ConfigError(f"unknown scenario {name!r}")


def _custom_problem(model: dict, tau: float, gamma: float) -> GlipProblem:
    try:
        op = ForwardOperator.from_dict(model["operator"])
        x_true = np.asarray(model["x_true"], dtype=float)
        noise_cfg = model["noise"]
        noise = NoiseFamily(NoiseKind(noise_cfg["kind"]), np.broadcast_to(np.asarray(noise_cfg["shape"], dtype=float), (op.n,)))
        prior = PriorModel.from_config(model["prior"], op.p).with_gamma(gamma)
        link = LinkMap.from_dict({"kind": model["link"]})
        return GlipProblem(noise, op, prior, x_true, tau, link=link, domain=Domain(model["domain"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise cfgmod.ConfigError(f"invalid model: {exc}") from None


def metric_scales(cfg: dict, problem: GlipProblem) -> tuple[float, float]:
    """Normalizing factors for parameter and data distances."""
    if cfg["scenario"] == "GridVolterra":
        return math.sqrt(problem.p), math.sqrt(problem.n)
    return 1.0, 1.0


def predicted_class(cfg: dict):
    name = cfg["scenario"]
    if name.startswith("Spectral"):
        return spectral_spec(cfg, 1e-3)
    if name.startswith("IllPosed"):
        return bounds.ProblemClass.ILL_POSED_INTERIOR
    if name.startswith("Boundary"):
        return bounds.ProblemClass.BOUNDARY_WELL_POSED
    return bounds.ProblemClass.WELL_POSED_INTERIOR


# -- per-replicate work ---------------------------------------------------------------


@dataclass
class ChunkResult:
    tau_index: int
    start: int
    posterior_eps: list
    data_dist: list
    failures: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    map_at_star: list = field(default_factory=list)


def run_chunk(cfg: dict, tau_index: int, start: int, stop: int) -> ChunkResult:
    """Replicates ``start..stop-1`` at one grid point."""
    tau = cfg["taus"][tau_index]
    seed = cfg["seed"]
    problem = build_problem(cfg, tau)
    star = solve_x_star(problem)
    x_scale, y_scale = metric_scales(cfg, problem)
    y_exact = problem.y_exact
    settings = SamplerSettings(burn_in=cfg["sampler"]["burn_in"], thin=cfg["sampler"]["thin"])
    out = ChunkResult(tau_index, start, [math.nan] * (stop - start), [math.nan] * (stop - start))
    ys, idx, inits = [], [], []
    for k, r in enumerate(range(start, stop)):
        try:
            y = sample(problem.noise, y_exact, tau, rng.stream(seed, tau_index, r, rng.DATA))
            out.data_dist[k] = float(np.linalg.norm(y - y_exact) / y_scale)
            x_map = None if problem.conjugate else map_estimate(problem, y, star.x_star)
            ys.append(y)
            idx.append(k)
            inits.append(x_map)
            out.map_at_star.append(bool(x_map is not None and np.all(x_map == star.x_star)))
        except GlipError as exc:
            out.failures.append((r, f"{type(exc).__name__}: {exc}"))
    if not ys:
        return out
    streams = [rng.stream(seed, tau_index, start + k, rng.POSTERIOR) for k in idx]
    x_inits = None if problem.conjugate else inits
    try:
        results = sample_posterior_batch(problem, ys, cfg["inner_draws"], streams, settings, x_inits)
    except GlipError as exc:
        out.failures.extend((start + k, f"{type(exc).__name__}: {exc}") for k in idx)
        return out
    for k, res in zip(idx, results):
        est = metrics.prokhorov_to_point(res.draws, star.x_star, x_scale, n_boot=0)
        out.posterior_eps[k] = est.epsilon
        out.acceptance.append(res.acceptance_rate)
    return out


# -- bounds per row ----------------------------------------------------------------------------


def data_kf_bound(problem: GlipProblem, scale: float = 1.0) -> float:
    """Analytic Ky Fan bound on the data, or ``nan`` when none applies."""
    tau = problem.tau
    noise = problem.noise
    y = problem.y_exact
    try:
        if noise.kind is NoiseKind.GAUSSIAN:
            return metrics.kyfan_bound_gaussian(tau * float(noise.shape.sum()) / scale**2)
        if noise.kind is NoiseKind.SCALED_POISSON:
            mu = y[y > 0]
            return metrics.kyfan_bound_poisson(mu, tau) if mu.size else 0.0
        if noise.kind is NoiseKind.SHIFTED_EXPONENTIAL and noise.n == 1:
            return metrics.kyfan_bound_exponential(float(noise.shape[0]), tau)
    except GlipError:
        return math.nan
    return math.nan


def row_bound(cfg: dict, problem: GlipProblem, rho: float, stream, delta: float | None = None) -> bounds.BoundReport:
    """The theoretical bound that matches the scenario.

    ``delta`` defaults to the configured localization schedule.
    """
    name = cfg["scenario"]
    tau = problem.tau
    if delta is None:
        delta = bounds.delta_schedule(tau, cfg["delta"]["alpha"], cfg["delta"]["a"])
    tail = cfg["evaluate_tail"]
    if name.startswith("Spectral"):
        spec = spectral_spec(cfg, tau, problem.nu)
        t1, t2, t3 = bounds.spectral_terms(spec)
        regime, exponent = bounds.spectral_regime(spec)
        return bounds.BoundReport("spectral", 0.0, t2, t3, 0.0, bounds.NOT_EVALUATED, t1 + t2 + t3, True, "",
                                  {"truncation": t1, "regime": regime.value, "exponent": exponent, "m": spec.m})
    if name == "BoundaryPoisson":
        return bounds.boundary_bound(problem, rho, delta)
    if name == "BoundaryExponential":
        return bounds.BoundReport("data-only", 0.0, 0.0, 0.0, 2 * rho, bounds.NOT_EVALUATED, 2 * rho, True,
                                  "the boundary bound does not cover support-shift noise; data term only")
    if name == "Custom" and not solve_x_star(problem).interior:
        return bounds.boundary_bound(problem, rho, delta)
    if name == "GridVolterra":
        return bounds.grid_bound(problem, problem.n, problem.p, rho, delta / math.sqrt(problem.p), tail, stream=stream)
    return bounds.interior_bound(problem, rho, delta, tail, stream=stream)


def _invalid_report(reason: str) -> bounds.BoundReport:
    nan = math.nan
    return bounds.BoundReport("unavailable", nan, nan, nan, nan, bounds.NOT_EVALUATED, nan, False, reason)


# -- scenario driver -----------------------------------------------------------------------------


@dataclass
class ResultTable:
    config: dict
    rows: list
    reports: list
    details: list

    @property
    def failed_fraction(self) -> float:
        return sum(r["failed"] for r in self.rows) / max(len(self.rows), 1)

    @property
    def scenario_failed(self) -> bool:
        return self.failed_fraction > MAX_FAILED_FRACTION

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in self.rows:
            writer.writerow([format_value(row[c]) for c in COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "rows": [
                {"tau": row["tau"], "bound": rep.to_dict(), "details": bounds._jsonable(det)}
                for row, rep, det in zip(self.rows, self.reports, self.details)
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def write(self, csv_path) -> tuple[str, str]:
        from pathlib import Path

        csv_path = Path(csv_path)
        json_path = csv_path.with_suffix(".json")
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return str(csv_path), str(json_path)


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _tasks(cfg):
    reps = cfg["replicates"]
    return [(i, s, min(s + CHUNK, reps)) for i in range(len(cfg["taus"])) for s in range(0, reps, CHUNK)]


def run_scenario(config: dict, parallel: int = 1, timing: bool = False) -> ResultTable:
    """Run every grid point of a scenario and assemble the result table.

    ``wall_ms`` is 0 unless ``timing`` is set, so that tables are
    byte-identical across runs.
    """
    cfg = cfgmod.normalize(config)
    tasks = _tasks(cfg)
    t0 = time.perf_counter()
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(run_chunk, cfg, *t) for t in tasks]
            chunks = [f.result() for f in futures]
    else:
        chunks = [run_chunk(cfg, *t) for t in tasks]
    elapsed = (time.perf_counter() - t0) * 1000 / max(len(cfg["taus"]), 1)
    rows, reports, details = [], [], []
    for i, tau in enumerate(cfg["taus"]):
        mine = sorted((c for c in chunks if c.tau_index == i), key=lambda c: c.start)
        row, rep, det = _assemble_row(cfg, i, tau, mine)
        row["wall_ms"] = round(elapsed, 3) if timing else 0
        rows.append(row)
        reports.append(rep)
        details.append(det)
    table = ResultTable(cfg, rows, reports, details)
    log.info("%s: %d rows, %.0f%% failed", cfg["scenario"], len(rows), 100 * table.failed_fraction)
    return table


def _assemble_row(cfg, i, tau, chunks):
    seed = cfg["seed"]
    problem = build_problem(cfg, tau)
    star = solve_x_star(problem)
    x_scale, y_scale = metric_scales(cfg, problem)
    eps = np.array([e for c in chunks for e in c.posterior_eps])
    dist = np.array([d for c in chunks for d in c.data_dist])
    failures = [f for c in chunks for f in c.failures]
    acceptance = [a for c in chunks for a in c.acceptance]
    ok = np.isfinite(eps)
    post = metrics.kyfan_empirical(eps[ok], stream=rng.stream(seed, i, 0, rng.BOOTSTRAP)) if ok.any() else None
    data_ok = dist[np.isfinite(dist)]
    data_kf = metrics.kyfan_empirical(data_ok, n_boot=0).epsilon if data_ok.size else math.nan
    kf_bound = data_kf_bound(problem, y_scale)
    rho = kf_bound if math.isfinite(kf_bound) else data_kf
    try:
        report = row_bound(cfg, problem, rho, rng.stream(seed, i, 0, rng.TAIL))
    except GlipError as exc:
        report = _invalid_report(f"{type(exc).__name__}: {exc}")
    offset = float(np.linalg.norm((np.eye(problem.p) - problem.operator.projector) @ (problem.x_true - star.x_star)))
    row = {
        "scenario": cfg["scenario"],
        "tau": tau,
        "gamma": problem.gamma,
        "nu": problem.nu,
        "n": problem.n,
        "p": problem.p,
        "replicates": cfg["replicates"],
        "inner_draws": cfg["inner_draws"],
        "kf_data_empirical": data_kf,
        "kf_data_bound": kf_bound,
        "kf_posterior_empirical": post.epsilon if post else math.nan,
        "bound_overall": report.overall,
        "bound_bias_random": report.random_bias_coeff,
        "bound_bias_prior": report.prior_bias,
        "bound_variance": report.variance_term,
        "x_star_offset": offset,
        "failed": int(bool(failures) or post is None),
        "wall_ms": 0,
        "seed": seed,
    }
    detail = {
        "posterior_kf_stderr": post.standard_error_hint if post else math.nan,
        "rho_source": "analytic" if math.isfinite(kf_bound) else "empirical",
        "failures": failures,
        "acceptance_min": min(acceptance) if acceptance else math.nan,
        "acceptance_max": max(acceptance) if acceptance else math.nan,
        "map_at_x_star_all": all(m for c in chunks for m in c.map_at_star) if not problem.conjugate else None,
        "data_all_exact": bool(data_ok.size and np.all(data_ok == 0)),
    }
    return row, report, detail


# -- slopes -------------------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    slope_stderr: float
    r_squared: float
    n_points: int
    regressor: str = REGRESSOR

    def to_dict(self) -> dict:
        return asdict(self)


def regressor(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    return np.log(tau * np.log(1 / tau))


def fit_slope(rows, column: str = "kf_posterior_empirical") -> RateFit:
    """Least-squares slope of ``log(column)`` against ``log(tau log(1/tau))``."""
    rows = list(rows)
    if len(rows) < 4:
        raise ValueError(f"need at least 4 grid points, got {len(rows)}")
    tau = np.array([float(r["tau"]) for r in rows])
    kf = np.array([float(r[column]) for r in rows])
    if np.any(~np.isfinite(kf)) or np.any(kf <= 0):
        raise ValueError(
            "non-positive or missing Ky Fan distances cannot be fitted on a log scale; "
            "exact-data boundary runs need the boundary-specific analysis"
        )
    if np.any(tau <= 0) or np.any(tau >= 1):
        raise ValueError("tau values must lie in (0, 1)")
    res = stats.linregress(regressor(tau), np.log(kf))
    return RateFit(float(res.slope), float(res.intercept), float(res.stderr), float(res.rvalue**2), len(rows))


@dataclass(frozen=True)
class Verdict:
    passed: bool
    slope: float
    predicted: float
    tolerance: float

    def to_dict(self) -> dict:
        return asdict(self)


def compare(fit: RateFit, predicted: float, tolerance: float) -> Verdict:
    return Verdict(bool(abs(fit.slope - predicted) <= tolerance), fit.slope, float(predicted), float(tolerance))


def read_rows(text: str) -> list[dict]:
    """Parse a result CSV; raises ``ValueError`` when malformed."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != COLUMNS:
        raise ValueError("CSV header does not match the result schema")
    rows = list(reader)
    for row in rows:
        if None in row or any(v is None for v in row.values()):
            raise ValueError("ragged CSV row")
        for key in ("tau", "kf_posterior_empirical"):
            float(row[key])
    return rows
