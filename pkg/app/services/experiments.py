"""
Experiment drivers: the beta-schedule study, the certified run and the Monte Carlo
campaigns on the polynomial inequalities behind the certified budget.

Every run writes into its output directory and keeps a manifest.json of the files it has
committed; on a disk failure the manifest is marked partial and ExperimentIOError is raised.
"""

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.core.config import get_settings
from app.core.errors import BudgetInfeasibleError, ExperimentIOError, InvalidArgumentError
from app.core.seeding import StreamRole, assert_disjoint_streams, make_rng
from app.models.experiment import (
    ExperimentConfig,
    GreedyTrace,
    LemmaReport,
    LemmaTrialResult,
    NikolskiiResult,
    SuperlevelResult,
)
from app.services.fem import HighFidelitySolver, assemble, build_mesh
from app.services.greedy import ReducedBasis, ValidationSet, run_certified, run_scheduled
from app.services.params import SamplingMeasure, build_checkerboard_model, sample_set
from app.services.persistence import save_basis
from app.services.polytools import (
    CertifiedBudget,
    Polynomial,
    PolynomialBasis,
    complexity_exponents,
    compute_N,
    nikolskii_check,
    random_downward_closed,
    superlevel_measure,
)

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["beta", "realization", "n", "N_n", "sigma_hat", "sigma_val"]
FLOAT_FORMAT = "%.17g"

# cap on points drawn at once by the lemma trials
_LEMMA_BLOCK = 200_000


@dataclass
class ErrorCurves:
    """Raw per-(beta, realization, n) rows and their mean/min/max over realizations."""

    raw: pd.DataFrame

    @property
    def betas(self) -> List[float]:
        return sorted(float(b) for b in self.raw["beta"].unique())

    @property
    def summary(self) -> pd.DataFrame:
        grouped = self.raw.groupby(["beta", "n"], sort=True)
        out = grouped.agg(
            N_n=("N_n", "first"),
            mean=("sigma_val", "mean"),
            min=("sigma_val", "min"),
            max=("sigma_val", "max"),
            realizations=("realization", "nunique"),
        )
        return out.reset_index()

    def mean_curve(self, beta: float) -> pd.Series:
        s = self.summary
        sel = s[np.isclose(s["beta"], beta)]
        return pd.Series(sel["mean"].to_numpy(), index=sel["n"].to_numpy(), name=f"beta={beta:g}")

    def to_csv(self, path: Union[str, Path]) -> Path:
        return write_csv(self.raw[CURVE_COLUMNS], path)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "ErrorCurves":
        raw = pd.read_csv(
            path,
            dtype={"beta": float, "realization": int, "n": int, "N_n": int},
            float_precision="round_trip",
        )
        missing = set(CURVE_COLUMNS) - set(raw.columns)
        if missing:
            raise InvalidArgumentError(f"{path} lacks columns {sorted(missing)}")
        return cls(raw)


def write_csv(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """17 significant digits, '\\n' row terminator, committed by atomic rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    df.to_csv(tmp, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    os.replace(tmp, path)
    return path


def _write_json(payload: Union[str, Dict[str, Any]], path: Path) -> Path:
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def fit_decay_rate(curves: ErrorCurves, beta: float, n_min: int = 5) -> float:
    """Least-squares rate s in mean sigma_val ~ C n^-s over n >= n_min; nan with < 2 usable points."""
    curve = curves.mean_curve(beta)
    curve = curve[(curve.index >= n_min) & (curve > 0) & np.isfinite(curve)]
    if len(curve) < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(curve.index.to_numpy(dtype=float)), np.log(curve.to_numpy()), 1)
    return float(-slope)


def _beta_tag(beta: float) -> str:
    return f"beta{beta:g}"


class _Manifest:
    """Files committed by a run, flushed to manifest.json."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / "manifest.json"
        self.files: List[str] = []

    def add(self, path: Path) -> None:
        self.files.append(path.name)

    def commit(self, status: str, error: Optional[str] = None) -> None:
        payload = {"status": status, "files": sorted(self.files)}
        if error is not None:
            payload["error"] = error
        try:
            _write_json(payload, self.path)
        except OSError:
            logger.error("could not write manifest %s", self.path)

    def fail(self, exc: OSError) -> ExperimentIOError:
        self.commit("partial", str(exc))
        return ExperimentIOError(f"disk failure after {len(self.files)} files: {exc}", str(self.path))


def build_solver(config: ExperimentConfig, k: Optional[int] = None, t: Optional[float] = None) -> HighFidelitySolver:
    k = config.k if k is None else k
    t = config.t if t is None else t
    model = build_checkerboard_model(k, t, config.delta)
    mesh = build_mesh(config.grid_n, k)
    op = assemble(mesh, model)
    return HighFidelitySolver(op, direct_max_unknowns=config.direct_max_unknowns, cg_rtol=config.cg_rtol)


def build_validation_set(config: ExperimentConfig, solver: HighFidelitySolver, t: Optional[float] = None) -> ValidationSet:
    """Held-out set for one (d, t) pair, from its own reserved stream."""
    t = config.t if t is None else t
    d = solver.operator.d
    rng = make_rng(config.master_seed, StreamRole.VALIDATION, d, t)
    points = sample_set(config.measure, d, config.validation_size, rng)
    return ValidationSet(points, solver, cache_mb=get_settings().validation_cache_mb)


def estimate_solution_bound(solver: HighFidelitySolver, measure: SamplingMeasure,
                            samples: int, rng: np.random.Generator) -> float:
    """max ||u_h(y)||_V over random y, a sample estimate of the manifold radius."""
    points = sample_set(measure, solver.operator.d, samples, rng)
    return max(solver.solve(y).vnorm for y in points)


def run_experiment(
    config: ExperimentConfig,
    k: Optional[int] = None,
    t: Optional[float] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> ErrorCurves:
    """
    The beta-schedule study for one (k, t): R realizations per beta, all measured on one
    shared validation set. Writes curves.csv, curves_summary.csv, rates.json and one
    trace (and basis) per job.

    Raises:
        ExperimentIOError: a file could not be written; manifest.json lists what was
    """
    k = config.k if k is None else k
    t = config.t if t is None else t
    out = Path(config.output_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = get_settings()
    d = k * k

    jobs = [(beta, r) for beta in config.beta_list for r in range(config.realizations)]
    assert_disjoint_streams(
        [(StreamRole.VALIDATION, (d, t))] + [(StreamRole.TRAINING, (beta, r)) for beta, r in jobs]
    )
    started = time.perf_counter()
    solver = build_solver(config, k, t)
    validation = build_validation_set(config, solver, t)
    logger.info("study k=%d t=%g: %d jobs, validation size %d", k, t, len(jobs), len(validation))
    manifest = _Manifest(out)
    snapshot = {**config.model_dump(mode="json"), "k": k, "t": t}

    def job(key: Tuple[float, int]) -> GreedyTrace:
        beta, r = key
        rng = make_rng(config.master_seed, StreamRole.TRAINING, beta, r)
        rb, trace = run_scheduled(
            config.n_max, beta, config.measure, solver, rng,
            validation=validation,
            pool_mode=config.pool_mode,
            pool_size=config.pool_size,
            selector=config.selector,
            breakdown_rtol=settings.breakdown_rtol,
            cache_mb=settings.validation_cache_mb,
            master_seed=config.master_seed,
            config={**snapshot, "beta": beta, "realization": r},
        )
        tag = f"{_beta_tag(beta)}_r{r}"
        manifest.add(_write_json(trace.model_dump_json(indent=2), out / f"trace_{tag}.json"))
        if config.save_bases:
            manifest.add(save_basis(_tagged(rb, beta, r, k, t), out / f"basis_{tag}.rb"))
        logger.info("beta=%g realization %d done: sigma_val(n_max)=%.4e", beta, r, trace.steps[-1].sigma_val)
        return trace

    try:
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                traces = list(pool.map(job, jobs))
        else:
            traces = [job(key) for key in jobs]

        rows = [
            (beta, r, s.n, s.N_n, s.sigma_hat, s.sigma_val)
            for (beta, r), trace in zip(jobs, traces)
            for s in trace.steps
        ]
        curves = ErrorCurves(pd.DataFrame(rows, columns=CURVE_COLUMNS))
        manifest.add(curves.to_csv(out / "curves.csv"))
        manifest.add(write_csv(curves.summary, out / "curves_summary.csv"))
        rates = {_beta_tag(b): fit_decay_rate(curves, b) for b in curves.betas}
        manifest.add(_write_json({"k": k, "t": t, "rates": rates}, out / "rates.json"))
    except OSError as e:
        raise manifest.fail(e) from e
    finally:
        validation.close()
    manifest.commit("complete")
    logger.info("study k=%d t=%g finished in %.1fs, results in %s", k, t, time.perf_counter() - started, out)
    return curves


def _tagged(rb: ReducedBasis, beta: float, r: int, k: int, t: float) -> ReducedBasis:
    rb.metadata.update({"beta": beta, "realization": r, "k": k, "t": t})
    return rb


def run_study(config: ExperimentConfig, ks: Sequence[int] = (), ts: Sequence[float] = ()) -> Dict[Tuple[int, float], ErrorCurves]:
    """run_experiment over every (k, t) pair; several pairs go to k{k}_t{t}/ subdirectories."""
    ks = list(ks) or [config.k]
    ts = list(ts) or [config.t]
    pairs = [(k, t) for k in ks for t in ts]
    results = {}
    for k, t in pairs:
        out = Path(config.output_dir)
        if len(pairs) > 1:
            out = out / f"k{k}_t{t:g}"
        results[(k, t)] = run_experiment(config, k, t, out)
    return results


def run_certified_cli(config: ExperimentConfig) -> GreedyTrace:
    """
    Certified run: budget from (epsilon, eta, r, m0), one greedy until the tolerance or the
    step cap, trace_certified.json and basis_certified.rb in the output directory.

    Raises:
        BudgetInfeasibleError: reported with m and N before anything is solved
    """
    settings = get_settings()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    budget = CertifiedBudget.build(config.epsilon, config.eta, config.r, config.m0, config.measure)
    logger.info("certified budget: m=%d N=%d threshold=%.4e step cap=%d",
                budget.m, budget.N, budget.threshold, budget.step_cap)
    if budget.step_cap > settings.max_basis_size or budget.N > settings.max_training_size:
        logger.error("budget infeasible: m=%d N=%d", budget.m, budget.N)
        raise BudgetInfeasibleError(
            f"certified budget m={budget.m}, N={budget.N} exceeds the limits "
            f"(basis {settings.max_basis_size}, training set {settings.max_training_size})",
            m=budget.m, N=budget.N,
        )

    assert_disjoint_streams([
        (StreamRole.VALIDATION, (config.d, config.t)),
        (StreamRole.CERTIFIED, (config.d, config.t)),
    ])
    solver = build_solver(config)
    validation = build_validation_set(config, solver)
    rng = make_rng(config.master_seed, StreamRole.CERTIFIED, config.d, config.t)
    manifest = _Manifest(out)
    try:
        rb, trace = run_certified(
            budget, solver, rng,
            validation=validation,
            selector=config.selector,
            workers=config.workers,
            breakdown_rtol=settings.breakdown_rtol,
            max_basis_size=settings.max_basis_size,
            max_training_size=settings.max_training_size,
            master_seed=config.master_seed,
            config=config.model_dump(mode="json"),
        )
        trace.diagnostics.update({
            "m": budget.m,
            "N": budget.N,
            "final_dimension": rb.n,
            "final_sigma_val": validation.max_error(rb),
            "solve_count": solver.solve_count,
        })
        if config.s_assumed is not None:
            trace.diagnostics["complexity_exponents"] = complexity_exponents(config.r, config.s_assumed, config.measure)
        manifest.add(_write_json(trace.model_dump_json(indent=2), out / "trace_certified.json"))
        if config.save_bases:
            rb.metadata.update({"mode": "certified", "m": budget.m, "N": budget.N})
            manifest.add(save_basis(rb, out / "basis_certified.rb"))
    except OSError as e:
        raise manifest.fail(e) from e
    finally:
        validation.close()
    manifest.commit("complete")
    return trace


def lemma_trials(
    P: Polynomial,
    sup_est: float,
    N: int,
    trials: int,
    measure: SamplingMeasure,
    rng: np.random.Generator,
    eta: Optional[float] = None,
) -> LemmaTrialResult:
    """
    Frequency over `trials` independent size-N sets of max |P| falling below
    sup_est / (8 m^alpha), against the bound (1 - 3/(4 m^(2 alpha)))^N.
    """
    alpha = SamplingMeasure(measure).alpha
    m = P.m
    level = sup_est / (8.0 * m ** alpha)
    per_block = max(1, _LEMMA_BLOCK // N)
    failures, done = 0, 0
    while done < trials:
        batch = min(per_block, trials - done)
        points = sample_set(measure, P.d, batch * N, rng)
        values = np.abs(P(points)).reshape(batch, N)
        failures += int(np.count_nonzero(values.max(axis=1) < level))
        done += batch
    bound = (1.0 - 3.0 / (4.0 * m ** (2.0 * alpha))) ** N
    stderr = math.sqrt(bound * (1.0 - bound) / trials)
    frequency = failures / trials
    return LemmaTrialResult(
        m=m, d=P.d, N=N, eta=eta, trials=trials, failures=failures, frequency=frequency,
        bound=bound, stderr=stderr, passed=frequency <= bound + 3.0 * stderr,
    )


def run_lemma_mc(config: ExperimentConfig) -> LemmaReport:
    """
    Random (Lambda, P) instances with m <= lemma_max_m and d <= lemma_max_d: Nikolskii and
    superlevel estimates, then the sampling-failure frequency at N = compute_N(m, eta) for
    every eta in lemma_etas. Writes lemma_report.json.
    """
    measure = SamplingMeasure(config.measure)
    basis = PolynomialBasis.for_measure(measure)
    rng = make_rng(config.master_seed, StreamRole.LEMMA, config.lemma_max_m, config.lemma_max_d)
    report = LemmaReport(measure=measure, alpha=measure.alpha)
    n_mc = config.lemma_mc_samples

    for i in range(config.lemma_instances):
        m = int(rng.integers(1, config.lemma_max_m + 1))
        d = int(rng.integers(1, config.lemma_max_d + 1))
        Lambda = random_downward_closed(m, d, rng)
        P = Polynomial.random(Lambda, rng, basis)

        nik = nikolskii_check(P, None, n_mc, rng)
        report.nikolskii.append(NikolskiiResult(
            m=m, d=d, sup_est=nik.sup_est, l2_est=nik.l2_est, l2_stderr=nik.l2_stderr, passed=nik.holds(),
        ))
        sup = superlevel_measure(P, None, n_mc, rng, sup_est=nik.sup_est)
        report.superlevel.append(SuperlevelResult(
            m=m, d=d, threshold=sup.threshold, measure=sup.measure, stderr=sup.stderr,
            bound=sup.bound, passed=sup.holds(),
        ))
        for eta in config.lemma_etas:
            N = compute_N(m, eta, measure)
            report.lemma.append(lemma_trials(P, nik.sup_est, N, config.lemma_trials, measure, rng, eta))
        logger.debug("lemma instance %d: m=%d d=%d", i, m, d)

    level = logging.WARNING if report.violations else logging.INFO
    logger.log(level, "lemma campaigns: %d instances, %d violations", config.lemma_instances, report.violations)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        _write_json(report.model_dump_json(indent=2), out / "lemma_report.json")
    except OSError as e:
        raise ExperimentIOError(f"could not write the lemma report: {e}") from e
    return report
