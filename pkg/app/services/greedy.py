"""
Weak greedy reduced basis construction over random training sets.

A ReducedBasis holds a V-orthonormal basis b_1..b_n (columns of `vectors`) together with
the Galerkin projections of the affine operator, so online solves never touch n_h-sized
data. Every ReducedBasis is immutable; extend() returns a new one.
"""

import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from app.core.errors import (
    BreakdownError,
    BudgetInfeasibleError,
    InvalidArgumentError,
    NumericalFailureError,
)
from app.models.experiment import (
    GreedyStepRecord,
    GreedyTrace,
    PoolMode,
    RunMode,
    Selector,
    Termination,
)
from app.services.fem import AffineOperator, HighFidelitySolver, Snapshot
from app.services.params import ParameterVector, SamplingMeasure, as_parameter, sample_set
from app.services.polytools import CertifiedBudget

logger = logging.getLogger(__name__)

BREAKDOWN_RTOL = 1e-12

# below this fraction of ||u||^2 the Pythagorean formula loses all digits; use the explicit residual
_CANCELLATION_FRACTION = 1e-6


@dataclass(frozen=True, eq=False)
class ReducedBasis:
    inner: sp.csr_matrix
    vectors: np.ndarray  # (n_h, n), V-orthonormal columns
    inner_vectors: np.ndarray  # S @ vectors
    reduced_a0: np.ndarray  # (n, n)
    reduced_components: np.ndarray  # (d, n, n)
    reduced_load: np.ndarray  # (n,)
    provenance: Tuple[ParameterVector, ...] = ()
    operator: Optional[AffineOperator] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def empty(cls, operator: AffineOperator) -> "ReducedBasis":
        return replace(cls.empty_for_inner(operator.inner, operator.d), operator=operator)

    @classmethod
    def empty_for_inner(cls, inner: sp.spmatrix, d: int = 0) -> "ReducedBasis":
        """Basis without reduced operators, for projection-only use."""
        n_h = inner.shape[0]
        return cls(
            inner=sp.csr_matrix(inner),
            vectors=np.zeros((n_h, 0)),
            inner_vectors=np.zeros((n_h, 0)),
            reduced_a0=np.zeros((0, 0)),
            reduced_components=np.zeros((d, 0, 0)),
            reduced_load=np.zeros(0),
        )

    @property
    def n(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def n_h(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def d(self) -> int:
        return int(self.reduced_components.shape[0])

    def __len__(self) -> int:
        return self.n

    def gram(self) -> np.ndarray:
        return self.vectors.T @ self.inner_vectors

    def coordinates(self, u: Union[Snapshot, np.ndarray]) -> np.ndarray:
        """<u, b_i>_V for every basis vector."""
        coeffs = _coeffs(u)
        if coeffs.shape[0] != self.n_h:
            raise InvalidArgumentError(f"snapshot has {coeffs.shape[0]} entries, basis lives in R^{self.n_h}")
        return self.inner_vectors.T @ coeffs

    def lift(self, c: np.ndarray) -> Snapshot:
        return Snapshot.from_coeffs(self.vectors @ np.asarray(c, dtype=np.float64), self.inner)

    def recompute_reduced(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Reduced operators from scratch; used to check the incremental updates."""
        if self.operator is None:
            raise InvalidArgumentError("basis carries no operator")
        B = self.vectors
        a0 = B.T @ (self.operator.a0 @ B)
        comps = np.stack([B.T @ (A @ B) for A in self.operator.components]) if self.operator.d else np.zeros((0, self.n, self.n))
        return a0, comps, B.T @ self.operator.load


def _coeffs(u: Union[Snapshot, np.ndarray]) -> np.ndarray:
    return u.coeffs if isinstance(u, Snapshot) else np.asarray(u, dtype=np.float64)


def _vnorm(u: Union[Snapshot, np.ndarray], S: sp.spmatrix) -> float:
    if isinstance(u, Snapshot):
        return u.vnorm
    return float(np.sqrt(max(float(u @ (S @ u)), 0.0)))


def project_error(u: Union[Snapshot, np.ndarray], rb: ReducedBasis) -> float:
    """e_n = ||u - P_{V_n} u||_V = sqrt(||u||^2 - sum_i <u, b_i>^2), clamped at 0."""
    c = rb.coordinates(u)
    norm = _vnorm(u, rb.inner)
    err2 = norm * norm - float(c @ c)
    if err2 <= _CANCELLATION_FRACTION * norm * norm and rb.n:
        w = _coeffs(u) - rb.vectors @ c
        err2 = float(w @ (rb.inner @ w))
    return float(np.sqrt(max(err2, 0.0)))


def extend(
    rb: ReducedBasis,
    u: Union[Snapshot, np.ndarray],
    y: Optional[ParameterVector] = None,
    breakdown_rtol: float = BREAKDOWN_RTOL,
) -> ReducedBasis:
    """
    Append the V-normalized residual of u against the basis (modified Gram-Schmidt with
    one re-orthogonalization pass) and update the reduced operators by one row/column.

    Raises:
        BreakdownError: residual below breakdown_rtol * ||u||_V
    """
    S = rb.inner
    w = np.array(_coeffs(u), dtype=np.float64)
    if w.shape[0] != rb.n_h:
        raise InvalidArgumentError(f"snapshot has {w.shape[0]} entries, basis lives in R^{rb.n_h}")
    unorm = _vnorm(u, S)
    for _ in range(2):
        for i in range(rb.n):
            w -= float(rb.inner_vectors[:, i] @ w) * rb.vectors[:, i]
    Sw = S @ w
    norm = float(np.sqrt(max(float(w @ Sw), 0.0)))
    if not norm > breakdown_rtol * unorm:
        raise BreakdownError(
            f"snapshot is numerically in the span of the basis (residual {norm:.3e}, ||u|| {unorm:.3e})",
            residual=norm,
        )
    b = w / norm
    Sb = Sw / norm

    vectors = np.column_stack([rb.vectors, b])
    inner_vectors = np.column_stack([rb.inner_vectors, Sb])
    n = rb.n
    op = rb.operator
    if op is not None:
        A0b = op.a0 @ b
        a0 = np.empty((n + 1, n + 1))
        a0[:n, :n] = rb.reduced_a0
        col = rb.vectors.T @ A0b
        a0[:n, n] = col
        a0[n, :n] = col
        a0[n, n] = float(b @ A0b)

        Ajb = op.apply_components(b)  # (d, n_h)
        comps = np.empty((op.d, n + 1, n + 1))
        comps[:, :n, :n] = rb.reduced_components
        cols = Ajb @ rb.vectors  # (d, n)
        comps[:, :n, n] = cols
        comps[:, n, :n] = cols
        comps[:, n, n] = Ajb @ b
        load = np.append(rb.reduced_load, float(op.load @ b))
    else:
        a0 = np.zeros((n + 1, n + 1))
        comps = np.zeros((rb.d, n + 1, n + 1))
        load = np.zeros(n + 1)

    provenance = rb.provenance
    if y is not None:
        provenance = provenance + (np.array(y, dtype=np.float64),)
    return ReducedBasis(S, vectors, inner_vectors, a0, comps, load, provenance, op, dict(rb.metadata))


@dataclass(frozen=True, eq=False)
class OnlineSolution:
    coeffs: np.ndarray
    snapshot: Optional[Snapshot] = None


def online_solve(rb: ReducedBasis, y: ParameterVector, lift: bool = False) -> OnlineSolution:
    """
    Solve (reduced_a0 + sum_j y_j reduced_j) c = reduced_load; no n_h-sized work unless lift.

    Raises:
        NumericalFailureError: reduced matrix not positive definite
    """
    y = as_parameter(y, rb.d)
    if rb.n == 0:
        c = np.zeros(0)
    else:
        A = rb.reduced_a0 + np.tensordot(y, rb.reduced_components, axes=1)
        try:
            c = cho_solve(cho_factor(A), rb.reduced_load)
        except LinAlgError as e:
            raise NumericalFailureError(f"reduced system is not positive definite: {e}") from e
    return OnlineSolution(c, rb.lift(c) if lift else None)


@dataclass(frozen=True, eq=False)
class GreedySelection:
    index: int
    y_star: ParameterVector
    sigma_hat: float
    snapshot: Snapshot
    errors: np.ndarray
    true_error: float


def greedy_step(
    rb: ReducedBasis,
    training_set: Union[np.ndarray, Sequence[ParameterVector]],
    solver: HighFidelitySolver,
    selector: Selector = Selector.EXACT,
    workers: int = 1,
) -> GreedySelection:
    """
    argmax over the training set of e_n(y); ties go to the smallest index. With the residual
    selector and a nonempty basis, the error is replaced by the Riesz norm of the online
    residual and only the winner is solved in full.
    """
    points = np.atleast_2d(np.asarray(training_set, dtype=np.float64))
    if points.shape[0] == 0 or points.size == 0:
        raise InvalidArgumentError("training set is empty")
    surrogate = Selector(selector) is Selector.RESIDUAL and rb.n > 0

    def evaluate(y: np.ndarray) -> Tuple[float, Optional[Snapshot]]:
        if surrogate:
            reduced = online_solve(rb, y, lift=True)
            return solver.riesz_residual_norm(y, reduced.snapshot), None
        snap = solver.solve(y)
        return project_error(snap, rb), snap

    errors = np.empty(points.shape[0])
    best, best_snap = -1, None
    if workers > 1 and points.shape[0] > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results: Iterator = pool.map(evaluate, points)
            for i, (err, snap) in enumerate(results):
                errors[i] = err
                if best < 0 or err > errors[best]:
                    best, best_snap = i, snap
    else:
        for i, y in enumerate(points):
            err, snap = evaluate(y)
            errors[i] = err
            if best < 0 or err > errors[best]:
                best, best_snap = i, snap

    y_star = points[best].copy()
    if best_snap is None:
        best_snap = solver.solve(y_star)
        true_error = project_error(best_snap, rb)
    else:
        true_error = float(errors[best])
    return GreedySelection(best, y_star, float(errors[best]), best_snap, errors, true_error)


class ValidationSet:
    """
    Held-out parameters whose snapshots are solved once and reused at every step. Snapshots
    beyond `cache_mb` go to a memory-mapped file in `spill_dir` (a temporary directory by default).
    """

    def __init__(
        self,
        points: np.ndarray,
        solver: HighFidelitySolver,
        cache_mb: int = 512,
        spill_dir: Optional[str] = None,
    ):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.shape[0] == 0:
            raise InvalidArgumentError("validation set is empty")
        self.points = points
        self.inner = solver.inner
        n_h, size = solver.operator.n_h, points.shape[0]
        self._spill: Optional[str] = None
        if n_h * size * 8 > cache_mb * 1024 * 1024:
            self._spill = tempfile.mkdtemp(prefix="rb-validation-", dir=spill_dir)
            path = os.path.join(self._spill, "snapshots.npy")
            logger.warning("validation snapshots exceed %d MB, spilling to %s", cache_mb, path)
            self.snapshots = np.lib.format.open_memmap(path, mode="w+", dtype=np.float64, shape=(n_h, size))
        else:
            self.snapshots = np.empty((n_h, size))
        norms2 = np.empty(size)
        for i, y in enumerate(points):
            snap = solver.solve(y)
            self.snapshots[:, i] = snap.coeffs
            norms2[i] = snap.vnorm ** 2
        self.norms2 = norms2
        logger.info("validation set ready: %d snapshots", size)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def errors(self, rb: ReducedBasis) -> np.ndarray:
        """e_n(y) at every validation point."""
        if rb.n == 0:
            return np.sqrt(self.norms2)
        c = rb.inner_vectors.T @ self.snapshots
        err2 = self.norms2 - np.einsum("ij,ij->j", c, c)
        for i in np.flatnonzero(err2 <= _CANCELLATION_FRACTION * self.norms2):
            w = self.snapshots[:, i] - rb.vectors @ c[:, i]
            err2[i] = float(w @ (rb.inner @ w))
        return np.sqrt(np.maximum(err2, 0.0))

    def max_error(self, rb: ReducedBasis) -> float:
        return float(self.errors(rb).max())

    def close(self) -> None:
        if self._spill is not None:
            self.snapshots = None
            shutil.rmtree(self._spill, ignore_errors=True)
            self._spill = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def estimate_true_error(
    rb: ReducedBasis,
    validation_set: Union[ValidationSet, np.ndarray],
    solver: Optional[HighFidelitySolver] = None,
) -> float:
    """Validation estimate of sigma_n = sup_y e_n(y)."""
    if not isinstance(validation_set, ValidationSet):
        if solver is None:
            raise InvalidArgumentError("a solver is needed to evaluate raw validation points")
        validation_set = ValidationSet(validation_set, solver)
    return validation_set.max_error(rb)


def training_size(n: int, beta: float) -> int:
    """N(n) = floor(n^beta), robust to powers that land a hair below an integer."""
    value = float(n) ** beta
    nearest = round(value)
    if abs(value - nearest) <= 1e-9 * max(1.0, value):
        return max(int(nearest), 1)
    return max(int(np.floor(value)), 1)


class _TrainingSource:
    """Training sets per step for the fresh, cumulative and fixed pool modes."""

    def __init__(self, mode: PoolMode, measure: SamplingMeasure, d: int,
                 rng: np.random.Generator, pool_size: int):
        self.mode = PoolMode(mode)
        self.measure = measure
        self.d = d
        self.rng = rng
        self.pool = np.zeros((0, d))
        if self.mode is PoolMode.FIXED:
            self.pool = np.array(sample_set(measure, d, pool_size, rng))

    def draw(self, N: int) -> np.ndarray:
        if self.mode is PoolMode.FRESH:
            return np.array(sample_set(self.measure, self.d, N, self.rng))
        if self.mode is PoolMode.CUMULATIVE and self.pool.shape[0] < N:
            extra = sample_set(self.measure, self.d, N - self.pool.shape[0], self.rng)
            self.pool = np.vstack([self.pool, extra])
        return self.pool.copy()

    def redraw(self, N: int, points: np.ndarray, bad_index: int) -> np.ndarray:
        """Training set for the retry after a breakdown at points[bad_index]."""
        if self.mode is PoolMode.FRESH:
            return self.draw(N)
        self.pool = np.delete(self.pool, bad_index, axis=0)
        if self.pool.shape[0] == 0:
            raise InvalidArgumentError("training pool exhausted after breakdown")
        return self.pool.copy()


class _CachedPool:
    """Fixed pool with snapshots solved once; selection is a max over cached errors."""

    def __init__(self, points: np.ndarray, solver: HighFidelitySolver, cache_mb: int):
        self.snapshots = ValidationSet(points, solver, cache_mb=cache_mb)
        self.active = np.ones(len(self.snapshots), dtype=bool)

    def select(self, rb: ReducedBasis) -> GreedySelection:
        errors = self.snapshots.errors(rb)
        masked = np.where(self.active, errors, -np.inf)
        best = int(np.argmax(masked))
        snap = Snapshot.from_coeffs(self.snapshots.snapshots[:, best], self.snapshots.inner)
        y_star = self.snapshots.points[best].copy()
        return GreedySelection(best, y_star, float(errors[best]), snap, errors, float(errors[best]))


def _select_and_extend(
    rb: ReducedBasis,
    source: _TrainingSource,
    points: np.ndarray,
    N: int,
    solver: HighFidelitySolver,
    selector: Selector,
    workers: int,
    breakdown_rtol: float,
    pool: Optional[_CachedPool] = None,
) -> Tuple[ReducedBasis, GreedySelection, int, int]:
    """One selection plus extension, retried once on breakdown. Returns (rb, selection, retries, evaluations)."""
    def select(candidates: np.ndarray) -> GreedySelection:
        if pool is not None:
            return pool.select(rb)
        return greedy_step(rb, candidates, solver, selector, workers)

    sel = select(points)
    evaluations = points.shape[0]
    try:
        return extend(rb, sel.snapshot, sel.y_star, breakdown_rtol), sel, 0, evaluations
    except BreakdownError as e:
        logger.warning("breakdown at n=%d (%s); retrying with a new draw", rb.n + 1, e)
    if pool is not None:
        pool.active[sel.index] = False
    else:
        points = source.redraw(N, points, sel.index)
    sel = select(points)
    evaluations += points.shape[0]
    return extend(rb, sel.snapshot, sel.y_star, breakdown_rtol), sel, 1, evaluations


def run_scheduled(
    n_max: int,
    beta: float,
    measure: SamplingMeasure,
    solver: HighFidelitySolver,
    rng: np.random.Generator,
    validation: Optional[ValidationSet] = None,
    pool_mode: PoolMode = PoolMode.FRESH,
    pool_size: int = 5000,
    selector: Selector = Selector.EXACT,
    workers: int = 1,
    breakdown_rtol: float = BREAKDOWN_RTOL,
    cache_mb: int = 512,
    master_seed: Optional[int] = None,
    config: Optional[Dict[str, Any]] = None,
) -> Tuple[ReducedBasis, GreedyTrace]:
    """
    n_max greedy steps; step n selects from floor(n^beta) points (pool_size points in the fixed
    pool mode) and records the validation error of V_n when a validation set is given.
    """
    if n_max < 1:
        raise InvalidArgumentError(f"n_max must be >= 1, got {n_max}")
    if beta < 1:
        raise InvalidArgumentError(f"beta must be >= 1, got {beta}")
    op = solver.operator
    source = _TrainingSource(pool_mode, SamplingMeasure(measure), op.d, rng, pool_size)
    rb = ReducedBasis.empty(op)
    trace = GreedyTrace(mode=RunMode.SCHEDULED, master_seed=master_seed, config=dict(config or {}))
    started = time.perf_counter()
    pool = None
    if source.mode is PoolMode.FIXED and Selector(selector) is Selector.EXACT:
        pool = _CachedPool(source.pool, solver, cache_mb)
    previous_val = validation.max_error(rb) if validation is not None else None

    for n in range(1, n_max + 1):
        t0 = time.perf_counter()
        N_n = training_size(n, beta)
        points = source.draw(N_n)
        rb, sel, retries, evaluations = _select_and_extend(
            rb, source, points, N_n, solver, selector, workers, breakdown_rtol, pool)
        trace.evaluation_count += evaluations

        sigma_val, ratio = None, None
        if validation is not None:
            sigma_val = validation.max_error(rb)
            if previous_val:
                ratio = sel.sigma_hat / previous_val
            previous_val = sigma_val
        trace.steps.append(GreedyStepRecord(
            n=n,
            N_n=int(points.shape[0]),
            chosen_y=sel.y_star.tolist(),
            sigma_hat=sel.sigma_hat,
            sigma_val=sigma_val,
            true_error=sel.true_error if Selector(selector) is Selector.RESIDUAL else None,
            weak_greedy_ratio=ratio,
            breakdown_retries=retries,
            wall_time=time.perf_counter() - t0,
        ))
        logger.debug("beta=%g n=%d N=%d sigma_hat=%.4e sigma_val=%s",
                     beta, n, points.shape[0], sel.sigma_hat, sigma_val)

    if pool is not None:
        pool.snapshots.close()
    trace.termination = Termination.HIT_SCHEDULE_END
    trace.wall_time = time.perf_counter() - started
    return rb, trace


def run_certified(
    budget: CertifiedBudget,
    solver: HighFidelitySolver,
    rng: np.random.Generator,
    validation: Optional[ValidationSet] = None,
    selector: Selector = Selector.EXACT,
    workers: int = 1,
    breakdown_rtol: float = BREAKDOWN_RTOL,
    max_basis_size: int = 5000,
    max_training_size: int = 5_000_000,
    master_seed: Optional[int] = None,
    config: Optional[Dict[str, Any]] = None,
) -> Tuple[ReducedBasis, GreedyTrace]:
    """
    Weak greedy with a fresh size-N draw per step. Stops with V_{n-1} as soon as
    sigma_hat <= epsilon / (8 m^alpha), or after the basis reaches floor(m^(2 alpha)) vectors.

    Raises:
        BudgetInfeasibleError: the step cap or N exceed the configured resource limits
    """
    cap = budget.step_cap
    if cap > max_basis_size or budget.N > max_training_size:
        raise BudgetInfeasibleError(
            f"budget needs up to {cap} basis vectors and N={budget.N} solves per step "
            f"(limits {max_basis_size}, {max_training_size})",
            m=budget.m, N=budget.N,
        )
    op = solver.operator
    source = _TrainingSource(PoolMode.FRESH, budget.measure, op.d, rng, budget.N)
    rb = ReducedBasis.empty(op)
    trace = GreedyTrace(mode=RunMode.CERTIFIED, master_seed=master_seed,
                        config=dict(config or {}), budget=budget.summary())
    threshold = budget.threshold
    started = time.perf_counter()
    logger.info("certified run: m=%d N=%d threshold=%.4e step cap=%d", budget.m, budget.N, threshold, cap)
    previous_val = validation.max_error(rb) if validation is not None else None

    step = 0
    while True:
        step += 1
        t0 = time.perf_counter()
        points = source.draw(budget.N)
        sel = greedy_step(rb, points, solver, selector, workers)
        trace.evaluation_count += points.shape[0]
        retries = 0

        if sel.sigma_hat <= threshold:
            trace.termination = Termination.HIT_TOLERANCE
        elif rb.n >= cap:
            trace.termination = Termination.HIT_STEP_CAP
        else:
            try:
                rb = extend(rb, sel.snapshot, sel.y_star, breakdown_rtol)
            except BreakdownError as e:
                logger.warning("breakdown at n=%d (%s); retrying with a new draw", rb.n + 1, e)
                retries = 1
                points = source.draw(budget.N)
                sel = greedy_step(rb, points, solver, selector, workers)
                trace.evaluation_count += points.shape[0]
                if sel.sigma_hat <= threshold:
                    trace.termination = Termination.HIT_TOLERANCE
                else:
                    rb = extend(rb, sel.snapshot, sel.y_star, breakdown_rtol)

        sigma_val, ratio = None, None
        if validation is not None:
            sigma_val = validation.max_error(rb)
            if previous_val:
                ratio = sel.sigma_hat / previous_val
            previous_val = sigma_val
        trace.steps.append(GreedyStepRecord(
            n=step,
            N_n=budget.N,
            chosen_y=sel.y_star.tolist(),
            sigma_hat=sel.sigma_hat,
            sigma_val=sigma_val,
            true_error=sel.true_error if Selector(selector) is Selector.RESIDUAL else None,
            weak_greedy_ratio=ratio,
            breakdown_retries=retries,
            wall_time=time.perf_counter() - t0,
        ))
        logger.debug("certified step %d: sigma_hat=%.4e dim=%d", step, sel.sigma_hat, rb.n)
        if trace.termination is not None:
            break

    trace.wall_time = time.perf_counter() - started
    logger.info("certified run finished: %s with n=%d after %d evaluations",
                trace.termination.value, rb.n, trace.evaluation_count)
    return rb, trace


def online_batch(
    rb: ReducedBasis,
    points: Union[np.ndarray, Sequence[ParameterVector]],
    solver: Optional[HighFidelitySolver] = None,
    lift: bool = False,
) -> List[Dict[str, Any]]:
    """
    Online solves for several parameters. ||u_n||_V is the Euclidean norm of the coefficients
    (orthonormal basis); with a solver the Riesz norm of the residual is reported as well.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if solver is None and rb.operator is not None:
        solver = HighFidelitySolver(rb.operator)
    rows = []
    for i, y in enumerate(points):
        sol = online_solve(rb, y, lift=lift or solver is not None)
        row: Dict[str, Any] = {
            "row": i,
            "vnorm": float(np.linalg.norm(sol.coeffs)),
            "residual": solver.riesz_residual_norm(y, sol.snapshot) if solver is not None else None,
            "coeffs": sol.coeffs.tolist(),
        }
        if lift:
            row["lifted"] = sol.snapshot.coeffs.tolist()
        rows.append(row)
    return rows
