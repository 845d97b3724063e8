"""
Downward-closed multi-index sets, orthonormal Legendre/Chebyshev tensor polynomials,
the Christoffel-sum, Nikolskii and superlevel inequalities used to justify random
training sets, and the integer arithmetic (m, N) of the certified greedy budget.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core.errors import InvalidArgumentError
from app.services.params import SamplingMeasure

logger = logging.getLogger(__name__)

MultiIndex = Tuple[int, ...]
CHEBYSHEV_ALPHA = math.log(3.0) / (2.0 * math.log(2.0))


class PolynomialBasis(str, Enum):
    LEGENDRE = "legendre"
    CHEBYSHEV = "chebyshev"

    @classmethod
    def for_measure(cls, measure: SamplingMeasure) -> "PolynomialBasis":
        return cls.CHEBYSHEV if SamplingMeasure(measure) is SamplingMeasure.CHEBYSHEV else cls.LEGENDRE

    @property
    def measure(self) -> SamplingMeasure:
        return SamplingMeasure.CHEBYSHEV if self is PolynomialBasis.CHEBYSHEV else SamplingMeasure.UNIFORM

    @property
    def alpha(self) -> float:
        return self.measure.alpha


# ---------------------------------------------------------------------------
# multi-index sets
# ---------------------------------------------------------------------------

def _normalize(nu: Sequence[int]) -> MultiIndex:
    nu = tuple(int(v) for v in nu)
    if any(v < 0 for v in nu):
        raise InvalidArgumentError(f"multi-index {nu} has negative entries")
    return nu


def is_downward_closed(indices: Iterable[Sequence[int]]) -> bool:
    """True iff every index minus a unit vector in any support coordinate is present."""
    members = {_normalize(nu) for nu in indices}
    for nu in members:
        for j, v in enumerate(nu):
            if v > 0 and nu[:j] + (v - 1,) + nu[j + 1:] not in members:
                return False
    return True


@dataclass(frozen=True)
class DownwardClosedSet:
    """Finite lower set of multi-indices of common length d, kept in a deterministic order."""

    d: int
    indices: Tuple[MultiIndex, ...]

    @classmethod
    def from_indices(cls, indices: Iterable[Sequence[int]], d: Optional[int] = None) -> "DownwardClosedSet":
        normalized = sorted({_normalize(nu) for nu in indices}, key=lambda nu: (sum(nu), nu))
        if not normalized:
            raise InvalidArgumentError("a downward closed set contains at least the zero index")
        d = len(normalized[0]) if d is None else d
        if any(len(nu) != d for nu in normalized):
            raise InvalidArgumentError(f"multi-indices must all have length d={d}")
        if not is_downward_closed(normalized):
            raise InvalidArgumentError("index set is not downward closed")
        return cls(d, tuple(normalized))

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[MultiIndex]:
        return iter(self.indices)

    def __contains__(self, nu: object) -> bool:
        return tuple(nu) in set(self.indices)  # type: ignore[arg-type]


def hyperbolic_cross(m: int, d: int) -> DownwardClosedSet:
    """All nu in N^d with prod_j (1 + nu_j) <= m, by depth-first search with pruning."""
    if m < 1 or d < 1:
        raise InvalidArgumentError(f"hyperbolic cross needs m >= 1 and d >= 1, got m={m}, d={d}")
    found: List[MultiIndex] = []
    prefix = [0] * d

    def visit(j: int, budget: int) -> None:
        if j == d:
            found.append(tuple(prefix))
            return
        v = 0
        while v + 1 <= budget:
            prefix[j] = v
            visit(j + 1, budget // (v + 1))
            v += 1
        prefix[j] = 0

    visit(0, m)
    return DownwardClosedSet.from_indices(found, d)


def random_downward_closed(target_size: int, d: int, rng: np.random.Generator) -> DownwardClosedSet:
    """
    Test generator: grow from {0} by adding a uniformly chosen admissible index (all
    parents present) until the set has target_size elements.
    """
    if target_size < 1 or d < 1:
        raise InvalidArgumentError(f"need target_size >= 1 and d >= 1, got {target_size}, {d}")
    zero = (0,) * d
    members = {zero}
    frontier = {zero[:j] + (1,) + zero[j + 1:] for j in range(d)}
    while len(members) < target_size:
        ordered = sorted(frontier)
        nu = ordered[int(rng.integers(len(ordered)))]
        frontier.discard(nu)
        members.add(nu)
        for j in range(d):
            child = nu[:j] + (nu[j] + 1,) + nu[j + 1:]
            parents_present = all(
                child[:i] + (child[i] - 1,) + child[i + 1:] in members
                for i in range(d) if child[i] > 0
            )
            if parents_present:
                frontier.add(child)
    return DownwardClosedSet.from_indices(members, d)


# ---------------------------------------------------------------------------
# orthonormal polynomials
# ---------------------------------------------------------------------------

def legendre_table(max_degree: int, t: np.ndarray) -> np.ndarray:
    """
    L_0..L_max_degree at t, normalized in L2([-1,1], dt/2) so that L_k(1) = sqrt(2k+1).
    Shape (max_degree + 1,) + t.shape.
    """
    t = np.asarray(t, dtype=np.float64)
    out = np.empty((max_degree + 1,) + t.shape)
    out[0] = 1.0
    if max_degree >= 1:
        out[1] = t
    for k in range(1, max_degree):
        out[k + 1] = ((2 * k + 1) * t * out[k] - k * out[k - 1]) / (k + 1)
    scale = np.sqrt(2.0 * np.arange(max_degree + 1) + 1.0)
    return out * scale.reshape((-1,) + (1,) * t.ndim)


def chebyshev_table(max_degree: int, t: np.ndarray) -> np.ndarray:
    """T_0 = 1, T_k = sqrt(2) cos(k arccos t): orthonormal for the arcsine measure."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty((max_degree + 1,) + t.shape)
    out[0] = 1.0
    if max_degree >= 1:
        out[1] = t
    for k in range(1, max_degree):
        out[k + 1] = 2.0 * t * out[k] - out[k - 1]
    scale = np.full(max_degree + 1, math.sqrt(2.0))
    scale[0] = 1.0
    return out * scale.reshape((-1,) + (1,) * t.ndim)


def _table(basis: PolynomialBasis, max_degree: int, t: np.ndarray) -> np.ndarray:
    if PolynomialBasis(basis) is PolynomialBasis.CHEBYSHEV:
        return chebyshev_table(max_degree, t)
    return legendre_table(max_degree, t)


def _tensor_eval(nu: Sequence[int], y: np.ndarray, basis: PolynomialBasis) -> Union[float, np.ndarray]:
    nu = _normalize(nu)
    y = np.asarray(y, dtype=np.float64)
    points = np.atleast_2d(y)
    if points.shape[1] != len(nu):
        raise InvalidArgumentError(f"multi-index of length {len(nu)} evaluated at d={points.shape[1]}")
    value = np.ones(points.shape[0])
    for j, v in enumerate(nu):
        if v > 0:
            value *= _table(basis, v, points[:, j])[v]
    return float(value[0]) if y.ndim == 1 else value


def legendre_eval(nu: Sequence[int], y: np.ndarray) -> Union[float, np.ndarray]:
    """L_nu(y) = prod_j L_{nu_j}(y_j); y is one point (d,) or a batch (M, d)."""
    return _tensor_eval(nu, y, PolynomialBasis.LEGENDRE)


def chebyshev_eval(nu: Sequence[int], y: np.ndarray) -> Union[float, np.ndarray]:
    return _tensor_eval(nu, y, PolynomialBasis.CHEBYSHEV)


def design_matrix(indices: Sequence[MultiIndex], points: np.ndarray, basis: PolynomialBasis) -> np.ndarray:
    """Values basis_nu(y) for every point (rows) and index (columns)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    indices = [_normalize(nu) for nu in indices]
    max_degree = max((max(nu) if nu else 0) for nu in indices)
    tables = _table(basis, max_degree, points.T)  # (deg + 1, d, M)
    out = np.ones((points.shape[0], len(indices)))
    for col, nu in enumerate(indices):
        for j, v in enumerate(nu):
            if v > 0:
                out[:, col] *= tables[v, j]
    return out


def christoffel_sum(
    Lambda: Union[DownwardClosedSet, Iterable[Sequence[int]]],
    y: np.ndarray,
    basis: PolynomialBasis = PolynomialBasis.LEGENDRE,
) -> Union[float, np.ndarray]:
    """sum_{nu in Lambda} basis_nu(y)^2; bounded by #Lambda^2 (Legendre) or #Lambda^(2 alpha) (Chebyshev)."""
    if not isinstance(Lambda, DownwardClosedSet):
        Lambda = DownwardClosedSet.from_indices(Lambda)
    y = np.asarray(y, dtype=np.float64)
    values = design_matrix(Lambda.indices, y, PolynomialBasis(basis))
    sums = np.sum(values ** 2, axis=1)
    return float(sums[0]) if y.ndim == 1 else sums


# ---------------------------------------------------------------------------
# polynomial inequalities behind random training sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Polynomial:
    """Scalar polynomial sum_{nu in Lambda} c_nu basis_nu on a downward closed set."""

    indices: DownwardClosedSet
    coeffs: np.ndarray
    basis: PolynomialBasis = PolynomialBasis.LEGENDRE

    @classmethod
    def from_map(cls, coeffs: Mapping[Sequence[int], float],
                 basis: PolynomialBasis = PolynomialBasis.LEGENDRE) -> "Polynomial":
        Lambda = DownwardClosedSet.from_indices(coeffs.keys())
        lookup = {_normalize(nu): float(c) for nu, c in coeffs.items()}
        return cls(Lambda, np.array([lookup[nu] for nu in Lambda.indices]), PolynomialBasis(basis))

    @classmethod
    def random(cls, Lambda: DownwardClosedSet, rng: np.random.Generator,
               basis: PolynomialBasis = PolynomialBasis.LEGENDRE) -> "Polynomial":
        return cls(Lambda, rng.standard_normal(len(Lambda)), PolynomialBasis(basis))

    @property
    def m(self) -> int:
        return len(self.indices)

    @property
    def d(self) -> int:
        return self.indices.d

    @property
    def l2_norm(self) -> float:
        """Exact L2(rho) norm by Parseval."""
        return float(np.linalg.norm(self.coeffs))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return design_matrix(self.indices.indices, points, self.basis) @ self.coeffs


def _corner_points(d: int) -> np.ndarray:
    """2^min(d,10) sign patterns on the leading coordinates, remaining coordinates at +1."""
    free = min(d, 10)
    patterns = ((np.arange(2 ** free)[:, None] >> np.arange(free)) & 1) * 2.0 - 1.0
    corners = np.ones((patterns.shape[0], d))
    corners[:, :free] = patterns
    return corners


def estimate_sup_norm(P: Polynomial, n_candidates: int, rng: np.random.Generator,
                      block: int = 50_000) -> float:
    """
    Max of |P| over n_candidates Chebyshev-distributed points plus the corner sign patterns.
    Never exceeds the true sup norm.
    """
    best = float(np.max(np.abs(P(_corner_points(P.d)))))
    remaining = n_candidates
    while remaining > 0:
        size = min(block, remaining)
        pts = np.cos(np.pi * rng.random((size, P.d)))
        best = max(best, float(np.max(np.abs(P(pts)))))
        remaining -= size
    return best


def _draw(measure: SamplingMeasure, size: int, d: int, rng: np.random.Generator) -> np.ndarray:
    if measure is SamplingMeasure.CHEBYSHEV:
        return np.cos(np.pi * rng.random((size, d)))
    return rng.uniform(-1.0, 1.0, size=(size, d))


@dataclass(frozen=True)
class NikolskiiEstimate:
    m: int
    sup_est: float
    l2_est: float
    l2_stderr: float
    l2_exact: float
    alpha: float

    def holds(self, n_stderr: float = 3.0) -> bool:
        """sup_est <= m^alpha * (l2_est + n_stderr * stderr)."""
        return self.sup_est <= self.m ** self.alpha * (self.l2_est + n_stderr * self.l2_stderr) * (1 + 1e-12)


def nikolskii_check(
    P_coeffs: Union[Polynomial, Mapping[Sequence[int], float]],
    n_grid: Optional[int],
    n_mc: int,
    rng: np.random.Generator,
    block: int = 50_000,
) -> NikolskiiEstimate:
    """
    Estimates of ||P||_inf and ||P||_{L2(rho)} for the inequality ||P||_inf <= m ||P||_2
    (m^alpha for the Chebyshev basis). n_grid candidate points for the sup (default 10 n_mc).
    """
    P = P_coeffs if isinstance(P_coeffs, Polynomial) else Polynomial.from_map(P_coeffs)
    sup_est = estimate_sup_norm(P, 10 * n_mc if n_grid is None else n_grid, rng, block)
    measure = P.basis.measure
    total, total_sq, remaining = 0.0, 0.0, n_mc
    while remaining > 0:
        size = min(block, remaining)
        sq = P(_draw(measure, size, P.d, rng)) ** 2
        total += float(sq.sum())
        total_sq += float((sq ** 2).sum())
        remaining -= size
    mean_sq = total / n_mc
    var_sq = max(total_sq / n_mc - mean_sq ** 2, 0.0)
    l2_est = math.sqrt(mean_sq)
    # delta method: sd(sqrt(X)) ~ sd(X) / (2 sqrt(E X))
    l2_stderr = math.sqrt(var_sq / n_mc) / (2.0 * l2_est) if l2_est > 0 else 0.0
    return NikolskiiEstimate(P.m, sup_est, l2_est, l2_stderr, P.l2_norm, P.basis.alpha)


@dataclass(frozen=True)
class SuperlevelEstimate:
    m: int
    threshold: float
    measure: float
    stderr: float
    bound: float

    def holds(self, n_stderr: float = 3.0) -> bool:
        return self.measure + n_stderr * self.stderr >= self.bound


def superlevel_measure(
    P_coeffs: Union[Polynomial, Mapping[Sequence[int], float]],
    threshold_fraction: Optional[float],
    n_mc: int,
    rng: np.random.Generator,
    sup_est: Optional[float] = None,
    block: int = 50_000,
) -> SuperlevelEstimate:
    """
    Monte Carlo rho({|P| >= threshold}) with threshold = threshold_fraction * ||P||_inf-estimate;
    the default fraction 1/(2 m^alpha) gives the lower bound 3/(4 m^(2 alpha)).
    """
    P = P_coeffs if isinstance(P_coeffs, Polynomial) else Polynomial.from_map(P_coeffs)
    alpha = P.basis.alpha
    if sup_est is None:
        sup_est = estimate_sup_norm(P, 10 * n_mc, rng, block)
    fraction = 1.0 / (2.0 * P.m ** alpha) if threshold_fraction is None else threshold_fraction
    threshold = fraction * sup_est
    hits, remaining = 0, n_mc
    while remaining > 0:
        size = min(block, remaining)
        hits += int(np.count_nonzero(np.abs(P(_draw(P.basis.measure, size, P.d, rng))) >= threshold))
        remaining -= size
    p = hits / n_mc
    bound = 3.0 / (4.0 * P.m ** (2.0 * alpha))
    stderr = math.sqrt(max(p * (1.0 - p), bound * (1.0 - bound)) / n_mc)
    return SuperlevelEstimate(P.m, threshold, p, stderr, bound)


# ---------------------------------------------------------------------------
# certified budget arithmetic
# ---------------------------------------------------------------------------

def _measure_alpha(measure: SamplingMeasure) -> float:
    return SamplingMeasure(measure).alpha


def m_conditions_hold(m: int, epsilon: float, r: float, M0: float, measure: SamplingMeasure) -> bool:
    """32 M0 m^(-r + 2 alpha) <= epsilon and 2^(4r+2) m^(-(2 alpha - 1) r) <= 1."""
    alpha = _measure_alpha(measure)
    first = 32.0 * M0 * float(m) ** (-r + 2.0 * alpha) <= epsilon
    second = 2.0 ** (4.0 * r + 2.0) * float(m) ** (-(2.0 * alpha - 1.0) * r) <= 1.0
    return first and second


def compute_m(epsilon: float, r: float, M0: float, measure: SamplingMeasure = SamplingMeasure.UNIFORM) -> int:
    """Smallest m >= 1 satisfying both defining inequalities of the certified budget."""
    measure = SamplingMeasure(measure)
    alpha = _measure_alpha(measure)
    if not r > 2.0 * alpha:
        raise InvalidArgumentError(f"r={r} must exceed 2*alpha={2 * alpha:.6g} for the {measure.value} measure")
    if not epsilon > 0 or not M0 > 0:
        raise InvalidArgumentError("epsilon and M0 must be positive")
    first = (32.0 * M0 / epsilon) ** (1.0 / (r - 2.0 * alpha))
    second = 2.0 ** ((4.0 * r + 2.0) / ((2.0 * alpha - 1.0) * r))
    m = max(1, math.ceil(max(first, second)))
    while not m_conditions_hold(m, epsilon, r, M0, measure):
        m += 1
    while m > 1 and m_conditions_hold(m - 1, epsilon, r, M0, measure):
        m -= 1
    return m


def n_condition_holds(N: int, m: int, eta: float, measure: SamplingMeasure) -> bool:
    """(1 - 3/(4 m^(2 alpha)))^N <= eta / m^(2 alpha)."""
    m2a = float(m) ** (2.0 * _measure_alpha(measure))
    return (1.0 - 3.0 / (4.0 * m2a)) ** N <= eta / m2a


def compute_N(m: int, eta: float, measure: SamplingMeasure = SamplingMeasure.UNIFORM) -> int:
    """Smallest N >= 1 with (1 - 3/(4 m^(2 alpha)))^N <= eta / m^(2 alpha)."""
    if m < 1:
        raise InvalidArgumentError(f"m must be >= 1, got {m}")
    if not 0 < eta < 1:
        raise InvalidArgumentError(f"eta must lie in (0, 1), got {eta}")
    measure = SamplingMeasure(measure)
    m2a = float(m) ** (2.0 * _measure_alpha(measure))
    estimate = math.log(eta / m2a) / math.log1p(-3.0 / (4.0 * m2a))
    N = max(1, math.ceil(estimate))
    while not n_condition_holds(N, m, eta, measure):
        N += 1
    while N > 1 and n_condition_holds(N - 1, m, eta, measure):
        N -= 1
    return N


def complexity_exponents(r: float, s: float, measure: SamplingMeasure = SamplingMeasure.UNIFORM) -> Dict[str, float]:
    """
    Exponents of the certified algorithm's guarantees when d_n <= C n^-s:
    n(eps) <~ eps^-steps, N(eps) <~ eps^-evaluations (up to logs), and
    beta_star = evaluations / steps, the training-size growth N ~ n^beta_star.
    """
    alpha = _measure_alpha(measure)
    if not r > 2.0 * alpha or not s > 0:
        raise InvalidArgumentError(f"need r > 2 alpha and s > 0, got r={r}, s={s}")
    steps = 1.0 / s + 3.0 * alpha / (s * (r - 2.0 * alpha))
    evaluations = (2.0 * s * alpha + r + alpha) / (s * (r - 2.0 * alpha))
    return {"steps": steps, "evaluations": evaluations, "beta_star": evaluations / steps}


class CertifiedBudget(BaseModel):
    """Inputs (r, M0, epsilon, eta, measure) and the derived integers m, N of the certified greedy."""

    model_config = ConfigDict(frozen=True)

    r: float
    M0: float
    epsilon: float
    eta: float
    measure: SamplingMeasure
    m: int
    N: int
    alpha: float

    @classmethod
    def build(cls, epsilon: float, eta: float, r: float, M0: float,
              measure: SamplingMeasure = SamplingMeasure.UNIFORM) -> "CertifiedBudget":
        measure = SamplingMeasure(measure)
        m = compute_m(epsilon, r, M0, measure)
        N = compute_N(m, eta, measure)
        return cls(r=r, M0=M0, epsilon=epsilon, eta=eta, measure=measure, m=m, N=N, alpha=measure.alpha)

    @property
    def threshold(self) -> float:
        """Stopping level epsilon / (8 m^alpha)."""
        return self.epsilon / (8.0 * self.m ** self.alpha)

    @property
    def step_cap(self) -> int:
        """Largest admissible reduced dimension, floor(m^(2 alpha))."""
        return int(math.floor(self.m ** (2.0 * self.alpha) + 1e-9))

    @property
    def lemma_failure_bound(self) -> float:
        return (1.0 - 3.0 / (4.0 * self.m ** (2.0 * self.alpha))) ** self.N

    @property
    def union_bound(self) -> float:
        """Failure probability over all step_cap draws; at most eta by construction of N."""
        return self.step_cap * self.lemma_failure_bound

    def summary(self) -> Dict[str, float]:
        return {
            **self.model_dump(mode="json"),
            "threshold": self.threshold,
            "step_cap": self.step_cap,
            "lemma_failure_bound": self.lemma_failure_bound,
            "union_bound": self.union_bound,
        }
