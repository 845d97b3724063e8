"""Parameter domain Y = [-1, 1]^d, sampling measures and the checkerboard diffusion coefficient."""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple

import numpy as np

from app.core.errors import InvalidArgumentError

# A parameter vector is a read-only float64 array of length d with entries in [-1, 1].
ParameterVector = np.ndarray

_DOMAIN_SLACK = 1e-12


class SamplingMeasure(str, Enum):
    """Product measures on Y."""
    UNIFORM = "uniform"
    CHEBYSHEV = "chebyshev"

    @property
    def alpha(self) -> float:
        """Exponent of the Christoffel bound #(Lambda)^(2 alpha) for the matching polynomial basis."""
        if self is SamplingMeasure.CHEBYSHEV:
            return math.log(3.0) / (2.0 * math.log(2.0))
        return 1.0


def as_parameter(values: Sequence[float], d: int) -> ParameterVector:
    """Validate and freeze a parameter vector."""
    y = np.array(values, dtype=np.float64).reshape(-1)
    if y.shape[0] != d:
        raise InvalidArgumentError(f"parameter has length {y.shape[0]}, expected d={d}")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("parameter has non-finite entries")
    if np.any(np.abs(y) > 1.0 + _DOMAIN_SLACK):
        raise InvalidArgumentError("parameter lies outside Y = [-1, 1]^d")
    y = np.clip(y, -1.0, 1.0)
    y.setflags(write=False)
    return y


@dataclass(frozen=True)
class AffineCoefficientModel:
    """
    a(y)(x) = abar + sum_j y_j a_j chi_{D_j}(x) on the unit square, D_j the j-th cell
    of a k x k grid in row-major order (rows run along x2, j = row * k + col).
    """

    abar: float
    k: int
    amplitudes: Tuple[float, ...]
    t: float = 0.0
    delta: float = 0.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise InvalidArgumentError(f"k must be >= 1, got {self.k}")
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        if len(self.amplitudes) != self.k * self.k:
            raise InvalidArgumentError(
                f"expected {self.k * self.k} amplitudes for k={self.k}, got {len(self.amplitudes)}"
            )

    @property
    def d(self) -> int:
        return self.k * self.k

    @property
    def amplitude_array(self) -> np.ndarray:
        return np.asarray(self.amplitudes, dtype=np.float64)

    @property
    def a_min(self) -> float:
        """Lower bound of a(y) over Y x D."""
        return float(self.abar - np.max(np.abs(self.amplitude_array)))

    @property
    def a_max(self) -> float:
        return float(self.abar + np.max(np.abs(self.amplitude_array)))

    def cell_values(self, y: ParameterVector) -> np.ndarray:
        """Coefficient value on every subdomain D_1..D_d."""
        y = np.asarray(y, dtype=np.float64)
        return self.abar + y * self.amplitude_array


def build_checkerboard_model(k: int, t: float, delta: float) -> AffineCoefficientModel:
    """Model with d = k^2 cells, abar = 1 + delta and a_j = j^-t."""
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if not t > 0:
        raise InvalidArgumentError(f"t must be positive, got {t}")
    if not delta > 0:
        raise InvalidArgumentError(f"delta must be positive, got {delta}")
    j = np.arange(1, k * k + 1, dtype=np.float64)
    amplitudes = tuple(float(a) for a in j ** (-float(t)))
    return AffineCoefficientModel(abar=1.0 + delta, k=k, amplitudes=amplitudes, t=t, delta=delta)


def cell_index(k: int, x: Sequence[float]) -> int:
    """
    0-based row-major index of the cell containing x. Points on shared edges belong to
    the cell with the smaller index.
    """
    x1, x2 = float(x[0]), float(x[1])
    if not (0.0 < x1 < 1.0 and 0.0 < x2 < 1.0):
        raise InvalidArgumentError(f"point {tuple(x)} is outside the open unit square")
    col = max(math.ceil(x1 * k) - 1, 0)
    row = max(math.ceil(x2 * k) - 1, 0)
    return row * k + col


def coefficient_value(model: AffineCoefficientModel, y: ParameterVector, x: Sequence[float]) -> float:
    y = as_parameter(y, model.d)
    j = cell_index(model.k, x)
    return float(model.abar + y[j] * model.amplitudes[j])


def sample(measure: SamplingMeasure, d: int, rng: np.random.Generator) -> ParameterVector:
    return sample_set(measure, d, 1, rng)[0]


def sample_set(measure: SamplingMeasure, d: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """
    N independent draws, one per row. Uniform: U(-1, 1) per coordinate. Chebyshev:
    y = cos(pi U) with U ~ U(0, 1), the arcsine law.
    """
    if d < 1:
        raise InvalidArgumentError(f"d must be >= 1, got {d}")
    if N < 1:
        raise InvalidArgumentError(f"N must be >= 1, got {N}")
    measure = SamplingMeasure(measure)
    if measure is SamplingMeasure.UNIFORM:
        points = rng.uniform(-1.0, 1.0, size=(N, d))
    else:
        points = np.cos(np.pi * rng.random(size=(N, d)))
    points.setflags(write=False)
    return points
