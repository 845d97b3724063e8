"""Pydantic models for experiment configuration, greedy traces and Monte Carlo reports."""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.services.params import SamplingMeasure


class RunMode(str, Enum):
    SCHEDULED = "schedule"
    CERTIFIED = "certify"
    LEMMA_MC = "lemma-mc"


class PoolMode(str, Enum):
    """How training sets are drawn across greedy steps."""
    FRESH = "fresh"
    CUMULATIVE = "cumulative"
    FIXED = "fixed"


class Selector(str, Enum):
    EXACT = "exact"
    RESIDUAL = "residual"


class Termination(str, Enum):
    HIT_TOLERANCE = "HitTolerance"
    HIT_STEP_CAP = "HitStepCap"
    HIT_SCHEDULE_END = "HitScheduleEnd"


class ExperimentConfig(BaseModel):
    """
    Everything a run needs. Loaded from a flat key=value file and CLI overrides
    (see app.core.config.load_experiment_config).
    """

    model_config = ConfigDict(use_enum_values=False, extra="forbid")

    mode: RunMode = RunMode.SCHEDULED

    # coefficient model and discretization
    k: int = Field(4, description="Subdomain grid per side, d = k*k")
    t: float = Field(2.0, description="Amplitude decay a_j = j^-t")
    delta: float = Field(0.01, description="Ellipticity margin, abar = 1 + delta")
    grid_n: int = Field(64, description="Mesh cells per side")
    measure: SamplingMeasure = SamplingMeasure.UNIFORM

    # scheduled mode
    beta_list: List[float] = Field(default_factory=lambda: [1.0, 1.25, 1.5, 1.75, 2.0])
    n_max: int = 30
    realizations: int = 20
    validation_size: int = 2000
    pool_mode: PoolMode = PoolMode.FRESH
    pool_size: int = 5000
    selector: Selector = Selector.EXACT

    # certified mode
    epsilon: float = 0.05
    eta: float = 0.05
    r: float = 3.0
    m0: float = 1.0
    s_assumed: Optional[float] = Field(None, description="Assumed n-width decay rate, diagnostics only")

    # lemma Monte Carlo campaigns
    lemma_instances: int = 50
    lemma_trials: int = 2000
    lemma_max_m: int = 15
    lemma_max_d: int = 6
    lemma_mc_samples: int = 100_000
    lemma_etas: List[float] = Field(default_factory=lambda: [0.25, 0.05])

    # bookkeeping
    master_seed: int = 0
    output_dir: Path = Path("runs")
    workers: int = 1
    save_bases: bool = True
    direct_max_unknowns: int = 250_000
    cg_rtol: float = 1e-12

    @field_validator("k", "grid_n", "n_max", "realizations", "validation_size", "pool_size",
                     "lemma_instances", "lemma_trials", "lemma_max_m", "lemma_max_d",
                     "lemma_mc_samples", "workers", "direct_max_unknowns")
    @classmethod
    def _positive_int(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be a positive integer")
        return v

    @field_validator("t", "delta", "epsilon", "r", "m0", "cg_rtol")
    @classmethod
    def _positive_float(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @field_validator("s_assumed")
    @classmethod
    def _positive_rate(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not v > 0:
            raise ValueError("must be positive")
        return v

    @field_validator("eta")
    @classmethod
    def _probability(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("must lie in (0, 1)")
        return v

    @field_validator("lemma_etas")
    @classmethod
    def _probabilities(cls, v: List[float]) -> List[float]:
        if any(not 0 < x < 1 for x in v):
            raise ValueError("every eta must lie in (0, 1)")
        return v

    @field_validator("beta_list")
    @classmethod
    def _betas(cls, v: List[float]) -> List[float]:
        if any(b < 1 for b in v):
            raise ValueError("beta values must be >= 1")
        return [float(b) for b in v]

    @field_validator("master_seed")
    @classmethod
    def _seed(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @model_validator(mode="after")
    def _mesh_alignment(self) -> "ExperimentConfig":
        if self.grid_n % self.k != 0:
            raise ValueError(f"grid_n={self.grid_n} is not a multiple of k={self.k}")
        return self

    @property
    def d(self) -> int:
        return self.k * self.k


class GreedyStepRecord(BaseModel):
    n: int
    N_n: int
    chosen_y: List[float]
    sigma_hat: float
    sigma_val: Optional[float] = None
    true_error: Optional[float] = Field(None, description="Exact error at chosen_y when a surrogate selected it")
    weak_greedy_ratio: Optional[float] = None
    breakdown_retries: int = 0
    wall_time: float = 0.0


class GreedyTrace(BaseModel):
    mode: RunMode
    steps: List[GreedyStepRecord] = Field(default_factory=list)
    termination: Optional[Termination] = None
    master_seed: Optional[int] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    evaluation_count: int = 0
    wall_time: float = 0.0
    budget: Optional[Dict[str, Any]] = None
    diagnostics: Dict[str, Any] = Field(default_factory=dict)

    @property
    def sigma_hats(self) -> List[float]:
        return [s.sigma_hat for s in self.steps]

    @property
    def sigma_vals(self) -> List[Optional[float]]:
        return [s.sigma_val for s in self.steps]


class LemmaTrialResult(BaseModel):
    """Frequency of a random size-N set missing the M/(8 m^alpha) level of one polynomial."""
    m: int
    d: int
    N: int
    eta: Optional[float] = None
    trials: int
    failures: int
    frequency: float
    bound: float
    stderr: float
    passed: bool


class NikolskiiResult(BaseModel):
    m: int
    d: int
    sup_est: float
    l2_est: float
    l2_stderr: float
    passed: bool


class SuperlevelResult(BaseModel):
    m: int
    d: int
    threshold: float
    measure: float
    stderr: float
    bound: float
    passed: bool


class LemmaReport(BaseModel):
    measure: SamplingMeasure
    alpha: float
    lemma: List[LemmaTrialResult] = Field(default_factory=list)
    nikolskii: List[NikolskiiResult] = Field(default_factory=list)
    superlevel: List[SuperlevelResult] = Field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(not r.passed for r in [*self.lemma, *self.nikolskii, *self.superlevel])
