"""Pydantic schemas for model parameters, experiment configuration and results."""

import hashlib
import json
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


# Model parameter schemas
class Regime(str, Enum):
    """Scaling regime of the interaction constant."""
    TRANSPORT = "transport"  # mu_N = mu / N, time scale t * N
    DIFFUSIVE = "diffusive"  # mu_N = mu / N^2, time scale t * N^2
    FIXED = "fixed"  # mu_N given explicitly


class ModelParams(BaseModel):
    """Rates and size of the particle system."""
    model_config = ConfigDict(frozen=True)

    n_particles: int = Field(..., ge=2, description="Number of particles N")
    alpha: float = Field(..., ge=0.0, description="Right-jump rate")
    beta: float = Field(..., ge=0.0, description="Left-jump rate")
    mu: float = Field(0.0, ge=0.0, description="Base interaction constant")
    regime: Regime = Field(Regime.FIXED, description="Scaling regime")
    mu_n: Optional[float] = Field(None, ge=0.0, description="Interaction rate in the fixed regime")

    @model_validator(mode="after")
    def _check_fixed_rate(self) -> "ModelParams":
        if self.regime == Regime.FIXED and self.mu_n is None:
            raise ValueError("fixed regime requires mu_n")
        return self

    @property
    def lam(self) -> float:
        """Drift lambda = alpha - beta."""
        return self.alpha - self.beta

    @property
    def scale_exponent(self) -> int:
        """Exponent a of the time scale t * N^a (0 in the fixed regime)."""
        return {Regime.TRANSPORT: 1, Regime.DIFFUSIVE: 2, Regime.FIXED: 0}[self.regime]

    def real_time(self, t: float) -> float:
        """Absolute simulation time matching macroscopic time t."""
        return t * float(self.n_particles) ** self.scale_exponent

    def with_particles(self, n: int) -> "ModelParams":
        """Copy with a different particle count."""
        return self.model_copy(update={"n_particles": n})


# Profile and test-function schemas
class ProfileSpec(BaseModel):
    """Initial profile family and parameters."""
    family: Literal["logistic", "skewed_logistic", "step"] = Field("logistic", description="Profile family")
    nu: float = Field(1.0, gt=0.0, description="Tail exponent of the logistic families")
    shift: float = Field(0.0, description="Location of the 1/2 level (logistic) or jump (step)")
    skew: float = Field(1.0, ge=0.0, description="Weight of the e^{2 nu x} term (skewed_logistic)")


class TestFunctionSpec(BaseModel):
    """Member of the two-parameter test-function family."""
    __test__ = False

    family: Literal["gaussian", "polynomial"] = Field("polynomial", description="Test-function family")
    center: float = Field(0.0, description="Center")
    width: float = Field(1.0, gt=0.0, description="Width (scale)")


def default_test_panel() -> List[TestFunctionSpec]:
    """Five-member panel used by the convergence checks."""
    return [
        TestFunctionSpec(family="polynomial", center=-2.0, width=1.5),
        TestFunctionSpec(family="polynomial", center=0.0, width=2.0),
        TestFunctionSpec(family="polynomial", center=2.0, width=1.5),
        TestFunctionSpec(family="gaussian", center=-1.0, width=0.7),
        TestFunctionSpec(family="gaussian", center=1.0, width=1.0),
    ]


class KppGridSpec(BaseModel):
    """Discretization of the KPP solver."""
    x_lo: float = Field(-20.0, description="Left end of the window")
    x_hi: float = Field(20.0, description="Right end of the window")
    h: float = Field(0.02, gt=0.0, description="Space step")
    tau: Optional[float] = Field(None, gt=0.0, description="Time step (defaults to 0.4 h^2 / gamma)")

    @model_validator(mode="after")
    def _check_window(self) -> "KppGridSpec":
        if self.x_hi <= self.x_lo:
            raise ValueError("x_hi must exceed x_lo")
        return self


# Experiment section schemas
class TransportWaveCase(BaseModel):
    """One (lambda, mu, nu) triple of the transport wave experiment."""
    lam: float
    mu: float = Field(..., gt=0.0)
    nu: float = Field(..., gt=0.0)


class WaveSpec(BaseModel):
    """Travelling-wave experiment settings."""
    transport_cases: List[TransportWaveCase] = Field(
        default_factory=lambda: [
            TransportWaveCase(lam=1.0, mu=1.0, nu=1.0),
            TransportWaveCase(lam=2.0, mu=1.0, nu=0.5),
            TransportWaveCase(lam=-1.0, mu=0.5, nu=2.0),
        ]
    )
    kappas: List[Optional[float]] = Field(
        default_factory=lambda: [None, 0.5],
        description="Lyapunov exponents of the KPP initial data (null = step data)",
    )
    speed_window: Tuple[float, float] = Field((20.0, 30.0), description="Time window of the speed fit")
    form_times: List[float] = Field(default_factory=lambda: [10.0, 20.0, 30.0])
    form_interval: Tuple[float, float] = (-5.0, 5.0)
    transport_step: float = Field(0.01, gt=0.0, description="Tabulation step of the transport profiles")
    kpp_grid: KppGridSpec = Field(
        default_factory=lambda: KppGridSpec(x_lo=-160.0, x_hi=40.0, h=0.05),
        description="KPP window wide enough for left-moving fronts up to the last time",
    )
    speed_samples: int = Field(41, ge=2, description="Front positions per speed fit")


class LongtimeSpec(BaseModel):
    """Fixed-N long-time experiment settings."""
    burn_in: float = Field(100.0, ge=0.0)
    sample: float = Field(1000.0, gt=0.0)
    batches: int = Field(20, ge=20)
    mixing_times: List[float] = Field(default_factory=lambda: [1.0, 5.0, 25.0])
    mixing_replicas: int = Field(1000, ge=200)
    spread_budget: int = Field(10, ge=1, description="Spacing of the maximally spread start")
    oracle_truncation: int = Field(200, ge=10)


class ExperimentKind(str, Enum):
    """Experiment suites."""
    HYDRO_TRANSPORT = "hydro_transport"
    HYDRO_KPP = "hydro_kpp"
    LONGTIME = "longtime"
    WAVES_TRANSPORT = "waves_transport"
    WAVES_KPP = "waves_kpp"
    MARTINGALE = "martingale"
    ORACLE_N2 = "oracle_n2"


class ExperimentConfig(BaseModel):
    """Experiment configuration loaded from JSON."""
    kind: ExperimentKind = Field(..., description="Experiment suite")
    params: ModelParams = Field(..., description="Model parameters (n_particles overridden by the sweep)")
    initial_profile: ProfileSpec = Field(default_factory=ProfileSpec)
    n_sweep: List[int] = Field(default_factory=list, description="Particle counts")
    time_points: List[float] = Field(default_factory=lambda: [1.0], description="Macroscopic time points")
    replicas: int = Field(20, ge=1)
    seed: Optional[int] = Field(None, ge=0, description="Base seed used when seeds is empty")
    seeds: List[int] = Field(default_factory=list, description="One seed per replica")
    output_dir: Optional[Path] = None
    window: Tuple[float, float] = Field((-6.0, 6.0), description="Spatial window of distances")
    test_panel: List[TestFunctionSpec] = Field(default_factory=default_test_panel)
    kpp_grid: KppGridSpec = Field(default_factory=KppGridSpec)
    waves: WaveSpec = Field(default_factory=WaveSpec)
    longtime: LongtimeSpec = Field(default_factory=LongtimeSpec)

    @model_validator(mode="after")
    def _check_kind(self) -> "ExperimentConfig":
        p = self.params
        if not self.seeds:
            base = 0 if self.seed is None else self.seed
            state = np.random.SeedSequence(base).generate_state(self.replicas, dtype=np.uint32)
            self.seeds = [int(s) for s in state]
        if len(self.seeds) < self.replicas:
            raise ValueError(f"seeds list has {len(self.seeds)} entries, need {self.replicas}")
        if self.window[1] <= self.window[0]:
            raise ValueError("window must be increasing")

        kind = self.kind
        if kind == ExperimentKind.HYDRO_TRANSPORT:
            if p.regime != Regime.TRANSPORT:
                raise ValueError("hydro_transport requires the transport regime")
            if p.alpha == p.beta:
                raise ValueError("hydro_transport requires alpha != beta")
        elif kind == ExperimentKind.HYDRO_KPP:
            if p.regime != Regime.DIFFUSIVE:
                raise ValueError("hydro_kpp requires the diffusive regime")
            if p.alpha != p.beta or p.alpha <= 0:
                raise ValueError("hydro_kpp requires alpha == beta > 0")
        elif kind == ExperimentKind.MARTINGALE:
            if p.regime == Regime.FIXED:
                raise ValueError("martingale requires the transport or diffusive regime")
            if p.regime == Regime.DIFFUSIVE and p.alpha != p.beta:
                raise ValueError("diffusive martingale runs require alpha == beta")
        elif kind == ExperimentKind.WAVES_KPP:
            if p.alpha != p.beta or p.alpha <= 0 or p.mu <= 0:
                raise ValueError("waves_kpp requires alpha == beta > 0 and mu > 0")
        elif kind == ExperimentKind.LONGTIME:
            if p.regime != Regime.FIXED:
                raise ValueError("longtime requires the fixed regime")
        elif kind == ExperimentKind.ORACLE_N2:
            if p.regime != Regime.FIXED or p.n_particles != 2:
                raise ValueError("oracle_n2 requires the fixed regime with n_particles = 2")

        if kind in (ExperimentKind.HYDRO_TRANSPORT, ExperimentKind.HYDRO_KPP, ExperimentKind.MARTINGALE):
            if not self.n_sweep:
                raise ValueError(f"{kind.value} requires a non-empty n_sweep")
            if any(n < 2 for n in self.n_sweep):
                raise ValueError("n_sweep entries must be >= 2")
        return self

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump."""
        payload = json.dumps(self.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# Result schemas
class ResultRecord(BaseModel):
    """One row of experiment output (long format)."""
    experiment_id: str
    config_hash: str
    seed: Optional[int] = None
    n: Optional[int] = None
    time: Optional[float] = None
    metric: str
    value: Optional[float] = Field(None, description="Measured value; None when not finite")
    ci_half_width: Optional[float] = None


class Expectations(BaseModel):
    """Calibration thresholds (not ground truth from the model's theory)."""
    label: str = "calibration"
    version: int = 1
    transport_l1_max: float = 0.05
    kpp_l1_max: float = 0.1
    martingale_var_slack: float = 2.0  # Var ratio between consecutive N within [r/slack, r*slack]
    transport_speed_abs_tol: float = 1e-3
    kpp_speed_rel_tol: float = 0.05
    oracle_rel_tol: float = 0.02
    weak_residual_max: float = 1e-6
    kpp_weak_residual_max: float = 1e-3  # numerical KPP field, bilinear in (t, x)
    tv_noise_factor: float = 1.0  # TV below factor * sqrt(states / replicas) counts as mixed


# API schemas
class ExperimentResponse(BaseModel):
    """Schema for experiment run response."""
    experiment_id: str
    config_hash: str
    records: List[ResultRecord] = []
    metadata: Dict = Field(default_factory=dict, description="Seeds, timings, block size")


class GapOracleResponse(BaseModel):
    """Schema for the N=2 gap oracle response."""
    alpha: float
    beta: float
    mu2: float
    truncation: int
    mean_gap: float
    mass_defect: float
    distribution: List[float] = []


class HealthResponse(BaseModel):
    """Schema for health check response."""
    status: str = Field(..., description="Service status")
    kernel: str = Field(..., description="Compiled simulation kernel status")
    timestamp: datetime = Field(default_factory=datetime.utcnow)
