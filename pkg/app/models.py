"""Runtime domain types for the particle system, its fields and the limit PDEs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from app.errors import ProfileError, SimulationError

ArrayFunc = Callable[[np.ndarray], np.ndarray]

PROFILE_TAIL_TOL = 1e-6
MONOTONE_TOL = 1e-12


# Particle system
@dataclass
class ParticleState:
    """Positions of the N particles and the absolute simulation time."""

    positions: np.ndarray
    time: float = 0.0
    event_count: int = 0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.int64)
        if self.positions.ndim != 1 or self.positions.size == 0:
            raise SimulationError("positions must be a nonempty vector")
        if self.time < 0:
            raise SimulationError("time must be nonnegative")

    @property
    def n(self) -> int:
        return int(self.positions.size)

    def copy(self) -> "ParticleState":
        return ParticleState(self.positions.copy(), self.time, self.event_count)


class EventType(IntEnum):
    JUMP_RIGHT = 0
    JUMP_LEFT = 1
    INTERACTION = 2


@dataclass(frozen=True)
class EventKind:
    """One event of the chain. For interactions, applied is True iff x_i > x_j held."""

    tag: EventType
    i: int
    time: float
    j: Optional[int] = None
    applied: bool = True


@dataclass
class Trajectory:
    """Event-resolved path: initial configuration plus every position change.

    Non-applied interactions change nothing and are not stored.
    """

    initial_positions: np.ndarray
    t_start: float
    t_end: float
    event_times: Optional[np.ndarray] = None
    actors: Optional[np.ndarray] = None
    new_positions: Optional[np.ndarray] = None

    @property
    def event_resolved(self) -> bool:
        return self.event_times is not None and self.actors is not None and self.new_positions is not None

    @property
    def n_changes(self) -> int:
        return 0 if self.event_times is None else int(self.event_times.size)

    def positions_at(self, t: float) -> np.ndarray:
        """Configuration at absolute time t (replays the stored changes)."""
        x = np.array(self.initial_positions, dtype=np.int64)
        if not self.event_resolved:
            raise SimulationError("trajectory has no event record")
        stop = int(np.searchsorted(self.event_times, t, side="right"))
        for actor, pos in zip(self.actors[:stop], self.new_positions[:stop]):
            x[actor] = pos
        return x


@dataclass
class SimulationResult:
    """Outcome of simulate_until."""

    state: ParticleState
    n_events: int
    truncated: bool = False
    frozen: bool = False
    trajectory: Optional[Trajectory] = None


# Empirical fields
@dataclass(frozen=True)
class TailField:
    """Empirical tail xi_{N,k} = #{i : x_i >= k} / N, stored as sorted positions."""

    breakpoints: np.ndarray
    n: int

    def value(self, k) -> np.ndarray:
        """xi_{N,k} at integer sites k."""
        k = np.asarray(k)
        below = np.searchsorted(self.breakpoints, k, side="left")
        return (self.n - below) / self.n

    def rescaled(self, x) -> np.ndarray:
        """zeta_{N,x} = xi_{N,[Nx]}."""
        return self.value(np.floor(np.asarray(x, dtype=float) * self.n).astype(np.int64))

    @property
    def min_position(self) -> int:
        return int(self.breakpoints[0])

    @property
    def max_position(self) -> int:
        return int(self.breakpoints[-1])

    def check_invariants(self) -> None:
        """Raise SimulationError unless the field lies in H_N."""
        lo, hi = self.min_position, self.max_position
        ks = np.arange(lo - 1, hi + 2)
        xi = self.value(ks)
        if np.any(np.diff(xi) > 0):
            raise SimulationError("tail field is not nonincreasing")
        counts = xi * self.n
        if not np.allclose(counts, np.round(counts), atol=1e-9):
            raise SimulationError("tail field values are not multiples of 1/N")
        if xi[0] != 1.0 or xi[1] != 1.0 or xi[-1] != 0.0:
            raise SimulationError("tail field limits are wrong")


class TestFunctionFamily(str, Enum):
    __test__ = False

    GAUSSIAN_BUMP = "gaussian"
    POLYNOMIAL_BUMP = "polynomial"


GAUSSIAN_SUPPORT_WIDTHS = 12.0


@dataclass(frozen=True)
class TestFunction:
    """Smooth rapidly decaying test function with closed-form first and second derivatives.

    POLYNOMIAL_BUMP is the compactly supported exp(-1/(1-s^2)); GAUSSIAN_BUMP is exp(-s^2/2),
    with s = (x - center) / width.
    """

    __test__ = False

    family: TestFunctionFamily
    center: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("width must be positive")
        object.__setattr__(self, "family", TestFunctionFamily(self.family))

    @classmethod
    def from_spec(cls, spec) -> "TestFunction":
        return cls(TestFunctionFamily(spec.family), spec.center, spec.width)

    @property
    def support(self) -> tuple[float, float]:
        """Support (effective support for the Gaussian, where f < 1e-31)."""
        half = self.width if self.family == TestFunctionFamily.POLYNOMIAL_BUMP else GAUSSIAN_SUPPORT_WIDTHS * self.width
        return self.center - half, self.center + half

    def _s(self, x):
        return (np.asarray(x, dtype=float) - self.center) / self.width

    def _bump_parts(self, s):
        inside = np.abs(s) < 1.0
        s_in = np.where(inside, s, 0.0)
        q = 1.0 - s_in * s_in
        f = np.where(inside, np.exp(-1.0 / q), 0.0)
        g1 = -2.0 * s_in / q**2
        g2 = -2.0 / q**2 - 8.0 * s_in**2 / q**3
        return inside, f, g1, g2

    def value(self, x):
        s = self._s(x)
        if self.family == TestFunctionFamily.GAUSSIAN_BUMP:
            return np.exp(-0.5 * s * s)
        return self._bump_parts(s)[1]

    __call__ = value

    def d1(self, x):
        s = self._s(x)
        if self.family == TestFunctionFamily.GAUSSIAN_BUMP:
            return -s * np.exp(-0.5 * s * s) / self.width
        inside, f, g1, _ = self._bump_parts(s)
        return np.where(inside, f * g1, 0.0) / self.width

    def d2(self, x):
        s = self._s(x)
        if self.family == TestFunctionFamily.GAUSSIAN_BUMP:
            return (s * s - 1.0) * np.exp(-0.5 * s * s) / self.width**2
        inside, f, g1, g2 = self._bump_parts(s)
        return np.where(inside, f * (g1 * g1 + g2), 0.0) / self.width**2


@dataclass(frozen=True)
class SpaceTimeTestFunction:
    """f(t, x) = phi(t) g(x) with phi(t) = exp(1 - 1/(1 - (t/horizon)^2)) on [0, horizon).

    phi(0) = 1 and phi vanishes with all derivatives at t = horizon.
    """

    __test__ = False

    space: TestFunction
    horizon: float

    def _phi(self, t):
        r = np.asarray(t, dtype=float) / self.horizon
        inside = np.abs(r) < 1.0
        r_in = np.where(inside, r, 0.0)
        q = 1.0 - r_in * r_in
        phi = np.where(inside, np.exp(1.0 - 1.0 / q), 0.0)
        dphi = np.where(inside, phi * (-2.0 * r_in / q**2) / self.horizon, 0.0)
        return phi, dphi

    def value(self, t, x):
        return self._phi(t)[0] * self.space.value(x)

    def dt(self, t, x):
        return self._phi(t)[1] * self.space.value(x)

    def dx(self, t, x):
        return self._phi(t)[0] * self.space.d1(x)

    def dxx(self, t, x):
        return self._phi(t)[0] * self.space.d2(x)


# Macroscopic profiles
class Profile:
    """Nonincreasing [0,1]-valued profile in H(R).

    Always carries a tabulation on a uniform grid. Analytic families also carry an exact
    evaluator (and a stable 1 - psi); pure tabulations evaluate by linear interpolation,
    which is monotone. Outside the grid the tail limits 1 and 0 are returned.
    """

    def __init__(
        self,
        grid: np.ndarray,
        values: np.ndarray,
        evaluator: Optional[ArrayFunc] = None,
        complement: Optional[ArrayFunc] = None,
        breakpoints: Sequence[float] = (),
    ):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid.shape != values.shape:
            raise ProfileError("profile needs matching 1-d grid and values with >= 2 nodes")
        if np.any(np.diff(grid) <= 0):
            raise ProfileError("profile grid must be strictly increasing")
        if np.any(values < -MONOTONE_TOL) or np.any(values > 1.0 + MONOTONE_TOL):
            raise ProfileError("profile values must lie in [0, 1]")
        if np.any(np.diff(values) > MONOTONE_TOL):
            raise ProfileError("profile must be nonincreasing")
        if values[0] < 1.0 - PROFILE_TAIL_TOL or values[-1] > PROFILE_TAIL_TOL:
            raise ProfileError(
                f"profile tails not reached on the grid: psi(x_lo)={values[0]:.3g}, psi(x_hi)={values[-1]:.3g}"
            )
        self.grid = grid
        self.values = np.clip(values, 0.0, 1.0)
        self._evaluator = evaluator
        self._complement = complement
        self.breakpoints = tuple(float(b) for b in breakpoints)

    @property
    def x_lo(self) -> float:
        return float(self.grid[0])

    @property
    def x_hi(self) -> float:
        return float(self.grid[-1])

    @property
    def is_analytic(self) -> bool:
        return self._evaluator is not None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self._evaluator is not None:
            return np.clip(self._evaluator(x), 0.0, 1.0)
        return np.interp(x, self.grid, self.values, left=1.0, right=0.0)

    def one_minus(self, x):
        """1 - psi(x), computed without cancellation when an analytic form is known."""
        if self._complement is not None:
            return np.clip(self._complement(np.asarray(x, dtype=float)), 0.0, 1.0)
        return 1.0 - self(x)

    # Constructors
    @classmethod
    def tabulated(cls, grid, values) -> "Profile":
        return cls(grid, values)

    @classmethod
    def from_function(
        cls,
        func: ArrayFunc,
        x_lo: float,
        x_hi: float,
        step: float,
        complement: Optional[ArrayFunc] = None,
        breakpoints: Sequence[float] = (),
        max_span: float = 1e5,
    ) -> "Profile":
        """Tabulate an analytic profile, widening the window until both tails are reached."""
        lo, hi = float(x_lo), float(x_hi)
        with np.errstate(over="ignore"):
            while float(func(np.array([lo]))[0]) < 1.0 - PROFILE_TAIL_TOL:
                lo -= max(hi - lo, 1.0)
                if hi - lo > max_span:
                    raise ProfileError("left limit 1 not reached")
            while float(func(np.array([hi]))[0]) > PROFILE_TAIL_TOL:
                hi += max(hi - lo, 1.0)
                if hi - lo > max_span:
                    raise ProfileError("right limit 0 not reached")
            n = int(np.ceil((hi - lo) / step)) + 1
            grid = lo + step * np.arange(n)
            return cls(grid, func(grid), evaluator=func, complement=complement, breakpoints=breakpoints)

    @classmethod
    def logistic(cls, nu: float, shift: float = 0.0, step: float = 0.01) -> "Profile":
        """psi(x) = 1 / (1 + exp(nu (x - shift)))."""
        if nu <= 0:
            raise ProfileError("logistic exponent must be positive")
        half = 16.0 / nu
        return cls.from_function(
            lambda x: expit(-nu * (x - shift)),
            shift - half,
            shift + half,
            min(step, half / 200.0),
            complement=lambda x: expit(nu * (x - shift)),
        )

    @classmethod
    def skewed_logistic(cls, nu: float, skew: float = 1.0, shift: float = 0.0, step: float = 0.01) -> "Profile":
        """psi(x) = 1 / (1 + e^z + skew e^{2z}), z = nu (x - shift); 1 - psi ~ e^{nu x} at -inf."""
        if nu <= 0 or skew < 0:
            raise ProfileError("skewed logistic needs nu > 0 and skew >= 0")

        def _denominator_tail(x):
            z = np.clip(nu * (x - shift), -700.0, 350.0)
            return np.exp(z) + skew * np.exp(2.0 * z)

        half = 16.0 / nu
        return cls.from_function(
            lambda x: 1.0 / (1.0 + _denominator_tail(x)),
            shift - half,
            shift + half,
            min(step, half / 200.0),
            complement=lambda x: _denominator_tail(x) / (1.0 + _denominator_tail(x)),
        )

    @classmethod
    def step(cls, b: float = 0.0, step: float = 0.01) -> "Profile":
        """Right-continuous indicator I(x < b)."""
        return cls.from_function(
            lambda x: (np.asarray(x) < b).astype(float),
            b - 1.0,
            b + 1.0,
            step,
            complement=lambda x: (np.asarray(x) >= b).astype(float),
            breakpoints=(b,),
        )

    @classmethod
    def from_spec(cls, spec) -> "Profile":
        if spec.family == "logistic":
            return cls.logistic(spec.nu, spec.shift)
        if spec.family == "skewed_logistic":
            return cls.skewed_logistic(spec.nu, spec.skew, spec.shift)
        if spec.family == "step":
            return cls.step(spec.shift)
        raise ProfileError(f"unknown profile family {spec.family}")


@dataclass
class FrontTrack:
    """Front positions r(t), u(t, r(t)) = 1/2, with a least-squares speed."""

    times: np.ndarray
    positions: np.ndarray
    speed: float
    intercept: float
    residual: float


@dataclass
class LyapunovFit:
    """Least-squares slope of log(1 - psi) on a far-left window."""

    exponent: float
    intercept: float
    residual: float


@dataclass
class TravellingWave:
    """Tabulated travelling wave w with w(0) = 1/2 and speed v."""

    speed: float
    mu: float
    grid: np.ndarray
    values: np.ndarray
    derivative: np.ndarray
    lam: Optional[float] = None
    gamma: Optional[float] = None

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.grid, self.values, left=1.0, right=0.0)

    def as_profile(self) -> Profile:
        return Profile.tabulated(self.grid, self.values)


@dataclass
class KppSolution:
    """Snapshots of the KPP field on the solver grid."""

    times: np.ndarray
    grid: np.ndarray
    values: np.ndarray  # shape (len(times), len(grid))
    gamma: float
    mu: float
    boundary_contaminated: bool = False

    def snapshot(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"no snapshot at t={t}")
        return self.values[idx]

    def profile_at(self, t: float) -> Profile:
        return Profile.tabulated(self.grid, self.snapshot(t))

    def field(self, t, x):
        """Bilinear interpolation of the space-time field."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        t, x = np.broadcast_arrays(t, x)
        it = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        t0, t1 = self.times[it], self.times[it + 1]
        w = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        out = np.empty(t.shape)
        flat_it, flat_x, flat_w, flat_out = it.ravel(), x.ravel(), w.ravel(), out.reshape(-1)
        for idx in np.unique(flat_it):
            sel = flat_it == idx
            u0 = np.interp(flat_x[sel], self.grid, self.values[idx], left=1.0, right=0.0)
            u1 = np.interp(flat_x[sel], self.grid, self.values[idx + 1], left=1.0, right=0.0)
            flat_out[sel] = (1.0 - flat_w[sel]) * u0 + flat_w[sel] * u1
        return out


@dataclass
class MartingaleSeries:
    """W_{f,N} and V_{f,N} on a macroscopic time grid."""

    times: np.ndarray
    w: np.ndarray
    v: np.ndarray
    quadratic_compensator: np.ndarray


# Long-time analysis
@dataclass(frozen=True)
class RelativeState:
    """Configuration relative to its minimum; min(y) = 0."""

    y: np.ndarray


@dataclass
class GapOracleResult:
    """Stationary law of the N = 2 gap chain truncated at K."""

    distribution: np.ndarray
    mean_gap: float
    truncation: int
    mass_defect: float


@dataclass
class StationaryGapEstimate:
    """Time-average of the all-pairs mean distance with a batch-means interval."""

    mean: float
    ci_half_width: float
    batch_means: np.ndarray = field(repr=False)


@dataclass
class ComSpeedEstimate:
    """Center-of-mass slope and time-averaged drift over the same window."""

    slope: float
    slope_ci: float
    drift_average: float
    drift_ci: float
    gap: StationaryGapEstimate


@dataclass
class MixingProfile:
    """Total-variation distances between two initial laws along time."""

    times: np.ndarray
    tv: np.ndarray
    slope: float
    intercept: float
    residual: float
    n_states: int = 1
    replicas: int = 1

    @property
    def noise_floor(self) -> float:
        """sqrt(K / replicas): size of the TV between two samples of one law over K cells."""
        return math.sqrt(self.n_states / self.replicas)
