"""Strang-splitting solver and travelling waves of u_t = gamma u_xx + mu (u^2 - u)."""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.integrate import solve_ivp

from app.errors import DomainError, SimulationError, StabilityError
from app.models import FrontTrack, KppSolution, Profile, TravellingWave
from app.schemas import KppGridSpec
from app.services.transport_service import fit_front_track, form_distance, front_position

logger = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-6
MONOTONE_CHECK_EVERY = 100
MONOTONE_TOL = 1e-12
SADDLE_OFFSET = 1e-8
DEFAULT_TAU_FRACTION = 0.4


@dataclass(frozen=True)
class KppGrid:
    """Uniform grid on [x_lo, x_hi] with Dirichlet values 1 (left) and 0 (right)."""

    x_lo: float
    x_hi: float
    h: float
    tau: float
    gamma: float

    def __post_init__(self):
        if self.x_hi <= self.x_lo or self.h <= 0 or self.tau <= 0:
            raise StabilityError("grid needs x_hi > x_lo, h > 0 and tau > 0")
        if self.gamma < 0:
            raise DomainError("gamma must be nonnegative")
        if self.gamma > 0 and self.tau > self.h**2 / (2.0 * self.gamma) * (1 + 1e-12):
            raise StabilityError(f"tau={self.tau} exceeds the explicit diffusion limit h^2/(2 gamma)={self.h**2 / (2 * self.gamma)}")

    @classmethod
    def build(cls, x_lo: float, x_hi: float, h: float, gamma: float, tau: Optional[float] = None) -> "KppGrid":
        if tau is None:
            tau = DEFAULT_TAU_FRACTION * h * h / gamma if gamma > 0 else h
        return cls(x_lo, x_hi, h, tau, gamma)

    @classmethod
    def from_spec(cls, spec: KppGridSpec, gamma: float) -> "KppGrid":
        return cls.build(spec.x_lo, spec.x_hi, spec.h, gamma, spec.tau)

    @property
    def nodes(self) -> np.ndarray:
        n = int(round((self.x_hi - self.x_lo) / self.h))
        return self.x_lo + self.h * np.arange(n + 1)


def reaction_map(u: np.ndarray, mu: float, s: float) -> np.ndarray:
    """Exact flow of u' = mu (u^2 - u) over time s."""
    decay = math.exp(-mu * s)
    return u * decay / (1.0 - u + u * decay)


class KppSolver:
    """Strang splitting: half reaction, explicit centered diffusion, half reaction."""

    def __init__(self, grid: KppGrid, mu: float, diffusion: bool = True):
        if mu < 0:
            raise DomainError("mu must be nonnegative")
        self.grid = grid
        self.mu = mu
        self.diffusion = diffusion
        self.x = grid.nodes
        self.boundary_contaminated = False

    def _diffuse(self, u: np.ndarray, tau: float) -> np.ndarray:
        r = self.grid.gamma * tau / self.grid.h**2
        out = np.empty_like(u)
        out[1:-1] = u[1:-1] + r * (u[2:] - 2.0 * u[1:-1] + u[:-2])
        out[0] = 1.0
        out[-1] = 0.0
        return out

    def step(self, u: np.ndarray, tau: float) -> np.ndarray:
        u = reaction_map(u, self.mu, 0.5 * tau)
        if self.diffusion:
            u = self._diffuse(u, tau)
        return reaction_map(u, self.mu, 0.5 * tau)

    def _check_state(self, u: np.ndarray, t: float, monotone: bool) -> None:
        if np.any(u < -MONOTONE_TOL) or np.any(u > 1.0 + MONOTONE_TOL):
            logger.error(f"KPP field left [0, 1] at t={t}")
            raise SimulationError(f"KPP field left [0, 1] at t={t}")
        if monotone and np.any(np.diff(u) > MONOTONE_TOL):
            logger.error(f"KPP field lost monotonicity at t={t}")
            raise SimulationError(f"KPP field lost monotonicity at t={t}")

    def _check_boundary(self, u: np.ndarray, t: float) -> None:
        if not self.diffusion:
            return
        if u[1] < 1.0 - BOUNDARY_TOL or u[-2] > BOUNDARY_TOL:
            if not self.boundary_contaminated:
                logger.warning(f"Boundary contamination at t={t:.4g}: u[1]={u[1]:.3g}, u[-2]={u[-2]:.3g}")
            self.boundary_contaminated = True

    def solve(self, psi: Profile, T: float, snapshot_times: Iterable[float] = ()) -> KppSolution:
        """Evolve psi to time T, storing the field at t=0, at each snapshot time and at T."""
        if T < 0:
            raise DomainError("T must be nonnegative")
        u = np.asarray(psi(self.x), dtype=float).copy()
        if self.diffusion:
            u[0], u[-1] = 1.0, 0.0
        monotone = bool(np.all(np.diff(u) <= MONOTONE_TOL))
        stops = sorted({float(s) for s in snapshot_times if 0 < s < T} | {float(T)})
        times = [0.0]
        values = [u.copy()]
        t = 0.0
        n_steps = 0
        for stop in stops:
            if stop <= t:
                continue
            count = max(1, int(math.ceil((stop - t) / self.grid.tau - 1e-9)))
            tau = (stop - t) / count
            for k in range(count):
                u = self.step(u, tau)
                n_steps += 1
                if n_steps % MONOTONE_CHECK_EVERY == 0:
                    self._check_state(u, t + (k + 1) * tau, monotone)
            t = stop
            self._check_state(u, t, monotone)
            self._check_boundary(u, t)
            times.append(t)
            values.append(u.copy())
        logger.debug(f"KPP solve: {n_steps} steps on {self.x.size} nodes up to T={T}")
        return KppSolution(
            times=np.asarray(times),
            grid=self.x,
            values=np.vstack(values),
            gamma=self.grid.gamma,
            mu=self.mu,
            boundary_contaminated=self.boundary_contaminated,
        )


def kpp_solve(
    psi: Profile,
    gamma: float,
    mu: float,
    T: float,
    grid: Optional[KppGrid] = None,
    snapshot_times: Iterable[float] = (),
    diffusion: bool = True,
) -> KppSolution:
    """
    Numerical solution of the KPP Cauchy problem with data psi.

    Args:
        psi: Initial profile
        gamma: Diffusion coefficient
        mu: Reaction rate
        T: Final time
        grid: Discretization; the default KppGridSpec when omitted
        snapshot_times: Extra times at which the field is stored
        diffusion: False runs the reaction step only

    Returns:
        KppSolution with snapshots at 0, each snapshot time in (0, T) and T
    """
    if grid is None:
        grid = KppGrid.from_spec(KppGridSpec(), gamma)
    if abs(grid.gamma - gamma) > 1e-15:
        raise DomainError(f"grid built for gamma={grid.gamma}, solver asked for {gamma}")
    return KppSolver(grid, mu, diffusion=diffusion).solve(psi, T, snapshot_times)


def minimal_speed(gamma: float, mu: float) -> float:
    """v* = -sqrt(4 gamma mu)."""
    if gamma <= 0 or mu <= 0:
        raise DomainError("gamma and mu must be positive")
    return -math.sqrt(4.0 * gamma * mu)


def wave_lyapunov(v: float, gamma: float, mu: float) -> float:
    """kappa(v) = (-v - sqrt(v^2 - 4 gamma mu)) / (2 gamma) for v <= v*."""
    v_star = minimal_speed(gamma, mu)
    if v > v_star * (1 - 1e-12):
        raise DomainError(f"no monotone wave with speed {v} > v*={v_star}")
    disc = max(v * v - 4.0 * gamma * mu, 0.0)
    return (-v - math.sqrt(disc)) / (2.0 * gamma)


def predicted_speed(kappa: float, gamma: float, mu: float) -> float:
    """Selected front speed for data with Lyapunov exponent kappa (math.inf for steep data)."""
    if kappa <= 0:
        raise DomainError("kappa must be positive")
    if kappa >= math.sqrt(mu / gamma):
        return minimal_speed(gamma, mu)
    return -(gamma * kappa + mu / kappa)


def kpp_wave_profile(v: float, gamma: float, mu: float, step: float = 0.01, max_span: float = 2000.0) -> TravellingWave:
    """Monotone travelling wave of speed v: gamma w'' + v w' + mu (w^2 - w) = 0, w(0) = 1/2.

    The heteroclinic orbit is followed backward in x from the saddle at w = 0 along its stable
    eigenvector until 1 - w falls below 1e-13; the profile is then shifted to w(0) = 1/2.
    """
    v_star = minimal_speed(gamma, mu)
    if v > v_star * (1 - 1e-12):
        raise DomainError(f"speed {v} above v*={v_star}: the tail oscillates")
    rate = (-v - math.sqrt(v * v + 4.0 * gamma * mu)) / (2.0 * gamma)

    def rhs(_x, y):
        w, dw = y
        return [dw, (-v * dw + mu * w * (1.0 - w)) / gamma]

    def near_one(_x, y):
        return 1.0 - y[0] - 1e-13

    near_one.terminal = True
    near_one.direction = -1

    start = [SADDLE_OFFSET, SADDLE_OFFSET * rate]
    sol = solve_ivp(
        rhs,
        (0.0, -max_span),
        start,
        method="DOP853",
        rtol=1e-12,
        atol=1e-16,
        dense_output=True,
        events=near_one,
    )
    if sol.status < 0:
        raise SimulationError(f"wave integration failed: {sol.message}")
    x_end = float(sol.t[-1])
    half = optimize.brentq(lambda x: sol.sol(x)[0] - 0.5, x_end, 0.0, xtol=1e-14)

    grid = np.arange(math.ceil((x_end - half) / step), math.floor((0.0 - half) / step) + 1) * step
    states = sol.sol(grid + half)
    values = np.clip(states[0], 0.0, 1.0)
    derivative = states[1]
    if np.any(np.diff(values) > MONOTONE_TOL):
        raise SimulationError("computed wave is not monotone")
    logger.debug(f"KPP wave v={v}: span [{grid[0]:.1f}, {grid[-1]:.1f}], {grid.size} nodes")
    return TravellingWave(speed=v, mu=mu, grid=grid, values=values, derivative=derivative, gamma=gamma)


def wave_ode_residual(wave: TravellingWave) -> np.ndarray:
    """gamma w'' + v w' + mu (w^2 - w) on the interior nodes, w'' by a five-point stencil."""
    h = float(wave.grid[1] - wave.grid[0])
    w = wave.values
    d2 = (-w[4:] + 16.0 * w[3:-1] - 30.0 * w[2:-2] + 16.0 * w[1:-3] - w[:-4]) / (12.0 * h * h)
    inner = w[2:-2]
    return wave.gamma * d2 + wave.speed * wave.derivative[2:-2] + wave.mu * (inner * inner - inner)


def measure_front_speed(solution: KppSolution, window: Tuple[float, float]) -> FrontTrack:
    """Least-squares slope of r(t) over the snapshots inside the time window."""
    mask = (solution.times >= window[0] - 1e-12) & (solution.times <= window[1] + 1e-12)
    times = solution.times[mask]
    if times.size < 2:
        raise ValueError(f"fewer than two snapshots in the time window {window}")
    positions = []
    for t, values in zip(times, solution.values[mask]):
        positions.append(front_position(values, solution.grid))
    return fit_front_track(times, positions)


def kpp_form_distance(
    solution: KppSolution,
    t: float,
    wave: TravellingWave,
    interval: Tuple[float, float] = (-5.0, 5.0),
) -> float:
    """sup over the interval of |u(t, x + r(t)) - w(x)| for a KPP snapshot."""
    values = solution.snapshot(t)
    r = front_position(values, solution.grid)
    return form_distance(
        lambda x: np.interp(x, solution.grid, values, left=1.0, right=0.0),
        r,
        wave,
        interval,
    )


def speed_snapshot_times(window: Tuple[float, float], spacing: float = 0.25) -> Sequence[float]:
    """Evenly spaced snapshot times covering a fit window."""
    count = int(round((window[1] - window[0]) / spacing))
    return list(np.linspace(window[0], window[1], count + 1))
