"""Exact continuous-time simulation of the N-particle rollback system."""

import logging
import math
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import stats

from app.config import settings
from app.errors import ProfileError, SimulationError
from app.models import (
    EventKind,
    EventType,
    ParticleState,
    Profile,
    SimulationResult,
    Trajectory,
)
from app.schemas import ModelParams, Regime
from app.services import kernels

logger = logging.getLogger(__name__)

_EMPTY_F = np.empty(0, dtype=np.float64)
_EMPTY_I = np.empty(0, dtype=np.int64)
MAX_BRACKET_WIDENINGS = 20


def effective_interaction_rate(params: ModelParams) -> float:
    """Interaction rate mu_N per particle for the parameter regime."""
    n = float(params.n_particles)
    if params.regime == Regime.TRANSPORT:
        return params.mu / n
    if params.regime == Regime.DIFFUSIVE:
        return params.mu / (n * n)
    return float(params.mu_n)


def total_event_rate(params: ModelParams) -> float:
    """Aggregated clock intensity N (alpha + beta + mu_N)."""
    return params.n_particles * (params.alpha + params.beta + effective_interaction_rate(params))


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for a (seed, keys...) task."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(keys))))


class Observer(Protocol):
    """Receives (state, event) at every event and (state, None) at sampling times.

    Observers that set every_event = False are only called at sampling times, which lets
    the simulator process events in bulk in between. The state is live; copy what you keep.
    """

    every_event: bool

    def __call__(self, state: ParticleState, event: Optional[EventKind]) -> None: ...


class EventStream:
    """Block-wise random numbers consumed by the event kernel."""

    def __init__(self, n: int, rng: np.random.Generator, total_rate: float, block_size: int):
        self.n = n
        self.rng = rng
        self.total_rate = total_rate
        self.block_size = block_size
        self.cursor = 0
        self.waits = _EMPTY_F
        self.actors = _EMPTY_I
        self.uniforms = _EMPTY_F
        self.partners = _EMPTY_I

    @property
    def exhausted(self) -> bool:
        return self.cursor >= self.waits.shape[0]

    def refill(self) -> None:
        size = self.block_size
        self.waits = self.rng.standard_exponential(size) / self.total_rate
        self.actors = self.rng.integers(0, self.n, size, dtype=np.int64)
        self.uniforms = self.rng.random(size)
        self.partners = self.rng.integers(0, self.n, size, dtype=np.int64)
        self.cursor = 0


class _Recorder:
    """Growable buffers for the event record."""

    def __init__(self, capacity: int = 1 << 16):
        self.times = np.empty(capacity, dtype=np.float64)
        self.actors = np.empty(capacity, dtype=np.int64)
        self.positions = np.empty(capacity, dtype=np.int64)
        self.size = 0

    def ensure_room(self) -> None:
        if self.size < self.times.shape[0]:
            return
        capacity = 2 * self.times.shape[0]
        for name in ("times", "actors", "positions"):
            old = getattr(self, name)
            new = np.empty(capacity, dtype=old.dtype)
            new[: self.size] = old[: self.size]
            setattr(self, name, new)


_EVENT_TAGS = {
    kernels.CODE_RIGHT: (EventType.JUMP_RIGHT, True),
    kernels.CODE_LEFT: (EventType.JUMP_LEFT, True),
    kernels.CODE_INTERACTION_APPLIED: (EventType.INTERACTION, True),
    kernels.CODE_INTERACTION_SKIPPED: (EventType.INTERACTION, False),
}


class ParticleSimulator:
    """Gillespie simulator: one aggregated exponential clock plus a categorical event draw.

    The acting particle is uniform on {1..N}; the event is a right jump, left jump or
    interaction with probabilities alpha : beta : mu_N; the partner j is uniform on {1..N}
    (j = i allowed, a no-op), and x_i -> x_j happens iff x_i > x_j.
    """

    def __init__(
        self,
        params: ModelParams,
        state: ParticleState,
        rng: np.random.Generator,
        block_size: Optional[int] = None,
        event_budget: Optional[int] = None,
    ):
        if state.n != params.n_particles:
            raise SimulationError(f"state has {state.n} particles, params expect {params.n_particles}")
        self.params = params
        self.state = state
        self.mu_n = effective_interaction_rate(params)
        self.total_rate = total_event_rate(params)
        self.event_budget = event_budget or settings.event_budget
        self.stream = EventStream(state.n, rng, self.total_rate, block_size or settings.rng_block_size)
        self._last_time = state.time
        if self.total_rate > 0:
            per_particle = params.alpha + params.beta + self.mu_n
            self._p_right = params.alpha / per_particle
            self._p_left = (params.alpha + params.beta) / per_particle
        else:
            self._p_right = self._p_left = 1.0

    @property
    def frozen(self) -> bool:
        """True when every clock has zero intensity."""
        return self.total_rate <= 0

    def _run_kernel(self, t_end: float, max_events: int, recorder: Optional[_Recorder]):
        stream = self.stream
        if stream.exhausted:
            stream.refill()
        if recorder is not None:
            recorder.ensure_room()
            rec = (recorder.times, recorder.actors, recorder.positions, recorder.size)
        else:
            rec = (_EMPTY_F, _EMPTY_I, _EMPTY_I, 0)
        out = kernels.advance_events(
            self.state.positions,
            stream.waits,
            stream.actors,
            stream.uniforms,
            stream.partners,
            stream.cursor,
            self._last_time,
            t_end,
            max_events,
            self._p_right,
            self._p_left,
            *rec,
        )
        cursor, last_time, n_events, n_recorded, status, code, actor, partner = out
        stream.cursor = cursor
        self._last_time = last_time
        if recorder is not None:
            recorder.size += n_recorded
        if n_events:
            self.state.time = last_time
            self.state.event_count += n_events
        if status == kernels.STATUS_OVERFLOW:
            logger.error(f"Position overflow at t={last_time} for particle {actor}")
            raise SimulationError("64-bit position overflow")
        return n_events, status, code, actor, partner

    def _event_from(self, code: int, actor: int, partner: int) -> EventKind:
        tag, applied = _EVENT_TAGS[code]
        j = partner if tag == EventType.INTERACTION else None
        return EventKind(tag=tag, i=actor, time=self.state.time, j=j, applied=applied)

    def step(self) -> Tuple[ParticleState, float, Optional[EventKind]]:
        """Advance by exactly one event; returns (state, dt, event).

        Frozen dynamics return (state, inf, None) without changing the state.
        """
        if self.frozen:
            return self.state, math.inf, None
        t_before = self.state.time
        while True:
            n_events, status, code, actor, partner = self._run_kernel(math.inf, 1, None)
            if n_events:
                return self.state, self.state.time - t_before, self._event_from(code, actor, partner)

    def simulate_until(
        self,
        t_end: float,
        observers: Sequence[Observer] = (),
        sample_times: Iterable[float] = (),
        record: bool = False,
        max_events: Optional[int] = None,
    ) -> SimulationResult:
        """Apply events until absolute time t_end.

        Observers receive every event (unless every_event is False) and every sampling time
        in [state.time, t_end]. With record=True the result carries an event-resolved
        Trajectory. Hitting the event cap returns a truncated result at the last event time.
        """
        state = self.state
        if t_end < state.time:
            raise ValueError(f"t_end={t_end} precedes current time {state.time}")
        budget = max_events if max_events is not None else self.event_budget
        per_event = [o for o in observers if getattr(o, "every_event", True)]
        samples = sorted(float(s) for s in sample_times if state.time <= s <= t_end)
        initial = state.positions.copy()
        t_start = state.time
        recorder = _Recorder() if record else None
        n_total = 0
        truncated = False

        if self.frozen:
            logger.warning("All rates are zero: dynamics frozen")

        targets = [(s, True) for s in samples] + [(t_end, False)]
        for target, is_sample in targets:
            if not self.frozen:
                while True:
                    remaining = budget - n_total
                    if remaining <= 0:
                        truncated = True
                        break
                    cap = 1 if per_event else remaining
                    n_events, status, code, actor, partner = self._run_kernel(target, cap, recorder)
                    n_total += n_events
                    if per_event and n_events:
                        event = self._event_from(code, actor, partner)
                        for observer in per_event:
                            observer(state, event)
                    if status == kernels.STATUS_REACHED_END:
                        break
            if truncated:
                logger.warning(f"Event budget {budget} exhausted at t={state.time:.6g} before t_end={t_end}")
                break
            state.time = target
            if is_sample:
                for observer in observers:
                    observer(state, None)

        trajectory = None
        if recorder is not None:
            trajectory = Trajectory(
                initial_positions=initial,
                t_start=t_start,
                t_end=state.time,
                event_times=recorder.times[: recorder.size].copy(),
                actors=recorder.actors[: recorder.size].copy(),
                new_positions=recorder.positions[: recorder.size].copy(),
            )
        return SimulationResult(
            state=state,
            n_events=n_total,
            truncated=truncated,
            frozen=self.frozen,
            trajectory=trajectory,
        )


def _quantile_bracket(psi: Profile, n: int, p_max: float, p_min: float) -> Tuple[int, int]:
    """Sites [k_lo, k_hi] with psi(k_lo/n) > p_max and psi(k_hi/n) <= p_min.

    Starts from the tabulation window and widens by its own width on each failing side.
    """
    k_lo = int(math.floor(n * psi.x_lo)) - 1
    k_hi = int(math.ceil(n * psi.x_hi)) + 1
    for _ in range(MAX_BRACKET_WIDENINGS):
        left_ok = float(psi(np.array([k_lo / n]))[0]) > p_max
        right_ok = float(psi(np.array([k_hi / n]))[0]) <= p_min
        if left_ok and right_ok:
            return k_lo, k_hi
        width = k_hi - k_lo
        if not left_ok:
            k_lo -= width
        if not right_ok:
            k_hi += width
    raise ProfileError(f"no lattice bracket for the quantiles of {n} particles")


def init_from_profile(psi: Profile, n: int) -> np.ndarray:
    """Deterministic quantile placement of n particles for the profile psi.

    x_i = max{k : psi(k/n) > (i - 1/2)/n}, so that xi_{n,k}(0) is psi(k/n) rounded to the
    lattice {0, 1/n, ..., 1}. This is the ceil(n G(p)) placement shifted by at most one site
    (G the generalized inverse), and puts I(x < b) strictly left of b.

    Args:
        psi: Initial profile in H
        n: Number of particles

    Returns:
        int64 positions, nonincreasing in the particle index
    """
    if n < 1:
        raise ValueError("need at least one particle")
    p = (np.arange(1, n + 1) - 0.5) / n
    k_lo, k_hi = _quantile_bracket(psi, n, float(p[-1]), float(p[0]))
    ks = np.arange(k_lo, k_hi + 1, dtype=np.int64)
    vals = psi(ks / n)
    count = np.searchsorted(-vals, -p, side="left")
    return (k_lo + count - 1).astype(np.int64)


class _EventCounter:
    every_event = True

    def __init__(self, t0: float, width: float, n_windows: int):
        self.t0 = t0
        self.width = width
        self.counts = np.zeros(n_windows, dtype=np.int64)

    def __call__(self, state: ParticleState, event: Optional[EventKind]) -> None:
        if event is None:
            return
        idx = int((event.time - self.t0) // self.width)
        if 0 <= idx < self.counts.size:
            self.counts[idx] += 1


def poisson_window_test(
    params: ModelParams,
    positions: np.ndarray,
    window: float,
    n_windows: int,
    rng: np.random.Generator,
    min_expected: float = 5.0,
) -> Tuple[float, np.ndarray]:
    """Chi-square goodness of fit of per-window event counts against Poisson(N(a+b+mu_N) window).

    Returns (p-value, counts). Cells with small expected counts are pooled into the tails.
    """
    sim = ParticleSimulator(params, ParticleState(positions.copy()), rng)
    counter = _EventCounter(0.0, window, n_windows)
    sim.simulate_until(window * n_windows, observers=[counter])
    mean = total_event_rate(params) * window
    dist = stats.poisson(mean)

    lo = int(dist.ppf(1e-4))
    hi = int(dist.ppf(1 - 1e-4))
    edges: List[int] = []
    k = lo
    while k <= hi:
        start = k
        mass = dist.pmf(k)
        while mass * n_windows < min_expected and k < hi:
            k += 1
            mass += dist.pmf(k)
        edges.append(start)
        k += 1
    observed = []
    expected = []
    for idx, start in enumerate(edges):
        stop = edges[idx + 1] - 1 if idx + 1 < len(edges) else None
        if idx == 0:
            obs = np.sum(counter.counts <= (stop if stop is not None else np.inf))
            exp = dist.cdf(stop) if stop is not None else 1.0
        elif stop is None:
            obs = np.sum(counter.counts >= start)
            exp = dist.sf(start - 1)
        else:
            obs = np.sum((counter.counts >= start) & (counter.counts <= stop))
            exp = dist.cdf(stop) - dist.cdf(start - 1)
        observed.append(obs)
        expected.append(exp * n_windows)
    observed = np.asarray(observed, dtype=float)
    expected = np.asarray(expected, dtype=float)
    expected *= observed.sum() / expected.sum()
    result = stats.chisquare(observed, expected)
    logger.debug(f"Poisson window test: {len(observed)} cells, p={result.pvalue:.4f}")
    return float(result.pvalue), counter.counts
