"""Fixed-N long-time behaviour: relative coordinates, stationary gap, center-of-mass speed,
the exact N = 2 gap chain and a total-variation mixing diagnostic."""

import logging
from collections import Counter
from typing import List, Optional, Sequence

import numpy as np
from scipy import linalg, sparse, stats
from scipy.sparse.linalg import spsolve

from app.errors import DomainError
from app.models import (
    ComSpeedEstimate,
    EventKind,
    GapOracleResult,
    MixingProfile,
    ParticleState,
    RelativeState,
    StationaryGapEstimate,
)
from app.schemas import ModelParams
from app.services.particle_service import ParticleSimulator, effective_interaction_rate, make_rng

logger = logging.getLogger(__name__)

MASS_DEFECT_TOL = 1e-9
MAX_TRUNCATION = 1 << 20


def to_relative(positions) -> RelativeState:
    """y_i = x_i - min_j x_j."""
    x = np.asarray(positions, dtype=np.int64)
    if x.size == 0:
        raise ValueError("positions must be nonempty")
    return RelativeState(x - x.min())


def center_of_mass(positions) -> float:
    """m(x) = (1/N) sum_i x_i."""
    return float(np.mean(np.asarray(positions, dtype=float)))


def pairwise_distance_sum(positions) -> float:
    """sum_{i<j} |x_i - x_j| in O(N log N)."""
    x = np.sort(np.asarray(positions, dtype=float))
    n = x.size
    return float(np.dot(x, 2.0 * np.arange(n) - (n - 1)))


def instantaneous_com_drift(positions, params: ModelParams) -> float:
    """(G_N m)(x) = (alpha - beta) - (mu_N / N^2) sum_{i<j} |x_i - x_j|."""
    n = len(positions)
    return params.lam - effective_interaction_rate(params) / n**2 * pairwise_distance_sum(positions)


def asymptotic_com_speed(params: ModelParams, gap_estimate: float) -> float:
    """(alpha - beta) - mu_N (N - 1) / (2N) E|x_1 - x_2|."""
    if gap_estimate < 0:
        raise ValueError("gap estimate must be nonnegative")
    n = params.n_particles
    return params.lam - effective_interaction_rate(params) * (n - 1) / (2.0 * n) * gap_estimate


class _PairDistanceObserver:
    """Time integral of the all-pairs mean distance per batch, and m(t) at batch boundaries."""

    every_event = True

    def __init__(self, state: ParticleState):
        n = state.n
        self._pairs = n * (n - 1) / 2.0
        self._distance = pairwise_distance_sum(state.positions) / self._pairs
        self._last = state.time
        self._integral = 0.0
        self._start = state.time
        self.batch_distance: List[float] = []
        self.boundary_com: List[float] = [center_of_mass(state.positions)]

    def __call__(self, state: ParticleState, event: Optional[EventKind]) -> None:
        t = event.time if event is not None else state.time
        self._integral += self._distance * (t - self._last)
        self._last = t
        if event is not None:
            if event.applied:
                self._distance = pairwise_distance_sum(state.positions) / self._pairs
            return
        self.batch_distance.append(self._integral / (t - self._start))
        self.boundary_com.append(center_of_mass(state.positions))
        self._integral = 0.0
        self._start = t


def _batch_interval(values: np.ndarray, confidence: float = 0.95) -> float:
    b = values.size
    return float(stats.t.ppf(0.5 + confidence / 2.0, b - 1) * np.std(values, ddof=1) / np.sqrt(b))


def _run_batches(params: ModelParams, burn_in: float, sample: float, rng, batches: int, positions=None):
    if sample <= 0:
        raise ValueError("sample length must be positive")
    if batches < 2:
        raise ValueError("need at least two batches")
    start = np.zeros(params.n_particles, dtype=np.int64) if positions is None else np.asarray(positions, dtype=np.int64)
    sim = ParticleSimulator(params, ParticleState(start.copy()), rng)
    sim.simulate_until(burn_in)
    observer = _PairDistanceObserver(sim.state)
    boundaries = burn_in + sample * np.arange(1, batches + 1) / batches
    result = sim.simulate_until(burn_in + sample, observers=[observer], sample_times=boundaries)
    if result.truncated:
        logger.warning("Long-time run truncated by the event budget")
    return observer, sample / batches


def estimate_stationary_gap(
    params: ModelParams,
    burn_in: float,
    sample: float,
    rng: np.random.Generator,
    batches: int = 20,
    positions=None,
) -> StationaryGapEstimate:
    """Time average of the all-pairs mean |x_i - x_j| over [burn_in, burn_in + sample].

    The interval is split into equal batches; the CI is the Student-t batch-means interval.
    """
    observer, _ = _run_batches(params, burn_in, sample, rng, batches, positions)
    means = np.asarray(observer.batch_distance)
    estimate = StationaryGapEstimate(mean=float(means.mean()), ci_half_width=_batch_interval(means), batch_means=means)
    logger.debug(f"Stationary gap N={params.n_particles}: {estimate.mean:.4f} +- {estimate.ci_half_width:.4f}")
    return estimate


def com_speed_regression(
    params: ModelParams,
    burn_in: float,
    sample: float,
    rng: np.random.Generator,
    batches: int = 20,
    positions=None,
) -> ComSpeedEstimate:
    """Slope of m(t) from batch increments, next to the time-averaged drift (G_N m) and the gap.

    The drift formula makes the two agree in expectation over the same window.
    """
    observer, length = _run_batches(params, burn_in, sample, rng, batches, positions)
    com = np.asarray(observer.boundary_com)
    slopes = np.diff(com) / length
    distances = np.asarray(observer.batch_distance)
    n = params.n_particles
    drifts = params.lam - effective_interaction_rate(params) * (n - 1) / (2.0 * n) * distances
    gap = StationaryGapEstimate(mean=float(distances.mean()), ci_half_width=_batch_interval(distances), batch_means=distances)
    return ComSpeedEstimate(
        slope=float(slopes.mean()),
        slope_ci=_batch_interval(slopes),
        drift_average=float(drifts.mean()),
        drift_ci=_batch_interval(drifts),
        gap=gap,
    )


def _gap_generator(alpha: float, beta: float, mu2: float, k: int) -> sparse.csr_matrix:
    """Generator of the N = 2 gap chain truncated at k (no upward move from k)."""
    spread = alpha + beta
    up = np.full(k, spread)
    up[0] = 2.0 * spread
    down = np.full(k, spread)
    rows = [np.arange(k), np.arange(1, k + 1), np.arange(1, k + 1)]
    cols = [np.arange(1, k + 1), np.arange(k), np.zeros(k, dtype=int)]
    data = [up, down, np.full(k, mu2 / 2.0)]
    q = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(k + 1, k + 1)
    ).tocsr()
    # d = 1 -> 0 carries both the down move and the catastrophe; coo sums duplicates
    exit_rates = np.asarray(q.sum(axis=1)).ravel()
    return (q - sparse.diags(exit_rates)).tocsr()


def _stationary_sparse(q: sparse.csr_matrix) -> np.ndarray:
    a = q.transpose().tolil()
    a[0, :] = np.ones(q.shape[0])
    b = np.zeros(q.shape[0])
    b[0] = 1.0
    return spsolve(a.tocsc(), b)


def gap_chain_sparse(alpha: float, beta: float, mu2: float, k: int) -> np.ndarray:
    """Stationary law of the gap chain truncated at k (normalization replaces the d = 0 balance row)."""
    pi = np.clip(_stationary_sparse(_gap_generator(alpha, beta, mu2, k)), 0.0, None)
    return pi / pi.sum()


def gap_chain_dense(alpha: float, beta: float, mu2: float, k: int) -> np.ndarray:
    """Stationary law of the truncated gap chain from the dense null space of Q^T."""
    q = _gap_generator(alpha, beta, mu2, k).toarray()
    basis = linalg.null_space(q.T)
    if basis.shape[1] != 1:
        raise DomainError(f"gap chain null space has dimension {basis.shape[1]}")
    pi = basis[:, 0]
    return pi / pi.sum()


def gap_chain_oracle_n2(alpha: float, beta: float, mu2: float, truncation: int = 200) -> GapOracleResult:
    """
    Stationary law of |x_1 - x_2| for N = 2 by a sparse solve of the truncated chain.

    The truncation doubles until the mass at the top state is below 1e-9.

    Args:
        alpha: Right jump rate
        beta: Left jump rate
        mu2: Interaction rate mu_N at N = 2
        truncation: Initial truncation level K

    Returns:
        GapOracleResult with the law on {0..K}, its mean and the final K
    """
    if truncation < 10:
        raise ValueError("truncation must be at least 10")
    if min(alpha, beta, mu2) < 0 or alpha + beta + mu2 <= 0:
        raise DomainError("rates must be nonnegative with a positive total")
    if alpha + beta == 0:
        distribution = np.zeros(truncation + 1)
        distribution[0] = 1.0
        return GapOracleResult(distribution=distribution, mean_gap=0.0, truncation=truncation, mass_defect=0.0)
    if mu2 == 0:
        raise DomainError("without interaction the gap chain has no stationary law")

    k = truncation
    while True:
        pi = gap_chain_sparse(alpha, beta, mu2, k)
        defect = float(pi[-1])
        if defect < MASS_DEFECT_TOL:
            break
        if 2 * k > MAX_TRUNCATION:
            raise DomainError(f"mass defect {defect:.2e} still above tolerance at K={k}")
        logger.debug(f"Gap oracle: mass defect {defect:.2e} at K={k}, doubling")
        k *= 2
    mean_gap = float(np.dot(np.arange(k + 1), pi))
    return GapOracleResult(distribution=pi, mean_gap=mean_gap, truncation=k, mass_defect=defect)


class _StatisticSampler:
    """Records (max y, #zeros) of the relative configuration at sampling times."""

    every_event = False

    def __init__(self):
        self.samples: List[tuple] = []

    def __call__(self, state: ParticleState, event: Optional[EventKind]) -> None:
        self.samples.append(summary_statistic(state.positions))


def summary_statistic(positions) -> tuple:
    y = to_relative(positions).y
    return int(y.max()), int(np.count_nonzero(y == 0))


def total_variation(first: Sequence, second: Sequence) -> float:
    """1/2 sum |p - q| between two empirical distributions of hashable samples."""
    p, q = Counter(first), Counter(second)
    n_p, n_q = len(first), len(second)
    return 0.5 * sum(abs(p[c] / n_p - q[c] / n_q) for c in set(p) | set(q))


def mixing_diagnostic(
    params: ModelParams,
    t_points: Sequence[float],
    replicas: int,
    seed: int,
    spread: int = 10,
) -> MixingProfile:
    """TV distance between the laws of (max y, #zeros) started all-equal vs spread out.

    The spread arm starts at (0, s, 2s, ..., (N-1)s). Each replica uses its own stream per arm.
    The log-TV slope comes from a linear fit over the positive distances.
    """
    times = np.asarray(sorted(float(t) for t in t_points))
    if times.size < 2:
        raise ValueError("need at least two time points")
    if replicas < 200:
        raise ValueError("need at least 200 replicas per time point")
    n = params.n_particles
    arms = [np.zeros(n, dtype=np.int64), spread * np.arange(n, dtype=np.int64)]
    samples = [[[] for _ in times] for _ in arms]
    for arm, start in enumerate(arms):
        for replica in range(replicas):
            sim = ParticleSimulator(params, ParticleState(start.copy()), make_rng(seed, arm, replica))
            sampler = _StatisticSampler()
            sim.simulate_until(float(times[-1]), observers=[sampler], sample_times=times)
            for idx, stat in enumerate(sampler.samples):
                samples[arm][idx].append(stat)
    tv = np.array([total_variation(samples[0][idx], samples[1][idx]) for idx in range(times.size)])
    n_states = max(len(set(samples[0][idx]) | set(samples[1][idx])) for idx in range(times.size))
    positive = tv > 0
    if np.count_nonzero(positive) >= 2:
        fit = stats.linregress(times[positive], np.log(tv[positive]))
        predicted = fit.intercept + fit.slope * times[positive]
        residual = float(np.sqrt(np.mean((np.log(tv[positive]) - predicted) ** 2)))
        slope, intercept = float(fit.slope), float(fit.intercept)
    else:
        slope, intercept, residual = float("-inf"), 0.0, float("nan")
    logger.info(f"Mixing diagnostic N={n}: TV {np.round(tv, 4).tolist()} at t={times.tolist()}, slope {slope:.4f}")
    return MixingProfile(
        times=times,
        tv=tv,
        slope=slope,
        intercept=intercept,
        residual=residual,
        n_states=n_states,
        replicas=replicas,
    )
