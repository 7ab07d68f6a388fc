"""Empirical tail fields, pairings with test functions and martingale diagnostics."""

import logging
import math
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate

from app.config import settings
from app.errors import DomainError, SimulationError, TrajectoryError
from app.models import (
    EventKind,
    EventType,
    MartingaleSeries,
    ParticleState,
    Profile,
    TailField,
    TestFunction,
    Trajectory,
)
from app.schemas import ModelParams, Regime
from app.services import kernels
from app.services.particle_service import effective_interaction_rate

logger = logging.getLogger(__name__)

Field = Union[TailField, Profile, Callable[[np.ndarray], np.ndarray]]

DARBOUX_SAMPLES = 32


def tail_from_positions(positions) -> TailField:
    """Build xi_{N,k} = #{i : x_i >= k} / N from particle positions."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        raise ValueError("positions must be nonempty")
    return TailField(np.sort(positions), int(positions.size))


def _lattice(f: TestFunction, n: int, pad: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Sites k covering the (effective) support of f, with f(k/N)."""
    lo, hi = f.support
    k_lo = int(math.floor(n * lo)) - pad
    k_hi = int(math.ceil(n * hi)) + pad
    ks = np.arange(k_lo, k_hi + 1, dtype=np.int64)
    return ks, f.value(ks / n)


def antiderivative(f: TestFunction, points) -> np.ndarray:
    """Phi(y) = int_{-inf}^y f at the given points, by adaptive quadrature per interval."""
    points = np.asarray(points, dtype=float)
    lo, hi = f.support
    order = np.argsort(points)
    clipped = np.clip(points[order], lo, hi)
    out = np.empty(points.shape)
    acc = 0.0
    prev = lo
    for idx, p in zip(order, clipped):
        if p > prev:
            piece, _ = integrate.quad(f.value, prev, p, epsabs=settings.quad_abs_tol, epsrel=1e-12, limit=200)
            acc += piece
            prev = p
        out[idx] = acc
    return out


def pair(field: Field, f: TestFunction) -> float:
    """(h, f) = int h(x) f(x) dx for a tail field (via zeta_N), a profile or a callable.

    For a tail field, zeta_{N,x} = (1/N) sum_i I(x < (x_i + 1)/N), so the pairing is
    (1/N) sum_i Phi((x_i + 1)/N) with Phi the antiderivative of f.
    """
    if isinstance(field, TailField):
        n = field.n
        sites, counts = np.unique(field.breakpoints, return_counts=True)
        phi = antiderivative(f, (sites + 1) / n)
        return float(np.dot(counts, phi) / n)

    lo, hi = f.support
    breaks = [b for b in getattr(field, "breakpoints", ()) if lo < b < hi]
    value, _ = integrate.quad(
        lambda x: float(np.asarray(field(np.array([x])))[0]) * float(f.value(x)),
        lo,
        hi,
        points=breaks or None,
        epsabs=settings.quad_abs_tol,
        epsrel=1e-10,
        limit=500,
    )
    return float(value)


def R_f(z: TailField, f: TestFunction) -> float:
    """Lattice Riemann functional (1/N) sum_k f(k/N) z_k."""
    ks, fk = _lattice(f, z.n)
    return float(np.dot(fk, z.value(ks)) / z.n)


def generator_on_Rf(z: TailField, f: TestFunction, params: ModelParams) -> float:
    """Closed-form L_N R_f(z) for the generator with rates (alpha, beta, mu_N).

    L_N R_f(z) = (1/N) sum_k z_k (beta f_{k-1} - (alpha+beta) f_k + alpha f_{k+1})
                 - (mu_N / N) sum_k f_k z_k (1 - z_k)
    """
    n = z.n
    ks, fk = _lattice(f, n, pad=2)
    zk = z.value(ks)
    left = f.value((ks - 1) / n)
    right = f.value((ks + 1) / n)
    free = np.dot(zk, params.beta * left - (params.alpha + params.beta) * fk + params.alpha * right) / n
    mu_n = effective_interaction_rate(params)
    interaction = mu_n / n * np.dot(fk, zk * (1.0 - zk))
    return float(free - interaction)


def darboux_upper(g: Callable, n: int, lo: float, hi: float, cells: int = 1) -> float:
    """U+_N(g) = (1/N) sum_k sup of g over [k/N, (k + cells)/N], sampled on a fine sub-grid."""
    k_lo = int(math.floor(n * lo)) - cells
    k_hi = int(math.ceil(n * hi)) + 1
    ks = np.arange(k_lo, k_hi + 1)
    offsets = np.linspace(0.0, float(cells), DARBOUX_SAMPLES * cells + 1)
    samples = g((ks[:, None] + offsets[None, :]) / n)
    return float(np.sum(np.max(samples, axis=1)) / n)


def generator_bound(f: TestFunction, params: ModelParams) -> float:
    """Constant C with |N^a L_N R_f(z)| <= C for every z in H_N (a = 1 transport, 2 diffusive).

    Transport: |alpha-beta| U+(|f'|) + mu U+(|f|) / 4 + min(alpha, beta) U2+(|f''|) / N.
    Diffusive (alpha = beta = gamma): gamma U2+(|f''|) + mu U+(|f|) / 4.
    U2+ takes the supremum over two adjacent cells (second differences).
    """
    n = params.n_particles
    lo, hi = f.support
    abs_f = darboux_upper(lambda x: np.abs(f.value(x)), n, lo, hi)
    abs_f2 = darboux_upper(lambda x: np.abs(f.d2(x)), n, lo, hi, cells=2)
    if params.regime == Regime.TRANSPORT:
        abs_f1 = darboux_upper(lambda x: np.abs(f.d1(x)), n, lo, hi)
        return (
            abs(params.alpha - params.beta) * abs_f1
            + params.mu * abs_f / 4.0
            + min(params.alpha, params.beta) * abs_f2 / n
        )
    if params.regime == Regime.DIFFUSIVE:
        if params.alpha != params.beta:
            raise DomainError("diffusive bound requires alpha == beta")
        return params.alpha * abs_f2 + params.mu * abs_f / 4.0
    raise DomainError("generator bound is defined for the transport and diffusive regimes")


def carre_du_champ(z: TailField, f: TestFunction, params: ModelParams) -> float:
    """Gamma(z) = L_N R_f^2 - 2 R_f L_N R_f for the configuration behind z.

    Gamma = [sum_i (alpha f((x_i+1)/N)^2 + beta f(x_i/N)^2)
             + (mu_N / N)(N sum_i F_i^2 - (sum_i F_i)^2)] / N^4,
    with F(x) = sum_{k <= x} f(k/N).
    """
    n = z.n
    nf = float(n)
    x = z.breakpoints
    ks, fk = _lattice(f, n)
    cum = np.cumsum(fk)
    idx = np.clip(x - ks[0], -1, ks.size - 1)
    big_f = np.where(idx >= 0, cum[np.maximum(idx, 0)], 0.0)
    jumps = np.sum(params.alpha * f.value((x + 1) / nf) ** 2 + params.beta * f.value(x / nf) ** 2)
    mu_n = effective_interaction_rate(params)
    spread = nf * np.sum(big_f**2) - np.sum(big_f) ** 2
    return float((jumps + mu_n / nf * spread) / nf**4)


def martingale_series(
    trajectory: Trajectory,
    f: TestFunction,
    params: ModelParams,
    time_grid: Sequence[float],
) -> MartingaleSeries:
    """W_{f,N} and V_{f,N} on a macroscopic time grid from an event-resolved trajectory.

    W(t) = R_f(xi(tN^a)) - R_f(xi(0)) - int_0^{tN^a} L_N R_f(xi(s)) ds
    V(t) = W(t)^2 - int_0^{tN^a} Gamma(xi(s)) ds
    Both integrands are constant between events and are summed exactly.
    """
    if not trajectory.event_resolved:
        raise TrajectoryError("martingale diagnostics need an event-resolved trajectory")
    times = np.asarray(time_grid, dtype=float)
    if times.size and np.any(np.diff(times) < 0):
        raise ValueError("time grid must be sorted")
    absolute = trajectory.t_start + np.array([params.real_time(t) for t in times], dtype=float)
    if absolute.size and absolute[-1] > trajectory.t_end * (1 + 1e-12) + 1e-12:
        raise TrajectoryError(f"time grid ends after the trajectory ({absolute[-1]} > {trajectory.t_end})")

    n = params.n_particles
    ks, fk = _lattice(f, n)
    w, quad = kernels.replay_martingale(
        trajectory.initial_positions,
        trajectory.event_times,
        trajectory.actors,
        trajectory.new_positions,
        float(trajectory.t_start),
        absolute,
        np.ascontiguousarray(fk, dtype=np.float64),
        int(ks[0]),
        float(params.alpha),
        float(params.beta),
        float(effective_interaction_rate(params)),
    )
    return MartingaleSeries(times=times, w=w, v=w * w - quad, quadratic_compensator=quad)


def martingale_W(trajectory: Trajectory, f: TestFunction, params: ModelParams, time_grid) -> np.ndarray:
    """
    Dynkin martingale W_{f,N} on a macroscopic time grid.

    Args:
        trajectory: Event-resolved path from simulate_until(record=True)
        f: Test function paired with the tail field
        params: Rates and regime of the simulated system
        time_grid: Sorted macroscopic times, starting at or after 0

    Returns:
        W_{f,N}(t) for each t in time_grid
    """
    return martingale_series(trajectory, f, params, time_grid).w


def martingale_V(trajectory: Trajectory, f: TestFunction, params: ModelParams, time_grid) -> np.ndarray:
    """Quadratic martingale V_{f,N} = W^2 minus the integrated carre du champ, on the same grid as martingale_W."""
    return martingale_series(trajectory, f, params, time_grid).v


def l1_distance(
    field: TailField,
    reference: Callable[[np.ndarray], np.ndarray],
    window: Tuple[float, float],
    step: Optional[float] = None,
) -> float:
    """int_a^b |zeta_{N,x} - u(x)| dx.

    zeta is constant on [k/N, (k+1)/N); the reference is tabulated with step 1/(4N) (lattice
    points included) and linearly interpolated, so each sub-interval integrates |c - linear|
    in closed form.
    """
    a, b = float(window[0]), float(window[1])
    if not (np.isfinite(a) and np.isfinite(b)) or b <= a:
        raise ValueError("window must be finite and increasing")
    n = field.n
    step = step or 1.0 / (4 * n)
    j_lo = int(math.ceil(a / step))
    j_hi = int(math.floor(b / step))
    nodes = np.unique(np.concatenate(([a], np.arange(j_lo, j_hi + 1) * step, [b])))
    nodes = nodes[(nodes >= a) & (nodes <= b)]
    u = np.asarray(reference(nodes), dtype=float)
    left = nodes[:-1]
    width = np.diff(nodes)
    midpoints = left + 0.5 * width
    c = field.rescaled(midpoints)
    d0 = u[:-1] - c
    d1 = u[1:] - c
    same_sign = d0 * d1 >= 0
    abs_sum = np.abs(d0) + np.abs(d1)
    crossing = np.divide(d0 * d0 + d1 * d1, 2.0 * abs_sum, out=np.zeros_like(abs_sum), where=abs_sum > 0)
    pieces = np.where(same_sign, 0.5 * abs_sum, crossing) * width
    return float(np.sum(pieces))


class InvariantObserver:
    """Checks the H_N invariants of the tail field at sampling times and, per event,
    that relocations land on an occupied site strictly below the old position."""

    def __init__(self, initial: ParticleState, every_event: bool = True):
        self.every_event = every_event
        self._previous = initial.positions.copy()
        self.samples_checked = 0
        self.relocations_checked = 0

    def __call__(self, state: ParticleState, event: Optional[EventKind]) -> None:
        if event is None:
            tail_from_positions(state.positions).check_invariants()
            self.samples_checked += 1
            if not self.every_event:
                self._previous = state.positions.copy()
            return
        i = event.i
        new = int(state.positions[i])
        old = int(self._previous[i])
        if event.tag == EventType.INTERACTION and event.applied:
            target = int(self._previous[event.j])
            if new != target or not new < old:
                raise SimulationError(f"relocation of particle {i} from {old} to {new} (target {target})")
            self.relocations_checked += 1
        elif event.tag == EventType.JUMP_RIGHT and new != old + 1:
            raise SimulationError(f"right jump of particle {i} from {old} to {new}")
        elif event.tag == EventType.JUMP_LEFT and new != old - 1:
            raise SimulationError(f"left jump of particle {i} from {old} to {new}")
        elif event.tag == EventType.INTERACTION and not event.applied and new != old:
            raise SimulationError(f"skipped interaction moved particle {i}")
        self._previous[i] = new
