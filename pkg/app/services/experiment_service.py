"""Experiment orchestration: replica fan-out, aggregation and calibration checks."""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from functools import partial
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from app.config import settings
from app.errors import ConfigError
from app.models import ParticleState, Profile, SpaceTimeTestFunction, TestFunction
from app.schemas import (
    ExperimentConfig,
    ExperimentKind,
    ExperimentResponse,
    Expectations,
    ModelParams,
    Regime,
    ResultRecord,
)
from app.services import empirical_service, kpp_service, longtime_service, transport_service
from app.services.particle_service import (
    ParticleSimulator,
    effective_interaction_rate,
    init_from_profile,
    make_rng,
    total_event_rate,
)

logger = logging.getLogger(__name__)

DEFAULT_EXPECTATIONS = Path(__file__).resolve().parent.parent / "expectations.json"
FORM_DISTANCE_FLOOR = 1e-9  # below this, front bisection error dominates
KPP_RESIDUAL_SNAPSHOTS = 100


def load_expectations(path: Optional[Path] = None) -> Expectations:
    """Calibration thresholds from the configured or packaged expectations file."""
    path = path or settings.expectations_path or DEFAULT_EXPECTATIONS
    try:
        return Expectations.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except Exception as e:
        logger.error(f"Error loading expectations from {path}: {e}")
        raise


def mean_ci(values: Sequence[float], confidence: float = 0.95) -> Tuple[float, Optional[float]]:
    """Sample mean and Student-t half width (None for a single value)."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return float(arr.mean()), None
    half = stats.t.ppf(0.5 + confidence / 2.0, arr.size - 1) * arr.std(ddof=1) / math.sqrt(arr.size)
    return float(arr.mean()), float(half)


def _decreasing_to_floor(values: Sequence[float], floor: float = FORM_DISTANCE_FLOOR) -> bool:
    """Each value is below its predecessor unless it has already reached the floor."""
    return all(b < a or b <= floor for a, b in zip(values, values[1:]))


class _Snapshots:
    """Copies the positions at each sampling time."""

    every_event = False

    def __init__(self):
        self.positions: List[np.ndarray] = []

    def __call__(self, state: ParticleState, event) -> None:
        self.positions.append(state.positions.copy())


class ExperimentService:
    """Runs one validated experiment configuration and collects long-format records."""

    def __init__(
        self,
        config: ExperimentConfig,
        threads: Optional[int] = None,
        expectations: Optional[Expectations] = None,
    ):
        self.config = config
        self.threads = max(1, threads or settings.default_threads)
        self.expectations = expectations or load_expectations()
        self.config_hash = config.config_hash()
        self.experiment_id = f"{config.kind.value}-{self.config_hash[:12]}"
        self.records: List[ResultRecord] = []
        self._panel = [TestFunction.from_spec(member) for member in config.test_panel]

    # Record helpers
    def _record(
        self,
        metric: str,
        value: float,
        n: Optional[int] = None,
        time: Optional[float] = None,
        seed: Optional[int] = None,
        ci: Optional[float] = None,
    ) -> None:
        value = float(value)
        if not math.isfinite(value):
            logger.warning(f"Metric {metric} is {value} (n={n}, t={time}); stored as null")
            value = None
        if ci is not None and not math.isfinite(ci):
            ci = None
        self.records.append(
            ResultRecord(
                experiment_id=self.experiment_id,
                config_hash=self.config_hash,
                seed=seed,
                n=n,
                time=time,
                metric=metric,
                value=value,
                ci_half_width=ci,
            )
        )

    def _check(self, name: str, passed: bool, n: Optional[int] = None, time: Optional[float] = None) -> None:
        if not passed:
            logger.warning(f"Check {name} failed (n={n}, t={time})")
        self._record(f"check:{name}", 1.0 if passed else 0.0, n=n, time=time)

    def _map(self, func: Callable, tasks: Iterable) -> List:
        """Apply func over tasks in a thread pool; results come back in task order."""
        tasks = list(tasks)
        if self.threads == 1:
            return [func(task) for task in tasks]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(func, tasks))

    # Entry point
    def run(self) -> ExperimentResponse:
        """Dispatch on the experiment kind."""
        started = datetime.now(timezone.utc)
        clock = time.perf_counter()
        logger.info(f"Starting experiment {self.experiment_id} ({self.config.replicas} replicas, {self.threads} threads)")
        runners = {
            ExperimentKind.HYDRO_TRANSPORT: self.run_hydro_transport,
            ExperimentKind.HYDRO_KPP: self.run_hydro_kpp,
            ExperimentKind.MARTINGALE: self.run_martingale,
            ExperimentKind.WAVES_TRANSPORT: self.run_waves,
            ExperimentKind.WAVES_KPP: self.run_waves,
            ExperimentKind.LONGTIME: self.run_longtime,
            ExperimentKind.ORACLE_N2: self.run_oracle_n2,
        }
        try:
            runners[self.config.kind]()
        except Exception as e:
            logger.error(f"Experiment {self.experiment_id} failed: {e}")
            raise
        elapsed = time.perf_counter() - clock
        logger.info(f"Experiment {self.experiment_id} finished: {len(self.records)} records in {elapsed:.1f}s")
        metadata = {
            "seeds": list(self.config.seeds[: self.config.replicas]),
            "rng_block_size": settings.rng_block_size,
            "event_budget": settings.event_budget,
            "threads": self.threads,
            "expectations": self.expectations.model_dump(mode="json"),
            "started_at": started.isoformat(),
            "elapsed_seconds": elapsed,
        }
        return ExperimentResponse(
            experiment_id=self.experiment_id,
            config_hash=self.config_hash,
            records=self.records,
            metadata=metadata,
        )

    # Hydrodynamic limits
    def _simulate_snapshots(self, params: ModelParams, psi: Profile, seed: int) -> Tuple[List[np.ndarray], int, bool]:
        positions = init_from_profile(psi, params.n_particles)
        sim = ParticleSimulator(params, ParticleState(positions), make_rng(seed, params.n_particles))
        observer = _Snapshots()
        sample_times = [params.real_time(t) for t in self.config.time_points]
        result = sim.simulate_until(max(sample_times), observers=[observer], sample_times=sample_times)
        return observer.positions, result.n_events, result.truncated

    def _run_hydro(self, reference_at: Callable[[float], Profile], l1_max: float) -> None:
        config = self.config
        psi = Profile.from_spec(config.initial_profile)
        times = sorted(config.time_points)
        references = {t: reference_at(t) for t in times}
        reference_pairs = {t: [empirical_service.pair(references[t], f) for f in self._panel] for t in times}
        seeds = config.seeds[: config.replicas]
        final_means: List[float] = []

        for n in config.n_sweep:
            params = config.params.with_particles(n)
            logger.info(f"{config.kind.value}: N={n}, {len(seeds)} replicas to t={max(times)}")

            def task(seed: int, params=params):
                snapshots, n_events, truncated = self._simulate_snapshots(params, psi, seed)
                rows = []
                for t, positions in zip(times, snapshots):
                    field = empirical_service.tail_from_positions(positions)
                    field.check_invariants()
                    l1 = empirical_service.l1_distance(field, references[t], config.window)
                    errors = [
                        abs(empirical_service.pair(field, f) - ref)
                        for f, ref in zip(self._panel, reference_pairs[t])
                    ]
                    rows.append((t, l1, errors))
                return seed, rows, n_events, truncated

            results = self._map(task, seeds)
            expected_events = total_event_rate(params) * params.real_time(max(times))
            counts = []
            for seed, rows, n_events, truncated in results:
                counts.append(n_events)
                self._record("events", n_events, n=n, seed=seed)
                if truncated:
                    self._record("truncated", 1.0, n=n, seed=seed)
                for t, l1, errors in rows:
                    self._record("l1_distance", l1, n=n, time=t, seed=seed)
                    for idx, err in enumerate(errors):
                        self._record(f"pair_error_{idx}", err, n=n, time=t, seed=seed)
            self._record("events_expected", expected_events, n=n)
            mean_events, ci_events = mean_ci(counts)
            self._record("events_mean", mean_events, n=n, ci=ci_events)
            self._check("event_count", abs(mean_events - expected_events) <= 0.01 * expected_events, n=n)

            for t_idx, t in enumerate(times):
                mean, ci = mean_ci([rows[t_idx][1] for _, rows, _, _ in results])
                self._record("l1_distance_mean", mean, n=n, time=t, ci=ci)
                for idx in range(len(self._panel)):
                    m, c = mean_ci([rows[t_idx][2][idx] for _, rows, _, _ in results])
                    self._record(f"pair_error_{idx}_mean", m, n=n, time=t, ci=c)
                if t == times[-1]:
                    final_means.append(mean)

        if len(final_means) > 1:
            self._check("l1_decreasing", all(a > b for a, b in zip(final_means, final_means[1:])), time=times[-1])
        self._check("l1_threshold", final_means[-1] <= l1_max, n=config.n_sweep[-1], time=times[-1])

    def _check_weak_residual(
        self,
        psi: Profile,
        field: transport_service.SpaceTimeField,
        lam: float,
        gamma: float,
        residual_max: float,
    ) -> None:
        """Weak-form residual of the reference field against each panel member up to the last time point."""
        if psi.breakpoints:
            logger.info("Initial profile has jumps: weak residual not evaluated")
            return
        p = self.config.params
        horizon = max(self.config.time_points)
        residuals = []
        for idx, f in enumerate(self._panel):
            test = SpaceTimeTestFunction(f, horizon)
            residual = transport_service.weak_residual(
                field, test, lam, p.mu, horizon, gamma=gamma, tol=residual_max / 100.0
            )
            residuals.append(abs(residual))
            self._record(f"weak_residual_{idx}", residual, time=horizon)
        self._check("weak_residual", max(residuals) <= residual_max, time=horizon)

    def run_hydro_transport(self) -> List[ResultRecord]:
        """Empirical field against the exact transport solution along the N sweep."""
        p = self.config.params
        psi = Profile.from_spec(self.config.initial_profile)
        self._check_weak_residual(
            psi,
            partial(transport_service.exact_solution, psi, p.lam, p.mu),
            p.lam,
            0.0,
            self.expectations.weak_residual_max,
        )
        self._run_hydro(
            lambda t: transport_service.transport_profile(psi, p.lam, p.mu, t),
            self.expectations.transport_l1_max,
        )
        return self.records

    def run_hydro_kpp(self) -> List[ResultRecord]:
        """Empirical field against the numerical KPP solution along the N sweep."""
        p = self.config.params
        psi = Profile.from_spec(self.config.initial_profile)
        grid = kpp_service.KppGrid.from_spec(self.config.kpp_grid, p.alpha)
        horizon = max(self.config.time_points)
        snapshots = list(self.config.time_points) + list(np.linspace(0.0, horizon, KPP_RESIDUAL_SNAPSHOTS + 1))
        solution = kpp_service.kpp_solve(psi, p.alpha, p.mu, horizon, grid, snapshots)
        if solution.boundary_contaminated:
            self._record("boundary_contaminated", 1.0)
        self._check_weak_residual(psi, solution.field, 0.0, p.alpha, self.expectations.kpp_weak_residual_max)
        self._run_hydro(
            lambda t: psi if t == 0 else solution.profile_at(t),
            self.expectations.kpp_l1_max,
        )
        return self.records

    # Martingales
    def run_martingale(self) -> List[ResultRecord]:
        """Replica statistics of W_{f,N}(t) and V_{f,N}(t) for the test panel along the N sweep."""
        config = self.config
        psi = Profile.from_spec(config.initial_profile)
        times = sorted(config.time_points)
        horizon = times[-1]
        seeds = config.seeds[: config.replicas]
        variances: Dict[int, List[float]] = {}

        for n in config.n_sweep:
            params = config.params.with_particles(n)
            logger.info(f"martingale: N={n}, {len(seeds)} replicas to T={horizon}")

            def task(seed: int, params=params):
                positions = init_from_profile(psi, params.n_particles)
                sim = ParticleSimulator(params, ParticleState(positions), make_rng(seed, params.n_particles))
                result = sim.simulate_until(params.real_time(horizon), record=True)
                series = [
                    empirical_service.martingale_series(result.trajectory, f, params, times)
                    for f in self._panel
                ]
                return seed, series

            results = self._map(task, seeds)
            variances[n] = []
            for idx in range(len(self._panel)):
                for seed, series in results:
                    self._record(f"W_{idx}", series[idx].w[-1], n=n, time=horizon, seed=seed)
                    self._record(f"V_{idx}", series[idx].v[-1], n=n, time=horizon, seed=seed)
                w_final = np.array([series[idx].w[-1] for _, series in results])
                v_final = np.array([series[idx].v[-1] for _, series in results])
                mean_w, ci_w = mean_ci(w_final)
                mean_v, ci_v = mean_ci(v_final)
                self._record(f"W_{idx}_mean", mean_w, n=n, time=horizon, ci=ci_w)
                self._record(f"V_{idx}_mean", mean_v, n=n, time=horizon, ci=ci_v)
                var_w = float(np.var(w_final, ddof=1)) if w_final.size > 1 else 0.0
                self._record(f"W_{idx}_var", var_w, n=n, time=horizon)
                variances[n].append(var_w)
                if w_final.size > 1:
                    se = math.sqrt(var_w / w_final.size)
                    self._check(f"W_{idx}_zero_mean", abs(mean_w) <= 3.0 * se, n=n, time=horizon)

        slack = self.expectations.martingale_var_slack
        # Var W ~ T/N; relocations dominate in the transport regime, without them jumps give T/N^2
        exponent = 2.0 if config.params.regime == Regime.TRANSPORT and config.params.mu == 0 else 1.0
        sweep = config.n_sweep
        for small, large in zip(sweep, sweep[1:]):
            rate = (large / small) ** exponent
            for idx in range(len(self._panel)):
                v_small, v_large = variances[small][idx], variances[large][idx]
                ratio = v_small / v_large if v_large > 0 else math.inf
                self._record(f"W_{idx}_var_ratio", ratio, n=large, time=horizon)
                self._check(f"W_{idx}_var_scaling", rate / slack <= ratio <= rate * slack, n=large, time=horizon)
        return self.records

    # Travelling waves
    def run_waves(self) -> List[ResultRecord]:
        if self.config.kind == ExperimentKind.WAVES_TRANSPORT:
            self._run_waves_transport()
        elif self.config.kind == ExperimentKind.WAVES_KPP:
            self._run_waves_kpp()
        else:
            raise ConfigError(f"run_waves cannot run {self.config.kind.value}")
        return self.records

    def _speed_times(self) -> np.ndarray:
        waves = self.config.waves
        return np.linspace(waves.speed_window[0], waves.speed_window[1], waves.speed_samples)

    def _run_waves_transport(self) -> None:
        waves = self.config.waves
        tol = self.expectations.transport_speed_abs_tol
        for idx, case in enumerate(waves.transport_cases):
            psi = Profile.logistic(case.nu)
            track = transport_service.track_front(
                lambda t, psi=psi, case=case: transport_service.transport_profile(psi, case.lam, case.mu, t, waves.transport_step),
                self._speed_times(),
            )
            predicted = transport_service.asymptotic_speed_transport(case.nu, case.lam, case.mu)
            self._record(f"case{idx}:measured_speed", track.speed)
            self._record(f"case{idx}:predicted_speed", predicted)
            self._record(f"case{idx}:speed_fit_residual", track.residual)
            self._check(f"case{idx}:speed", abs(track.speed - predicted) <= tol)

            wave = partial(transport_service.wave_transport, case.lam, case.mu, predicted)
            skewed = Profile.skewed_logistic(case.nu)
            distances = []
            for t in waves.form_times:
                profile = transport_service.transport_profile(skewed, case.lam, case.mu, t, waves.transport_step)
                front = transport_service.front_position(profile)
                distance = transport_service.form_distance(profile, front, wave, waves.form_interval)
                distances.append(distance)
                self._record(f"case{idx}:form_distance", distance, time=t)
            self._check(f"case{idx}:form_decreasing", _decreasing_to_floor(distances))

    def _run_waves_kpp(self) -> None:
        waves = self.config.waves
        p = self.config.params
        gamma, mu = p.alpha, p.mu
        grid = kpp_service.KppGrid.from_spec(waves.kpp_grid, gamma)
        speed_times = self._speed_times()
        horizon = max(float(speed_times[-1]), max(waves.form_times))
        tol = self.expectations.kpp_speed_rel_tol

        def task(kappa):
            psi = Profile.step(0.0) if kappa is None else Profile.logistic(kappa)
            solution = kpp_service.kpp_solve(psi, gamma, mu, horizon, grid, list(speed_times) + list(waves.form_times))
            return kappa, solution

        for idx, (kappa, solution) in enumerate(self._map(task, waves.kappas)):
            label = "steep" if kappa is None else f"kappa={kappa:g}"
            predicted = kpp_service.predicted_speed(math.inf if kappa is None else kappa, gamma, mu)
            track = kpp_service.measure_front_speed(solution, waves.speed_window)
            rel = abs(track.speed - predicted) / abs(predicted)
            self._record(f"{label}:measured_speed", track.speed)
            self._record(f"{label}:predicted_speed", predicted)
            self._record(f"{label}:speed_rel_error", rel)
            if solution.boundary_contaminated:
                self._record(f"{label}:boundary_contaminated", 1.0)
            self._check(f"{label}:speed", rel <= tol)

            wave = kpp_service.kpp_wave_profile(predicted, gamma, mu)
            distances = []
            for t in waves.form_times:
                distance = kpp_service.kpp_form_distance(solution, t, wave, waves.form_interval)
                distances.append(distance)
                self._record(f"{label}:form_distance", distance, time=t)
            self._check(f"{label}:form_decreasing", _decreasing_to_floor(distances))

    # Long-time behaviour
    def run_longtime(self) -> List[ResultRecord]:
        """Stationary gap, center-of-mass speed, mixing and (N = 2) the exact oracle."""
        config = self.config
        longtime = config.longtime
        params = config.params
        n = params.n_particles
        seeds = config.seeds[: config.replicas]
        logger.info(f"longtime: N={n}, {len(seeds)} chains of length {longtime.sample} after {longtime.burn_in}")

        def task(seed: int):
            rng = make_rng(seed, n)
            return seed, longtime_service.com_speed_regression(params, longtime.burn_in, longtime.sample, rng, longtime.batches)

        results = self._map(task, seeds)
        for seed, est in results:
            self._record("gap", est.gap.mean, n=n, seed=seed, ci=est.gap.ci_half_width)
            self._record("com_slope", est.slope, n=n, seed=seed, ci=est.slope_ci)
            self._record("com_drift_average", est.drift_average, n=n, seed=seed, ci=est.drift_ci)

        gap_batches = np.concatenate([est.gap.batch_means for _, est in results])
        gap_mean, gap_ci = mean_ci(gap_batches)
        factor = (n - 1) / (2.0 * n) * effective_interaction_rate(params)
        slope_mean, slope_ci = self._pooled_slope(results)
        predicted = longtime_service.asymptotic_com_speed(params, gap_mean)
        predicted_ci = factor * gap_ci if gap_ci is not None else None
        drift_mean, drift_ci = mean_ci(params.lam - factor * gap_batches)
        self._record("gap_mean", gap_mean, n=n, ci=gap_ci)
        self._record("com_slope_mean", slope_mean, n=n, ci=slope_ci)
        self._record("predicted_speed", predicted, n=n, ci=predicted_ci)
        self._record("com_drift_mean", drift_mean, n=n, ci=drift_ci)
        self._check(
            "com_speed",
            abs(slope_mean - predicted) <= (slope_ci or 0.0) + (predicted_ci or 0.0),
            n=n,
        )

        mixing = longtime_service.mixing_diagnostic(
            params, longtime.mixing_times, longtime.mixing_replicas, seeds[0], longtime.spread_budget
        )
        for t, tv in zip(mixing.times, mixing.tv):
            self._record("tv_distance", tv, n=n, time=float(t))
        self._record("tv_log_slope", mixing.slope, n=n)
        floor = self.expectations.tv_noise_factor * mixing.noise_floor
        self._record("tv_noise_floor", floor, n=n)
        self._check("tv_decreasing", _decreasing_to_floor(list(mixing.tv), floor), n=n)
        self._check("tv_slope_negative", mixing.slope < 0, n=n)

        if n == 2:
            oracle = longtime_service.gap_chain_oracle_n2(params.alpha, params.beta, params.mu_n, longtime.oracle_truncation)
            self._record("oracle_mean_gap", oracle.mean_gap, n=n)
            rel = abs(gap_mean - oracle.mean_gap) / oracle.mean_gap if oracle.mean_gap > 0 else abs(gap_mean)
            self._record("oracle_rel_error", rel, n=n)
            self._check("oracle_agreement", rel <= self.expectations.oracle_rel_tol, n=n)
        return self.records

    def _pooled_slope(self, results) -> Tuple[float, Optional[float]]:
        """Mean center-of-mass slope over chains, with the batch-means interval of the pooled increments."""
        slopes = np.array([est.slope for _, est in results])
        if slopes.size > 1:
            return mean_ci(slopes)
        est = results[0][1]
        return est.slope, est.slope_ci

    def run_oracle_n2(self) -> List[ResultRecord]:
        """Exact N = 2 gap law from the sparse solve, cross-checked by a dense null-space solve."""
        p = self.config.params
        k = self.config.longtime.oracle_truncation
        oracle = longtime_service.gap_chain_oracle_n2(p.alpha, p.beta, p.mu_n, k)
        self._record("oracle_mean_gap", oracle.mean_gap, n=2)
        self._record("oracle_truncation", oracle.truncation, n=2)
        self._record("oracle_mass_defect", oracle.mass_defect, n=2)
        if p.alpha + p.beta > 0:
            sparse_pi = longtime_service.gap_chain_sparse(p.alpha, p.beta, p.mu_n, k)
            dense_pi = longtime_service.gap_chain_dense(p.alpha, p.beta, p.mu_n, k)
            gap = float(np.max(np.abs(sparse_pi - dense_pi)))
            mean_gap_dense = float(np.dot(np.arange(k + 1), dense_pi))
            self._record("oracle_dense_mean_gap", mean_gap_dense, n=2)
            self._record("oracle_dense_max_abs_diff", gap, n=2)
            self._check("oracle_dense_agreement", gap <= 1e-8, n=2)
        return self.records


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> ExperimentResponse:
    """
    Run one experiment; used by the CLI and the API.

    Args:
        config: Validated experiment configuration
        threads: Worker threads for replicas (settings.default_threads when None)

    Returns:
        ExperimentResponse with the records and run metadata
    """
    return ExperimentService(config, threads=threads).run()
