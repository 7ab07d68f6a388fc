import math

import numpy as np
import pytest
from scipy.special import erfc

from app.errors import DomainError, StabilityError
from app.models import KppSolution, Profile, SpaceTimeTestFunction, TestFunction, TestFunctionFamily
from app.services.kpp_service import (
    KppGrid,
    kpp_form_distance,
    kpp_solve,
    kpp_wave_profile,
    measure_front_speed,
    minimal_speed,
    predicted_speed,
    reaction_map,
    speed_snapshot_times,
    wave_lyapunov,
    wave_ode_residual,
)
from app.services.transport_service import exact_solution, weak_residual


# Grid and scheme
def test_unstable_time_step_rejected():
    with pytest.raises(StabilityError):
        KppGrid.build(-1.0, 1.0, 0.1, gamma=1.0, tau=0.01)


def test_default_time_step_is_stable():
    grid = KppGrid.build(-1.0, 1.0, 0.1, gamma=2.0)
    assert grid.tau <= grid.h**2 / (2.0 * grid.gamma)
    assert grid.nodes.size == 21


def test_grid_built_for_other_gamma_rejected():
    grid = KppGrid.build(-5.0, 5.0, 0.1, gamma=1.0)
    with pytest.raises(DomainError):
        kpp_solve(Profile.logistic(1.0), 2.0, 1.0, 1.0, grid=grid)


def test_reaction_map_is_a_flow():
    u = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(reaction_map(reaction_map(u, 1.5, 0.3), 1.5, 0.4), reaction_map(u, 1.5, 0.7), atol=1e-14)
    np.testing.assert_array_equal(reaction_map(np.array([0.0, 1.0]), 2.0, 5.0), [0.0, 1.0])


def test_reaction_only_matches_characteristics():
    psi = Profile.logistic(1.0)
    grid = KppGrid.build(-20.0, 20.0, 0.02, gamma=1.0)
    solution = kpp_solve(psi, 1.0, 1.0, 1.0, grid=grid, diffusion=False)
    np.testing.assert_allclose(
        solution.snapshot(1.0),
        exact_solution(psi, 0.0, 1.0, 1.0, solution.grid),
        atol=1e-10,
    )


def test_saturated_data_stay_saturated():
    grid = KppGrid.build(-20.0, 20.0, 0.05, gamma=1.0)
    solution = kpp_solve(Profile.step(1000.0), 1.0, 1.0, 1.0, grid=grid)
    inside = solution.grid <= 0.0
    np.testing.assert_allclose(solution.snapshot(1.0)[inside], 1.0, atol=1e-12)
    assert solution.boundary_contaminated


def test_heat_equation_matches_gaussian_convolution():
    h = 0.01
    grid = KppGrid.build(-10.0, 10.0, h, gamma=1.0)
    solution = kpp_solve(Profile.step(0.0), 1.0, 0.0, 1.0, grid=grid)
    # discrete data jump between the nodes -h and 0
    expected = 0.5 * erfc((solution.grid + 0.5 * h) / 2.0)
    assert np.max(np.abs(solution.snapshot(1.0) - expected)) <= 1e-3
    assert not solution.boundary_contaminated


def test_snapshots_are_stored():
    grid = KppGrid.build(-10.0, 10.0, 0.1, gamma=1.0)
    solution = kpp_solve(Profile.logistic(1.0), 1.0, 1.0, 1.0, grid=grid, snapshot_times=[0.5, 1.0, 5.0])
    np.testing.assert_allclose(solution.times, [0.0, 0.5, 1.0])
    assert solution.values.shape == (3, solution.grid.size)
    for row in solution.values:
        assert np.all((row >= 0.0) & (row <= 1.0))
        assert np.all(np.diff(row) <= 1e-12)
    with pytest.raises(ValueError):
        solution.snapshot(0.75)


def test_grid_refinement_is_second_order():
    psi = Profile.logistic(1.0)
    fields = []
    for h in (0.1, 0.05, 0.025):
        grid = KppGrid.build(-20.0, 20.0, h, gamma=1.0)
        fields.append(kpp_solve(psi, 1.0, 1.0, 1.0, grid=grid).snapshot(1.0))
    coarse, medium, fine = fields[0], fields[1][::2], fields[2][::4]
    order = math.log2(np.max(np.abs(coarse - medium)) / np.max(np.abs(medium - fine)))
    assert order >= 1.8


# Speeds
def test_minimal_speed():
    assert minimal_speed(1.0, 1.0) == -2.0
    assert minimal_speed(0.5, 2.0) == -2.0
    with pytest.raises(DomainError):
        minimal_speed(0.0, 1.0)


def test_wave_lyapunov():
    assert wave_lyapunov(-2.0, 1.0, 1.0) == pytest.approx(1.0)
    assert wave_lyapunov(-2.5, 1.0, 1.0) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        wave_lyapunov(-1.9, 1.0, 1.0)


@pytest.mark.parametrize("kappa, expected", [(0.5, -2.5), (0.25, -4.25), (1.0, -2.0), (3.0, -2.0), (math.inf, -2.0)])
def test_predicted_speed(kappa, expected):
    assert predicted_speed(kappa, 1.0, 1.0) == pytest.approx(expected)


def test_predicted_speed_is_continuous_at_threshold():
    threshold = math.sqrt(2.0 / 0.5)
    below = predicted_speed(threshold * (1 - 1e-9), 0.5, 2.0)
    assert below == pytest.approx(predicted_speed(threshold, 0.5, 2.0), abs=1e-6)


def test_predicted_speed_inverts_wave_lyapunov():
    for v in (-2.2, -3.0, -5.0):
        assert predicted_speed(wave_lyapunov(v, 1.0, 1.0), 1.0, 1.0) == pytest.approx(v)


def test_predicted_speed_needs_positive_kappa():
    with pytest.raises(DomainError):
        predicted_speed(0.0, 1.0, 1.0)


# Travelling waves
@pytest.fixture(scope="module")
def wave():
    return kpp_wave_profile(-2.5, 1.0, 1.0)


def test_wave_is_normalized_and_monotone(wave):
    assert wave(0.0) == pytest.approx(0.5, abs=1e-9)
    assert np.all(np.diff(wave.values) <= 1e-12)
    assert wave.values[0] > 1.0 - 1e-9
    assert wave.values[-1] < 1e-6


def test_wave_tail_exponent(wave):
    tail = 1.0 - wave.values
    mask = (tail > 1e-7) & (tail < 1e-3)
    slope = np.polyfit(wave.grid[mask], np.log(tail[mask]), 1)[0]
    assert slope == pytest.approx(wave_lyapunov(-2.5, 1.0, 1.0), abs=1e-2)


def test_wave_solves_profile_equation(wave):
    assert np.max(np.abs(wave_ode_residual(wave))) <= 1e-6


def test_minimal_wave_exists():
    w = kpp_wave_profile(-2.0, 1.0, 1.0)
    assert w(0.0) == pytest.approx(0.5, abs=1e-9)
    assert np.max(np.abs(wave_ode_residual(w))) <= 1e-6


def test_wave_faster_than_minimal_speed_rejected():
    with pytest.raises(DomainError):
        kpp_wave_profile(-1.5, 1.0, 1.0)


# Fronts of solutions
def _translated_wave_solution(wave, v, h=0.01):
    times = 0.4 * np.arange(6)
    grid = np.round(np.arange(-20.0, 20.0 + 0.5 * h, h), 10)
    values = np.vstack([wave(grid - v * t) for t in times])
    return KppSolution(times=times, grid=grid, values=values, gamma=1.0, mu=1.0)


def test_front_speed_of_translated_wave(wave):
    solution = _translated_wave_solution(wave, -2.5)
    track = measure_front_speed(solution, (0.0, 2.0))
    assert track.speed == pytest.approx(-2.5, abs=1e-6)
    assert kpp_form_distance(solution, 1.2, wave) <= 1e-4


def test_front_speed_window_needs_two_snapshots(wave):
    solution = _translated_wave_solution(wave, -2.5)
    with pytest.raises(ValueError):
        measure_front_speed(solution, (0.5, 0.7))


def test_speed_snapshot_times():
    np.testing.assert_allclose(speed_snapshot_times((10.0, 11.0)), [10.0, 10.25, 10.5, 10.75, 11.0])


@pytest.mark.slow
def test_steep_data_select_minimal_speed():
    grid = KppGrid.build(-100.0, 10.0, 0.05, gamma=1.0)
    window = (20.0, 40.0)
    solution = kpp_solve(Profile.step(0.0), 1.0, 1.0, 40.0, grid=grid, snapshot_times=speed_snapshot_times(window))
    track = measure_front_speed(solution, window)
    assert track.speed == pytest.approx(minimal_speed(1.0, 1.0), rel=0.05)


@pytest.mark.slow
def test_flat_data_select_their_own_speed():
    grid = KppGrid.build(-70.0, 30.0, 0.05, gamma=1.0)
    window = (10.0, 20.0)
    solution = kpp_solve(Profile.logistic(0.5), 1.0, 1.0, 20.0, grid=grid, snapshot_times=speed_snapshot_times(window))
    track = measure_front_speed(solution, window)
    assert track.speed == pytest.approx(predicted_speed(0.5, 1.0, 1.0), rel=0.05)


@pytest.mark.slow
def test_flat_data_converge_in_form(wave):
    grid = KppGrid.build(-70.0, 30.0, 0.05, gamma=1.0)
    times = [5.0, 10.0, 20.0]
    solution = kpp_solve(Profile.logistic(0.5), 1.0, 1.0, 20.0, grid=grid, snapshot_times=times)
    distances = [kpp_form_distance(solution, t, wave) for t in times]
    assert distances[-1] < distances[0]
    assert distances[-1] <= 0.02


# Weak form
WEAK_TEST = SpaceTimeTestFunction(TestFunction(TestFunctionFamily.GAUSSIAN_BUMP, -1.0, 1.0), 1.0)


def test_travelling_wave_is_weak_solution(wave):
    def travelling(t, x):
        return wave(x - wave.speed * t)

    def slower(t, x):
        return wave(x - (wave.speed + 0.5) * t)

    assert abs(weak_residual(travelling, WEAK_TEST, 0.0, 1.0, 1.0, gamma=1.0, tol=1e-6)) <= 1e-4
    assert abs(weak_residual(slower, WEAK_TEST, 0.0, 1.0, 1.0, gamma=1.0, tol=1e-6)) >= 1e-2


def test_solver_started_on_wave_is_weak_solution(wave):
    grid = KppGrid.build(-40.0, 40.0, 0.05, gamma=1.0)
    solution = kpp_solve(wave.as_profile(), 1.0, 1.0, 1.0, grid=grid, snapshot_times=np.linspace(0.0, 1.0, 51))
    residual = weak_residual(solution.field, WEAK_TEST, 0.0, 1.0, 1.0, gamma=1.0, tol=1e-6)
    assert abs(residual) <= 1e-3
    assert abs(weak_residual(solution.field, WEAK_TEST, 0.0, 2.0, 1.0, gamma=1.0, tol=1e-6)) >= 1e-2
    assert measure_front_speed(solution, (0.2, 1.0)).speed == pytest.approx(wave.speed, rel=1e-2)
    assert kpp_form_distance(solution, 1.0, wave) <= 1e-3


def test_solution_field_interpolates_snapshots():
    grid = KppGrid.build(-20.0, 20.0, 0.05, gamma=1.0)
    solution = kpp_solve(Profile.logistic(1.0), 1.0, 1.0, 0.5, grid=grid, snapshot_times=[0.25])
    x = solution.grid[::40]
    np.testing.assert_allclose(solution.field(0.25, x), solution.snapshot(0.25)[::40], atol=1e-15)
    halfway = solution.field(0.125, x)
    np.testing.assert_allclose(halfway, 0.5 * (solution.snapshot(0.0)[::40] + solution.snapshot(0.25)[::40]), atol=1e-15)
    assert solution.field(0.5, np.array([-100.0, 100.0])).tolist() == [1.0, 0.0]
