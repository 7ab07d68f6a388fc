import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from app.errors import DomainError
from app.models import MixingProfile
from app.schemas import ModelParams
from app.services.longtime_service import (
    asymptotic_com_speed,
    center_of_mass,
    com_speed_regression,
    estimate_stationary_gap,
    gap_chain_dense,
    gap_chain_oracle_n2,
    gap_chain_sparse,
    instantaneous_com_drift,
    mixing_diagnostic,
    pairwise_distance_sum,
    summary_statistic,
    to_relative,
    total_variation,
)
from app.services.particle_service import make_rng


def closed_form_gap_law(alpha, beta, mu2, size):
    """pi_d = 2 pi_0 r^d (d >= 1) for the untruncated N = 2 gap chain."""
    s, c = alpha + beta, mu2 / 2.0
    r = ((2 * s + c) - math.sqrt((2 * s + c) ** 2 - 4 * s * s)) / (2 * s)
    pi0 = 1.0 / (1.0 + 2.0 * r / (1.0 - r))
    law = 2.0 * pi0 * r ** np.arange(size)
    law[0] = pi0
    return law, 2.0 * pi0 * r / (1.0 - r) ** 2


# Relative coordinates and center of mass
def test_to_relative():
    np.testing.assert_array_equal(to_relative([3, 5, 3, 9]).y, [0, 2, 0, 6])
    with pytest.raises(ValueError):
        to_relative([])


def test_center_of_mass():
    assert center_of_mass([1, 2, 3, 6]) == 3.0


@given(st.lists(st.integers(min_value=-1000, max_value=1000), min_size=1, max_size=30))
def test_pairwise_distance_sum_matches_brute_force(positions):
    brute = sum(abs(a - b) for a, b in itertools.combinations(positions, 2))
    assert pairwise_distance_sum(positions) == pytest.approx(brute, abs=1e-9)


def test_instantaneous_drift():
    params = ModelParams(n_particles=2, alpha=2.0, beta=1.0, mu_n=1.0)
    assert instantaneous_com_drift([0, 4], params) == pytest.approx(0.0)
    assert instantaneous_com_drift([7, 7], params) == pytest.approx(1.0)


def test_asymptotic_com_speed(fixed_params):
    assert asymptotic_com_speed(fixed_params, 2.0) == pytest.approx(0.55)
    assert asymptotic_com_speed(fixed_params, 0.0) == pytest.approx(fixed_params.lam)
    with pytest.raises(ValueError):
        asymptotic_com_speed(fixed_params, -1.0)


# N = 2 gap oracle
def test_oracle_matches_closed_form():
    result = gap_chain_oracle_n2(1.0, 1.0, 1.0)
    law, mean = closed_form_gap_law(1.0, 1.0, 1.0, 50)
    np.testing.assert_allclose(result.distribution[:50], law, atol=1e-10)
    assert result.mean_gap == pytest.approx(mean, rel=1e-8)
    assert result.mean_gap == pytest.approx(1.94, abs=0.01)


@pytest.mark.parametrize("alpha, beta, mu2", [(1.0, 1.0, 1.0), (2.0, 1.0, 0.5), (0.3, 0.0, 4.0)])
def test_oracle_is_a_probability_law(alpha, beta, mu2):
    result = gap_chain_oracle_n2(alpha, beta, mu2)
    assert result.distribution.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(result.distribution >= 0.0)
    assert result.mass_defect < 1e-9
    assert result.distribution.size == result.truncation + 1


def test_oracle_mean_decreases_with_interaction():
    means = [gap_chain_oracle_n2(1.0, 1.0, mu2).mean_gap for mu2 in (1.0, 10.0, 100.0)]
    assert means[0] > means[1] > means[2] > 0.0


def test_strong_interaction_keeps_gap_small():
    assert gap_chain_oracle_n2(1.0, 1.0, 100.0).mean_gap < 0.2


def test_sparse_and_dense_solves_agree():
    np.testing.assert_allclose(
        gap_chain_sparse(1.0, 1.0, 1.0, 200),
        gap_chain_dense(1.0, 1.0, 1.0, 200),
        atol=1e-8,
    )


def test_oracle_doubles_truncation_for_weak_interaction():
    result = gap_chain_oracle_n2(1.0, 1.0, 0.01, truncation=10)
    assert result.truncation > 10
    assert result.mass_defect < 1e-9
    _, mean = closed_form_gap_law(1.0, 1.0, 0.01, 1)
    assert result.mean_gap == pytest.approx(mean, rel=1e-6)


def test_oracle_without_motion_is_point_mass():
    result = gap_chain_oracle_n2(0.0, 0.0, 1.0)
    assert result.mean_gap == 0.0
    assert result.distribution[0] == 1.0


def test_oracle_input_errors():
    with pytest.raises(DomainError):
        gap_chain_oracle_n2(1.0, 1.0, 0.0)
    with pytest.raises(DomainError):
        gap_chain_oracle_n2(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        gap_chain_oracle_n2(1.0, 1.0, 1.0, truncation=9)


# Stationary gap and speed
def test_gap_vanishes_without_motion():
    params = ModelParams(n_particles=5, alpha=0.0, beta=0.0, mu_n=1.0)
    estimate = estimate_stationary_gap(params, 100.0, 10.0, make_rng(21), batches=5, positions=[0, 3, 8, 13, 40])
    assert estimate.mean == 0.0
    assert estimate.ci_half_width == 0.0


def test_stationary_gap_input_errors(fixed_params):
    with pytest.raises(ValueError):
        estimate_stationary_gap(fixed_params, 1.0, 0.0, make_rng(0))
    with pytest.raises(ValueError):
        estimate_stationary_gap(fixed_params, 1.0, 10.0, make_rng(0), batches=1)


def test_short_run_estimates_are_consistent(fixed_params):
    estimate = com_speed_regression(fixed_params, 10.0, 50.0, make_rng(22), batches=5)
    assert estimate.gap.batch_means.size == 5
    assert estimate.gap.mean > 0.0
    expected_drift = asymptotic_com_speed(fixed_params, estimate.gap.mean)
    assert estimate.drift_average == pytest.approx(expected_drift, rel=1e-9)


@pytest.mark.slow
@pytest.mark.parametrize("alpha, beta, mu2", [(1.0, 1.0, 1.0), (2.0, 1.0, 1.0)])
def test_monte_carlo_gap_matches_oracle(alpha, beta, mu2):
    params = ModelParams(n_particles=2, alpha=alpha, beta=beta, mu_n=mu2)
    oracle = gap_chain_oracle_n2(alpha, beta, mu2)
    estimate = estimate_stationary_gap(params, 100.0, 100_000.0, make_rng(23), batches=50)
    assert estimate.mean == pytest.approx(oracle.mean_gap, rel=0.02)


@pytest.mark.slow
def test_com_slope_matches_drift(fixed_params):
    estimate = com_speed_regression(fixed_params, 50.0, 2000.0, make_rng(24), batches=20)
    assert abs(estimate.slope - estimate.drift_average) <= estimate.slope_ci + estimate.drift_ci


# Mixing
def test_summary_statistic():
    assert summary_statistic([3, 5, 3, 9]) == (6, 2)
    assert summary_statistic([4, 4]) == (0, 2)


def test_total_variation():
    a, b = (1, 1), (2, 0)
    assert total_variation([a, a, b, b], [a, b, b, b]) == pytest.approx(0.25)
    assert total_variation([a, b], [b, a]) == 0.0
    assert total_variation([a], [b]) == 1.0


def test_mixing_input_errors(fixed_params):
    with pytest.raises(ValueError):
        mixing_diagnostic(fixed_params, [1.0], 200, seed=0)
    with pytest.raises(ValueError):
        mixing_diagnostic(fixed_params, [1.0, 2.0], 100, seed=0)


@pytest.mark.slow
def test_total_variation_decays():
    params = ModelParams(n_particles=5, alpha=1.0, beta=1.0, mu_n=1.0)
    profile = mixing_diagnostic(params, [1.0, 5.0, 25.0], 1000, seed=25)
    floor = profile.noise_floor
    assert profile.tv[0] > floor
    assert all(b < a or b <= floor for a, b in zip(profile.tv, profile.tv[1:]))
    assert profile.slope < 0.0


def test_noise_floor_scales_with_replicas():
    profile = MixingProfile(np.array([1.0, 2.0]), np.array([0.5, 0.1]), -1.0, 0.0, 0.0, n_states=16, replicas=400)
    assert profile.noise_floor == pytest.approx(0.2)
