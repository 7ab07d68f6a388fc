import math

import pytest
from pydantic import ValidationError

from app.cli import PRESETS
from app.schemas import ExperimentConfig, ExperimentKind, ModelParams, Regime, default_test_panel
from app.services.experiment_service import (
    ExperimentService,
    _decreasing_to_floor,
    load_expectations,
    mean_ci,
    run_experiment,
)

TRANSPORT = ModelParams(n_particles=2, alpha=2.0, beta=1.0, mu=1.0, regime=Regime.TRANSPORT)
ORACLE = ModelParams(n_particles=2, alpha=1.0, beta=1.0, mu_n=1.0)


def _records(response, metric):
    return [r for r in response.records if r.metric == metric]


def _signature(response):
    return [(r.metric, r.n, r.seed, r.time, r.value) for r in response.records]


# Configuration
@pytest.mark.parametrize(
    "payload",
    [
        {"kind": "hydro_transport", "params": {**TRANSPORT.model_dump(), "regime": "diffusive"}, "n_sweep": [8]},
        {"kind": "hydro_transport", "params": {**TRANSPORT.model_dump(), "beta": 2.0}, "n_sweep": [8]},
        {"kind": "hydro_transport", "params": TRANSPORT.model_dump()},
        {"kind": "hydro_transport", "params": TRANSPORT.model_dump(), "n_sweep": [1]},
        {"kind": "oracle_n2", "params": {**ORACLE.model_dump(), "n_particles": 3}},
        {"kind": "longtime", "params": TRANSPORT.model_dump()},
        {"kind": "oracle_n2", "params": ORACLE.model_dump(), "replicas": 3, "seeds": [1, 2]},
        {"kind": "oracle_n2", "params": ORACLE.model_dump(), "window": [1.0, -1.0]},
    ],
)
def test_invalid_configs_rejected(payload):
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(payload)


def test_seeds_derive_from_base_seed():
    first = ExperimentConfig(kind=ExperimentKind.ORACLE_N2, params=ORACLE, replicas=4, seed=7)
    second = ExperimentConfig(kind=ExperimentKind.ORACLE_N2, params=ORACLE, replicas=4, seed=7)
    other = ExperimentConfig(kind=ExperimentKind.ORACLE_N2, params=ORACLE, replicas=4, seed=8)
    assert len(first.seeds) == 4
    assert first.seeds == second.seeds
    assert first.seeds != other.seeds


def test_config_hash_ignores_output_dir(tmp_path):
    base = ExperimentConfig(kind=ExperimentKind.ORACLE_N2, params=ORACLE, seed=1)
    moved = ExperimentConfig(kind=ExperimentKind.ORACLE_N2, params=ORACLE, seed=1, output_dir=tmp_path)
    reseeded = ExperimentConfig(kind=ExperimentKind.ORACLE_N2, params=ORACLE, seed=2)
    assert base.config_hash() == moved.config_hash()
    assert base.config_hash() != reseeded.config_hash()
    assert len(base.config_hash()) == 64


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate(name):
    config = ExperimentConfig.model_validate(PRESETS[name])
    assert len(config.seeds) == config.replicas


def test_packaged_expectations():
    expectations = load_expectations()
    assert expectations.label == "calibration"
    assert expectations.transport_l1_max == 0.05


def test_mean_ci():
    mean, half = mean_ci([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert half == pytest.approx(4.302652729911275 / math.sqrt(3.0))
    assert mean_ci([5.0]) == (5.0, None)


def test_decreasing_to_floor():
    assert _decreasing_to_floor([0.9, 0.5, 0.1], floor=0.05)
    assert not _decreasing_to_floor([0.9, 0.5, 0.6], floor=0.05)
    assert _decreasing_to_floor([0.9, 0.04, 0.05], floor=0.05)
    assert _decreasing_to_floor([0.0, 0.0], floor=0.0)


# Runs
def test_oracle_run():
    config = ExperimentConfig(kind=ExperimentKind.ORACLE_N2, params=ORACLE, replicas=1)
    response = run_experiment(config, threads=1)
    assert response.experiment_id == f"oracle_n2-{config.config_hash()[:12]}"
    assert _records(response, "oracle_mean_gap")[0].value == pytest.approx(1.94, abs=0.01)
    assert _records(response, "check:oracle_dense_agreement")[0].value == 1.0
    assert response.metadata["seeds"] == config.seeds


def _hydro_config(**overrides):
    payload = {
        "kind": "hydro_transport",
        "params": TRANSPORT.model_dump(),
        "n_sweep": [16, 32],
        "time_points": [0.2],
        "replicas": 2,
        "seed": 3,
    }
    payload.update(overrides)
    return ExperimentConfig.model_validate(payload)


def test_hydro_transport_run():
    response = ExperimentService(_hydro_config(), threads=1).run()
    means = _records(response, "l1_distance_mean")
    assert [r.n for r in means] == [16, 32]
    assert all(0.0 <= r.value <= 12.0 for r in means)
    assert all(r.ci_half_width is not None for r in means)
    assert len(_records(response, "l1_distance")) == 4
    assert len(_records(response, "check:l1_threshold")) == 1
    assert len(_records(response, "check:event_count")) == 2
    assert len(_records(response, "events_expected")) == 2
    residuals = [r for r in response.records if r.metric.startswith("weak_residual_")]
    assert len(residuals) == len(default_test_panel())
    assert all(abs(r.value) <= 1e-6 for r in residuals)
    assert _records(response, "check:weak_residual")[0].value == 1.0


def test_threads_do_not_change_records():
    single = ExperimentService(_hydro_config(), threads=1).run()
    pooled = ExperimentService(_hydro_config(), threads=2).run()
    assert _signature(single) == _signature(pooled)


def test_martingale_run():
    config = ExperimentConfig.model_validate(
        {
            "kind": "martingale",
            "params": TRANSPORT.model_dump(),
            "n_sweep": [8, 16],
            "time_points": [0.1, 0.2],
            "replicas": 3,
            "seed": 4,
        }
    )
    response = ExperimentService(config, threads=1).run()
    panel = len(config.test_panel)
    assert len(_records(response, "W_0")) == 6
    assert all(r.time == 0.2 for r in _records(response, "W_0"))
    assert len([r for r in response.records if r.metric.endswith("_var_scaling")]) == panel
    assert len(_records(response, "V_0")) == 6
    assert all(r.value is not None for r in response.records if r.metric.startswith("V_"))



def _longtime_config(**overrides):
    payload = {
        "kind": "longtime",
        "params": ORACLE.model_dump(),
        "replicas": 2,
        "seed": 5,
        "longtime": {
            "burn_in": 10.0,
            "sample": 200.0,
            "batches": 20,
            "mixing_times": [1.0, 5.0],
            "mixing_replicas": 200,
        },
    }
    payload.update(overrides)
    return ExperimentConfig.model_validate(payload)


def test_longtime_run():
    response = ExperimentService(_longtime_config(), threads=1).run()
    assert len(_records(response, "gap")) == 2
    assert _records(response, "gap_mean")[0].value > 0.0
    assert _records(response, "oracle_mean_gap")[0].value == pytest.approx(1.94, abs=0.01)
    assert len(_records(response, "tv_distance")) == 2
    assert _records(response, "tv_noise_floor")[0].value > 0.0
    for name in ("com_speed", "tv_decreasing", "tv_slope_negative", "oracle_agreement"):
        assert len(_records(response, f"check:{name}")) == 1


def test_frozen_longtime_run_reports_null_slope():
    frozen = ORACLE.model_copy(update={"alpha": 0.0, "beta": 0.0})
    config = _longtime_config(
        params=frozen.model_dump(),
        longtime={"burn_in": 10.0, "sample": 200.0, "batches": 20, "mixing_times": [50.0, 100.0], "mixing_replicas": 200},
    )
    response = ExperimentService(config, threads=1).run()
    assert _records(response, "gap_mean")[0].value == 0.0
    assert _records(response, "oracle_mean_gap")[0].value == 0.0
    assert [r.value for r in _records(response, "tv_distance")] == [0.0, 0.0]
    assert _records(response, "tv_log_slope")[0].value is None
    checks = {r.metric: r.value for r in response.records if r.metric.startswith("check:")}
    assert checks["check:com_speed"] == 1.0
    assert checks["check:oracle_agreement"] == 1.0
    assert checks["check:tv_decreasing"] == 1.0
    assert response.model_dump_json()


def test_transport_waves_run():
    config = ExperimentConfig(kind=ExperimentKind.WAVES_TRANSPORT, params=TRANSPORT, replicas=1)
    response = ExperimentService(config, threads=1).run()
    checks = {r.metric: r.value for r in response.records if r.metric.startswith("check:")}
    for idx in range(3):
        assert checks[f"check:case{idx}:speed"] == 1.0
        assert checks[f"check:case{idx}:form_decreasing"] == 1.0
    assert len(_records(response, "case0:form_distance")) == 3


@pytest.mark.slow
@pytest.mark.parametrize("preset", ["hydro-transport", "hydro-kpp", "martingale"])
def test_preset_checks_pass(preset):
    response = run_experiment(ExperimentConfig.model_validate(PRESETS[preset]), threads=4)
    failed = [r.metric for r in response.records if r.metric.startswith("check:") and r.value != 1.0]
    assert failed == []


@pytest.mark.slow
def test_kpp_waves_preset():
    response = run_experiment(ExperimentConfig.model_validate(PRESETS["waves-kpp"]), threads=2)
    checks = {r.metric: r.value for r in response.records if r.metric.startswith("check:")}
    assert checks["check:steep:speed"] == 1.0
    assert checks["check:kappa=0.5:speed"] == 1.0
