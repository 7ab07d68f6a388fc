import json

import pytest

from app.cli import EXIT_CONFIG, build_parser, load_config, main


def test_oracle_command_writes_results(tmp_path, capsys):
    assert main(["oracle-n2", "--alpha", "2", "--beta", "1", "--mu2", "1", "--out", str(tmp_path)]) == 0
    written = sorted(p.suffix for p in tmp_path.iterdir())
    assert written == [".csv", ".json"]
    sidecar = json.loads(next(tmp_path.glob("*.json")).read_text(encoding="utf-8"))
    assert sidecar["config"]["params"]["alpha"] == 2.0
    assert "records ->" in capsys.readouterr().out


def test_invalid_config_file_exits_with_config_status(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"kind": "oracle_n2", "params": {"n_particles": 3}}), encoding="utf-8")
    assert main(["oracle-n2", "--config", str(config), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_unreadable_config_exits_with_config_status(tmp_path):
    assert main(["oracle-n2", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_kind_must_match_subcommand(tmp_path):
    config = tmp_path / "oracle.json"
    config.write_text(
        json.dumps(
            {
                "kind": "oracle_n2",
                "params": {"n_particles": 2, "alpha": 1.0, "beta": 1.0, "regime": "fixed", "mu_n": 1.0},
            }
        ),
        encoding="utf-8",
    )
    assert main(["longtime", "--config", str(config), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_oracle_without_interaction_is_rejected(tmp_path):
    assert main(["oracle-n2", "--mu2", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_seed_override_regenerates_seeds():
    parser = build_parser()
    first = load_config(parser.parse_args(["longtime", "--seed", "1", "--replicas", "3"]))
    second = load_config(parser.parse_args(["longtime", "--seed", "2", "--replicas", "3"]))
    assert len(first.seeds) == 3
    assert first.seeds != second.seeds
    assert first.seed == 1


def test_waves_variant_selects_preset():
    parser = build_parser()
    assert load_config(parser.parse_args(["waves"])).kind.value == "waves_transport"
    assert load_config(parser.parse_args(["waves", "--variant", "kpp"])).kind.value == "waves_kpp"


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main(["nonsense"])
