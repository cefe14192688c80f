import argparse
import json
from unittest.mock import patch

import pytest

from deersim.config import OUTPUT_DIR_ENV, Config, ExperimentConfig, load_config
from deersim.errors import ConfigValidationError


def test_defaults_are_valid():
    config = ExperimentConfig()
    assert config.validate() == []
    assert config.engine.name == "quantum"
    assert config.sequence.sweep_values[0] == 20.0
    assert config.sequence.sweep_values[-1] == 440.0


def test_from_dict_fills_defaults(small_config_dict):
    config = ExperimentConfig.from_dict(small_config_dict)
    assert config.engine.n_realizations == 4
    assert config.targets.max_targets == 6
    assert config.targets.detuning_shape == "lorentzian"
    assert config.sequence.tau_ns == 900.0
    assert isinstance(config.targets.rmax_factor, float)


def test_to_dict_round_trip(small_config_dict):
    config = ExperimentConfig.from_dict(small_config_dict)
    assert ExperimentConfig.from_dict(json.loads(config.to_json())) == config


def test_structural_problems_reported_together():
    with pytest.raises(ConfigValidationError) as exc_info:
        ExperimentConfig.from_dict({"targets": {"bogus": 1, "rmax_factor": "big"}, "extra": {}})
    violations = exc_info.value.violations
    assert len(violations) == 3
    assert "unknown section 'extra'" in violations
    assert "unknown key targets.bogus" in violations
    assert "targets.rmax_factor must be a number" in violations


def test_value_problems_reported_together():
    data = {"targets": {"density_per_nm2": -1.0},
            "engine": {"name": "classical", "n_realizations": 0},
            "sequence": {"sweep_values": [100, 460]}}
    with pytest.raises(ConfigValidationError) as exc_info:
        ExperimentConfig.from_dict(data)
    text = "\n".join(exc_info.value.violations)
    assert "targets.density must be >= 0" in text
    assert "engine.name must be one of" in text
    assert "engine.n_realizations must be >= 1" in text
    assert "sequence.sweep_values: 460.0 rejected" in text
    assert "sequence.sweep_values: 100.0" not in text


def test_booleans_are_not_numbers():
    with pytest.raises(ConfigValidationError) as exc_info:
        ExperimentConfig.from_dict({"engine": {"n_realizations": True, "save_raw": 1}})
    assert exc_info.value.violations == ["engine.n_realizations must be an integer",
                                         "engine.save_raw must be true or false"]


def test_quantum_engine_needs_target_cap():
    with pytest.raises(ConfigValidationError) as exc_info:
        ExperimentConfig.from_dict({"targets": {"max_targets": None}})
    assert "targets.max_targets must be set for the quantum engine" in exc_info.value.violations
    config = ExperimentConfig.from_dict({"targets": {"max_targets": None}, "engine": {"name": "bloch"}})
    assert config.sampling_params().max_targets is None


def test_thermal_state_rejected_for_analytic_engine():
    with pytest.raises(ConfigValidationError):
        ExperimentConfig.from_dict({"engine": {"name": "analytic", "initial_state": "thermal"}})


def test_relaxation_checked():
    with pytest.raises(ConfigValidationError) as exc_info:
        ExperimentConfig.from_dict({"targets": {"t1_us": 1.0, "t2_us": 5.0}})
    assert any("must not exceed 2*t1" in v for v in exc_info.value.violations)


@pytest.mark.parametrize("schema,ok", [("1.0", True), ("1.4", True), ("2.0", False), ("latest", False)])
def test_schema_version_major_must_match(schema, ok):
    if ok:
        assert ExperimentConfig.from_dict({"schema_version": schema}).schema_version == schema
    else:
        with pytest.raises(ConfigValidationError):
            ExperimentConfig.from_dict({"schema_version": schema})


def test_output_directory_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    assert ExperimentConfig().output.directory == str(tmp_path)
    assert ExperimentConfig.from_dict({"output": {"directory": "elsewhere"}}).output.directory == "elsewhere"


def test_overrides():
    config = ExperimentConfig().with_overrides(seed=42, out="/tmp/deer")
    assert config.engine.master_seed == 42
    assert config.output.directory == "/tmp/deer"
    assert ExperimentConfig().with_overrides() == ExperimentConfig()


def test_frequency_sweep_drives():
    config = ExperimentConfig.from_dict({"sequence": {"sweep_kind": "frequency_sweep", "sweep_values": [640.0, 653.0],
                                                      "drive_duration_ns": 100.0}})
    drives = config.drives()
    assert [d.duration for d in drives] == [100.0, 100.0]
    assert drives[0].frequency_offset == pytest.approx(-13.0, abs=0.5)
    assert drives[1].frequency_offset - drives[0].frequency_offset == pytest.approx(13.0)


def test_load_config(config_file):
    assert load_config(str(config_file)).output.label == "small"


def test_load_config_reports_unreadable_files(tmp_path):
    with pytest.raises(ConfigValidationError) as exc_info:
        load_config(str(tmp_path / "missing.json"))
    assert "configuration file not found" in exc_info.value.violations[0]
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigValidationError):
        load_config(str(broken))


def test_cli_arguments():
    config = Config(["simulate", "exp.json", "--workers", "2", "--seed", "5", "-q"])
    assert config.command == "simulate"
    assert config.workers == 2
    assert config.seed == 5
    assert config.quiet
    assert config.out is None


def test_invalid_worker_count():
    with patch('argparse.ArgumentParser.parse_args', return_value=argparse.Namespace(
        command="simulate",
        config="exp.json",
        workers=0,
        seed=None,
        out=None,
        quiet=False,
        debug=False
    )):
        with pytest.raises(ValueError) as exc_info:
            config = Config()
            _ = config.workers
        assert "--workers must be >= 1" in str(exc_info.value)


def test_debug_from_environment(monkeypatch):
    monkeypatch.setenv("DEERSIM_DEBUG", "1")
    assert Config(["estimate-density", "--min-signal", "0.5"]).debug


def test_density_sources_are_exclusive():
    with pytest.raises(SystemExit):
        Config(["estimate-density", "--min-signal", "0.5", "--csv", "curve.csv"])
    with pytest.raises(SystemExit):
        Config(["estimate-density"])


@pytest.mark.parametrize("name", ["ts_sweep_quantum.json", "spectrum.json"])
def test_shipped_configurations_validate(name):
    assert load_config(f"configs/{name}").validate() == []
