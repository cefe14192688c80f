import json
import logging

import numpy as np
import pytest
from toml import load

from deersim import __version__, core
from deersim.analysis import FREQUENCY_AXIS, TS_AXIS, DeerCurve, lorentzian_model, write_curve_csv
from deersim.core import main, run, setup_logging


def test_version_matches_pyproject():
    with open("pyproject.toml", "r") as f:
        pyproject = load(f)
    assert __version__ == pyproject["tool"]["poetry"]["version"]


def test_version_matches_changelog():
    with open("CHANGELOG.md", "r") as f:
        changelog = f.read()
    assert f"## [{__version__}]" in changelog


@pytest.mark.integration
def test_simulate_writes_outputs(mock_terminal, config_file, tmp_path):
    string_io, _ = mock_terminal
    assert run(["simulate", str(config_file), "-w", "1"]) == 0
    output = string_io.getvalue()
    assert "Wrote" in output
    assert "DEER signal (analytic)" in output
    runs = tmp_path / "runs"
    assert (runs / "small.csv").exists()
    assert (runs / "small.manifest.json").exists()
    assert (runs / core.LOG_FILE).exists()


def test_simulate_overrides_seed_and_output(mock_terminal, config_file, tmp_path):
    out = tmp_path / "override"
    assert run(["simulate", str(config_file), "-w", "1", "--seed", "3", "--out", str(out)]) == 0
    manifest = json.loads((out / "small.manifest.json").read_text())
    assert manifest["config"]["engine"]["master_seed"] == 3


def test_quiet_suppresses_console_output(mock_terminal, config_file):
    string_io, _ = mock_terminal
    assert run(["simulate", str(config_file), "-w", "1", "--quiet"]) == 0
    assert "Wrote" not in string_io.getvalue()


def test_invalid_configuration_exit_code(mock_terminal, tmp_path, small_config_dict):
    string_io, _ = mock_terminal
    small_config_dict["targets"]["density_per_nm2"] = -0.1
    small_config_dict["engine"]["n_realizations"] = 0
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(small_config_dict))
    assert run(["simulate", str(path), "-w", "1"]) == 2
    output = string_io.getvalue()
    assert "Invalid configuration" in output
    assert "2 problem(s)" in output
    assert "engine.n_realizations must be >= 1" in output
    assert not (tmp_path / "runs" / "small.csv").exists()


def test_missing_configuration_file(mock_terminal, tmp_path):
    string_io, _ = mock_terminal
    assert run(["simulate", str(tmp_path / "nope.json")]) == 2
    assert "configuration file not found" in string_io.getvalue()


def test_partial_failure_exit_code(mock_terminal, tmp_path, small_config_dict):
    string_io, _ = mock_terminal
    small_config_dict["engine"].update({"name": "quantum", "n_realizations": 1, "max_qubits": 2})
    path = tmp_path / "capacity.json"
    path.write_text(json.dumps(small_config_dict))
    assert run(["simulate", str(path), "-w", "1"]) == 3
    assert "sweep point(s) failed" in string_io.getvalue()


@pytest.mark.integration
def test_compare_command(mock_terminal, config_file, tmp_path):
    string_io, _ = mock_terminal
    assert run(["compare", str(config_file), "--engines", "analytic", "bloch", "-w", "1"]) == 0
    assert "Engines against analytic" in string_io.getvalue()
    assert (tmp_path / "runs" / "small.comparison.json").exists()


def test_estimate_density_from_value(mock_terminal, tmp_path):
    string_io, _ = mock_terminal
    assert run(["estimate-density", "--min-signal", "0.466", "--out", str(tmp_path)]) == 0
    assert "0.3104" in string_io.getvalue()
    data = json.loads((tmp_path / "density.json").read_text())
    assert data["sigma_hat_per_nm2"] == pytest.approx(0.31, abs=0.005)
    assert data["above_dark_threshold"] is True


def test_estimate_density_from_curve(mock_terminal, tmp_path):
    path = tmp_path / "curve.csv"
    ts = np.arange(20.0, 441.0, 20.0)
    write_curve_csv(path, DeerCurve(TS_AXIS, ts, 1.0 - 0.1 * np.sin(np.pi * ts / 440.0), np.full(len(ts), 0.01)))
    assert run(["estimate-density", "--csv", str(path), "--window", "3", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "density.json").read_text())
    assert 0.9 < data["min_signal"] < 0.91
    assert data["sigma_hat_sem_per_nm2"] > 0


def test_estimate_density_domain_error(mock_terminal):
    string_io, _ = mock_terminal
    assert run(["estimate-density", "--min-signal", "0"]) == 1
    assert "Error:" in string_io.getvalue()


def test_fit_lorentzian_command(mock_terminal, tmp_path):
    x = np.arange(600.0, 701.0, 2.0)
    path = tmp_path / "spectrum.csv"
    write_curve_csv(path, DeerCurve(FREQUENCY_AXIS, x, lorentzian_model(x, 652.0, 20.0, 0.2, 1.0)))
    assert run(["fit-lorentzian", str(path), "--out", str(tmp_path)]) == 0
    fit = json.loads((tmp_path / "lorentzian.json").read_text())
    assert fit["parameters"]["center"]["value"] == pytest.approx(652.0, abs=1e-6)


def test_fit_relax_command(mock_terminal, tmp_path):
    t = np.geomspace(0.01, 20.0, 40)
    y = 0.3 * np.exp(-t / 0.4) + 0.7 * np.exp(-t / 3.0)
    path = tmp_path / "t1.csv"
    path.write_text("time_ms,contrast\n" + "".join(f"{a!r},{b!r}\n" for a, b in zip(t.tolist(), y.tolist())))
    assert run(["fit-relax", str(path), "--out", str(tmp_path)]) == 0
    fit = json.loads((tmp_path / "relaxation.json").read_text())
    assert fit["parameters"]["t_b"]["value"] == pytest.approx(3.0, rel=1e-4)


def test_split_compare_command(mock_terminal, tmp_path):
    ts = [100.0, 150.0, 200.0, 250.0]
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_curve_csv(first, DeerCurve(TS_AXIS, ts, [1.0, 0.9, 0.87, 0.95], [0.01] * 4))
    write_curve_csv(second, DeerCurve(TS_AXIS, ts, [1.0, 0.94, 0.92, 0.96], [0.01] * 4))
    assert run(["split-compare", str(first), str(second), "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "split_compare.json").read_text())
    assert data["difference_per_nm2"] < 0


def test_split_compare_misaligned_grids(mock_terminal, tmp_path):
    string_io, _ = mock_terminal
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_curve_csv(first, DeerCurve(TS_AXIS, [100.0, 200.0], [1.0, 0.9]))
    write_curve_csv(second, DeerCurve(TS_AXIS, [100.0, 300.0], [1.0, 0.9]))
    assert run(["split-compare", str(first), str(second)]) == 1
    assert "sweep grid" in string_io.getvalue()


def test_main_exits_with_code(mock_terminal):
    with pytest.raises(SystemExit) as exc_info:
        main(["estimate-density", "--min-signal", "0.9"])
    assert exc_info.value.code == 0


def test_setup_logging_levels(tmp_path):
    setup_logging(quiet=True, log_dir=str(tmp_path))
    stream, file_handler = core._handlers
    assert stream.level == logging.ERROR
    assert file_handler.level == logging.INFO
    setup_logging(debug=True)
    assert len(core._handlers) == 1
    assert core._handlers[0].level == logging.DEBUG
    assert logging.getLogger().level == logging.DEBUG
