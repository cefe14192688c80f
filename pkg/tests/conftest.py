"""Test configuration and fixtures"""
import io
import json
import logging
from unittest.mock import patch

import pytest
from rich.console import Console


@pytest.fixture
def mock_terminal():
    """Mock terminal with captured output"""
    string_io = io.StringIO()
    log_io = io.StringIO()

    log_handler = logging.StreamHandler(log_io)
    logging.getLogger().addHandler(log_handler)

    console = Console(file=string_io, force_terminal=True, width=120, highlight=False)
    with patch('deersim.core.console', console):
        yield string_io, log_io
    logging.getLogger().removeHandler(log_handler)


@pytest.fixture
def small_config_dict(tmp_path):
    """A fast analytic experiment writing into tmp_path"""
    return {
        "schema_version": "1.0",
        "physics": {"field_gauss": 233.0, "depth_nm": 12.0},
        "targets": {"density_per_nm2": 0.05, "rmax_factor": 3.0, "min_separation_nm": 0.0,
                    "detuning_fwhm_mhz": 0.0, "max_targets": 6},
        "sequence": {"tau_ns": 900.0, "sweep_values": [20.0, 60.0, 100.0, 140.0], "rabi_mhz": 10.0},
        "engine": {"name": "analytic", "n_realizations": 4, "master_seed": 7},
        "output": {"directory": str(tmp_path / "runs"), "label": "small"},
    }


@pytest.fixture
def config_file(tmp_path, small_config_dict):
    """Write the small configuration to disk and return its path"""
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(small_config_dict))
    return path


@pytest.fixture(autouse=True)
def reset_cli_logging():
    """Detach handlers installed by the CLI so they never outlive a test's streams"""
    yield
    from deersim import core
    root = logging.getLogger()
    for handler in core._handlers:
        root.removeHandler(handler)
        handler.close()
    core._handlers.clear()
    root.setLevel(logging.WARNING)
