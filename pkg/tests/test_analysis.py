import doctest
import math

import numpy as np
import pytest

from deersim import analysis
from deersim.analysis import (FREQUENCY_AXIS, TS_AXIS, DeerCurve, biexponential_jacobian, biexponential_model,
                              classify_curve_shape, classify_densities, count_sign_changes, detrend,
                              estimate_density, extract_min, fit_biexponential, fit_lorentzian, fit_lorentzian_xy,
                              lorentzian_jacobian, lorentzian_model, mean_ratio, min_sem, normalize_to_first,
                              pair_average, read_curve_csv, read_xy_csv, smooth, split_compare, write_curve_csv)
from deersim.errors import AlignmentError, DomainError, ParameterError

DYE_DENSITIES = [0.31, 0.16, 0.14, 0.14, 0.10]
CONTROL_DENSITIES = [0.016, 0.0098, 0.016, 0.022, 0.020, 0.036, 0.020]


def test_docstrings():
    """Test docstrings examples"""
    results = doctest.testmod(analysis)
    assert results.failed == 0


def test_estimate_density_from_floor():
    estimate = estimate_density(0.466, 12.0, 900.0)
    assert estimate.sigma_hat == pytest.approx(0.31, abs=0.005)
    assert estimate.above_dark_threshold
    assert estimate.status == "ok"


def test_estimate_density_clamps_noise_above_baseline():
    estimate = estimate_density(1.02)
    assert estimate.sigma_hat == 0.0
    assert estimate.status == "noise-floor"
    assert not estimate.above_dark_threshold


def test_estimate_density_rejects_nonpositive_inputs():
    for kwargs in (dict(min_signal=0.0), dict(min_signal=0.5, mean_depth=0.0), dict(min_signal=0.5, tau=-1.0)):
        with pytest.raises(DomainError):
            estimate_density(**kwargs)


def test_estimate_density_propagates_sem():
    estimate = estimate_density(0.8, min_signal_sem=0.01)
    assert estimate.sigma_hat_sem == pytest.approx(0.01 / (0.8 * analysis.eq1_coefficient(12.0, 900.0)))


def test_dye_and_control_classes():
    assert all(classify_densities(DYE_DENSITIES))
    assert not any(classify_densities(CONTROL_DENSITIES))
    assert 7 <= mean_ratio(DYE_DENSITIES, CONTROL_DENSITIES) <= 14


def test_smooth_preserves_lines_and_shrinks_at_edges():
    assert smooth([1.0, 2.0, 3.0, 4.0, 5.0], 3) == pytest.approx([1.0, 2.0, 3.0, 4.0, 5.0])
    assert smooth([0.0, 3.0, 0.0], 3)[0] == 0.0
    with pytest.raises(ParameterError):
        smooth([1.0, 2.0, 3.0], 2)
    with pytest.raises(ParameterError):
        smooth([1.0, 2.0, 3.0], 5)


def test_extract_min_breaks_ties_toward_smaller_x():
    curve = DeerCurve(TS_AXIS, [10.0, 20.0, 30.0, 40.0, 50.0], [3.0, 1.0, 2.0, 1.0, 3.0], [0.1, 0.2, 0.3, 0.4, 0.5])
    assert extract_min(curve, window=1) == (1.0, 20.0)
    assert min_sem(curve, 1) == 0.2


def test_extract_min_recovers_floor_of_noisy_cosines():
    rng = np.random.default_rng(5)
    x = np.arange(0.0, 441.0, 5.0)
    floor, sem = 0.6, 0.01
    truth = floor + (1.0 - floor) * (1.0 + np.cos(2 * math.pi * x / 440.0)) / 2.0
    hits = 0
    for _ in range(100):
        curve = DeerCurve(TS_AXIS, x, truth + rng.normal(0.0, sem, len(x)), np.full(len(x), sem))
        min_signal, _ = extract_min(curve, window=5)
        hits += abs(min_signal - floor) <= 1.5 * sem
    assert hits >= 95


def test_curve_requires_increasing_sweep():
    with pytest.raises(ParameterError):
        DeerCurve(TS_AXIS, [10.0, 10.0], [1.0, 1.0])
    with pytest.raises(ParameterError):
        DeerCurve("time", [10.0], [1.0])


def test_detrend_and_sign_changes():
    assert detrend([0.0, 1.0, 2.0]) == pytest.approx([0.0, 0.0, 0.0])
    assert count_sign_changes([1.0, -1.0, 1.0, -1.0]) == 3
    # excursions inside the dead band are ignored
    assert count_sign_changes([1.0, 0.05, -0.05, 1.0, -1.0]) == 1
    assert count_sign_changes([]) == 0


def test_curve_shape_classes():
    x = np.arange(0.0, 441.0, 5.0)
    ringing = -np.exp(-x / 300.0) * np.cos(2 * math.pi * x / 100.0)
    settling = 0.8 + 0.2 * (1.0 - np.exp(-x / 50.0))
    assert classify_curve_shape(ringing) == "oscillatory"
    assert classify_curve_shape(settling) == "overdamped"
    assert classify_curve_shape([1.0, 0.5]) == "overdamped"


def test_lorentzian_jacobian_matches_finite_differences():
    x = np.linspace(600.0, 700.0, 21)
    params = np.array([652.0, 20.0, 0.3, 1.0])
    analytic = lorentzian_jacobian(x, *params)
    for j in range(4):
        step = np.zeros(4)
        step[j] = 1e-6 * max(1.0, abs(params[j]))
        numeric = (lorentzian_model(x, *(params + step)) - lorentzian_model(x, *(params - step))) / (2 * step[j])
        assert analytic[:, j] == pytest.approx(numeric, abs=1e-6)


def test_lorentzian_fit_recovers_noiseless_line():
    x = np.arange(600.0, 701.0, 1.0)
    y = lorentzian_model(x, 652.0, 20.0, 0.3, 1.0)
    fit = fit_lorentzian(DeerCurve(FREQUENCY_AXIS, x, y))
    assert fit.converged
    assert fit["center"] == pytest.approx(652.0, abs=1e-6)
    assert fit["fwhm"] == pytest.approx(20.0, abs=1e-6)
    assert fit["amplitude"] == pytest.approx(0.3, abs=1e-6)
    assert fit.to_dict()["parameters"]["baseline"]["value"] == pytest.approx(1.0, abs=1e-6)


def test_lorentzian_fit_with_multiplicative_noise():
    rng = np.random.default_rng(11)
    x = np.linspace(622.0, 682.0, 50)
    clean = lorentzian_model(x, 652.0, 20.0, 0.5, 1.0)
    hits = 0
    for _ in range(100):
        fit = fit_lorentzian_xy(x, clean * (1.0 + 0.05 * rng.standard_normal(len(x))))
        hits += abs(fit["center"] - 652.0) <= 1.0
    assert hits >= 95


def test_lorentzian_fit_of_flat_curve():
    x = np.arange(600.0, 701.0, 2.0)
    fit = fit_lorentzian(DeerCurve(FREQUENCY_AXIS, x, np.full(len(x), 0.8)))
    assert fit.converged
    assert fit["amplitude"] == pytest.approx(0.0, abs=1e-12)
    assert fit["baseline"] == pytest.approx(0.8)
    assert fit.relative_uncertainty("amplitude") > 1.0


def test_lorentzian_fit_accepts_unsorted_points():
    x = np.arange(600.0, 701.0, 2.0)
    order = np.random.default_rng(0).permutation(len(x))
    fit = fit_lorentzian_xy(x[order], lorentzian_model(x, 652.0, 20.0, 0.3, 1.0)[order])
    assert fit["center"] == pytest.approx(652.0, abs=1e-6)


def test_lorentzian_fit_input_checks():
    with pytest.raises(ParameterError):
        fit_lorentzian_xy([1.0, 2.0, 3.0], [1.0, 0.5, 1.0])
    with pytest.raises(ParameterError):
        fit_lorentzian(DeerCurve(TS_AXIS, np.arange(10.0), np.ones(10)))


def test_biexponential_jacobian_matches_finite_differences():
    t = np.geomspace(0.01, 20.0, 30)
    p = np.array([0.3, math.log(0.4), 0.7, math.log(2.6), 0.05])
    analytic = biexponential_jacobian(t, p)
    for j in range(5):
        step = np.zeros(5)
        step[j] = 1e-6
        upper = biexponential_model(t, *analysis._unpack(p + step))
        lower = biexponential_model(t, *analysis._unpack(p - step))
        assert analytic[:, j] == pytest.approx((upper - lower) / 2e-6, abs=1e-6)


def test_biexponential_fit_recovers_noiseless_decay():
    t = np.geomspace(0.01, 20.0, 60)
    y = biexponential_model(t, 0.3, 0.4, 0.7, 3.0, 0.0)
    fit = fit_biexponential(t, y)
    assert fit.converged
    assert fit["t_a"] == pytest.approx(0.4, rel=1e-6)
    assert fit["t_b"] == pytest.approx(3.0, rel=1e-6)
    assert fit["a1"] == pytest.approx(0.3, rel=1e-6)
    assert fit["a2"] == pytest.approx(0.7, rel=1e-6)
    assert fit["t_a"] <= fit["t_b"]


def test_biexponential_fit_of_single_exponential_degenerates():
    t = np.geomspace(0.01, 20.0, 40)
    fit = fit_biexponential(t, 0.7 * np.exp(-t / 3.0) + 0.05)
    assert fit.residual_norm < 1e-8
    one_component = min(abs(fit["a1"]), abs(fit["a2"])) < 1e-4
    merged = fit["t_a"] == pytest.approx(fit["t_b"], rel=1e-3)
    assert one_component or merged


def test_biexponential_fit_finds_sub_ms_component():
    t = np.geomspace(0.01, 10.0, 60)  # ms
    fit = fit_biexponential(t, biexponential_model(t, 0.4, 0.2, 0.5, 1.5, 0.05))
    assert fit["t_a"] < 1.0
    assert fit["t_a"] == pytest.approx(0.2, rel=1e-5)
    assert fit["t_b"] == pytest.approx(1.5, rel=1e-5)
    assert fit["offset"] == pytest.approx(0.05, abs=1e-6)


def test_biexponential_fit_input_checks():
    with pytest.raises(ParameterError):
        fit_biexponential(np.arange(5.0), np.ones(5))
    with pytest.raises(ParameterError):
        fit_biexponential([0, 1, 2, 2, 3, 4, 5], np.ones(7))


def _split_curve(floor):
    return DeerCurve(TS_AXIS, [100.0, 150.0, 200.0, 250.0, 300.0], [1.0, 0.95, floor, floor + 0.03, 0.96],
                     [0.01] * 5, [50] * 5)


def test_split_compare_reports_density_drop():
    comparison = split_compare(_split_curve(0.87), _split_curve(0.92))
    assert comparison.second.sigma_hat < comparison.first.sigma_hat
    assert comparison.difference == pytest.approx(comparison.second.sigma_hat - comparison.first.sigma_hat)
    assert comparison.difference_sem > 0
    assert comparison.to_dict()["difference_per_nm2"] < 0


def test_split_compare_reports_density_increase():
    coefficient = analysis.eq1_coefficient(12.0, 900.0)
    comparison = split_compare(_split_curve(math.exp(-coefficient * 0.12)), _split_curve(math.exp(-coefficient * 0.19)))
    assert comparison.first.sigma_hat == pytest.approx(0.12)
    assert comparison.second.sigma_hat == pytest.approx(0.19)
    assert comparison.difference == pytest.approx(0.07)


def test_split_compare_identical_curves():
    comparison = split_compare(_split_curve(0.9), _split_curve(0.9))
    assert comparison.difference == 0.0
    assert comparison.difference_sem == pytest.approx(math.hypot(comparison.first.sigma_hat_sem,
                                                                 comparison.second.sigma_hat_sem))


def test_split_compare_requires_shared_grid():
    other = DeerCurve(TS_AXIS, [100.0, 150.0, 200.0, 250.0, 310.0], [1.0] * 5)
    with pytest.raises(AlignmentError):
        split_compare(_split_curve(0.9), other)
    with pytest.raises(AlignmentError):
        split_compare(_split_curve(0.9), DeerCurve(FREQUENCY_AXIS, [100.0, 150.0, 200.0, 250.0, 300.0], [1.0] * 5))


def test_pair_average_and_normalization():
    averaged = pair_average(_split_curve(0.9))
    assert averaged.x == pytest.approx([125.0, 225.0])
    assert averaged.mean == pytest.approx([0.975, 0.915])
    assert list(averaged.n) == [100, 100]
    normalized = normalize_to_first(averaged)
    assert normalized.mean[0] == 1.0


def test_curve_csv_round_trip(tmp_path):
    curve = _split_curve(0.9)
    path = tmp_path / "curve.csv"
    write_curve_csv(path, curve)
    assert path.read_text().splitlines()[0] == "sweep_value,signal_mean,signal_sem,n_realizations"
    loaded = read_curve_csv(path)
    assert loaded.points == curve.points


def test_read_curve_csv_rejects_wrong_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y\n1,2\n")
    with pytest.raises(ParameterError):
        read_curve_csv(path)


def test_read_xy_csv_skips_header(tmp_path):
    path = tmp_path / "line.csv"
    path.write_text("frequency,signal\n650,0.9\n652,0.7\n\n654,0.9\n")
    x, y = read_xy_csv(path)
    assert list(x) == [650.0, 652.0, 654.0]
    assert list(y) == [0.9, 0.7, 0.9]
    path.write_text("650,0.9\nabc,0.7\n")
    with pytest.raises(ParameterError):
        read_xy_csv(path)
