"""Reduction of DEER curves: density estimates, minima, line and relaxation fits."""
import csv
import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from deersim.analytic import eq1_coefficient
from deersim.errors import AlignmentError, DomainError, ParameterError

DARK_SPIN_THRESHOLD = 0.05  # nm^-2

TS_AXIS = "ts_ns"
FREQUENCY_AXIS = "frequency_mhz"
AXIS_KINDS = (TS_AXIS, FREQUENCY_AXIS)

CURVE_HEADER = ("sweep_value", "signal_mean", "signal_sem", "n_realizations")

# Smoothed values within this relative distance of the minimum count as ties.
TIE_TOLERANCE = 1e-12

# Sign changes inside +/- DEAD_BAND * range of the detrended curve are ignored.
DEAD_BAND = 0.1

MAX_FIT_EVALUATIONS = 200
FIT_XTOL = 1e-8


@dataclass(frozen=True, eq=False)
class DeerCurve:
    """Signal versus sweep value, x strictly increasing."""

    axis_kind: str
    x: np.ndarray
    mean: np.ndarray
    sem: np.ndarray = None
    n: np.ndarray = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        mean = np.asarray(self.mean, dtype=float)
        sem = np.zeros_like(mean) if self.sem is None else np.asarray(self.sem, dtype=float)
        n = np.ones(len(mean), dtype=int) if self.n is None else np.asarray(self.n, dtype=int)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sem", sem)
        object.__setattr__(self, "n", n)
        if self.axis_kind not in AXIS_KINDS:
            raise ParameterError(f"axis_kind must be one of {AXIS_KINDS}, got {self.axis_kind!r}")
        if not len(x) == len(mean) == len(sem) == len(n):
            raise ParameterError("Curve columns must have equal length")
        if np.any(np.diff(x) <= 0):
            raise ParameterError("Curve sweep values must be strictly increasing")
        if np.any(n < 1):
            raise ParameterError("Every curve point needs at least one realization")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def points(self) -> List[Tuple[float, float, float, int]]:
        return [(float(a), float(b), float(c), int(d)) for a, b, c, d in zip(self.x, self.mean, self.sem, self.n)]


@dataclass(frozen=True)
class DensityEstimate:
    sigma_hat: float
    min_signal: float
    mean_depth: float
    tau: float
    above_dark_threshold: bool
    status: str = "ok"
    sigma_hat_sem: float = 0.0

    def to_dict(self) -> Dict:
        return {
            "sigma_hat_per_nm2": self.sigma_hat,
            "sigma_hat_sem_per_nm2": self.sigma_hat_sem,
            "min_signal": self.min_signal,
            "mean_depth_nm": self.mean_depth,
            "tau_ns": self.tau,
            "above_dark_threshold": self.above_dark_threshold,
            "status": self.status,
        }


@dataclass(frozen=True)
class FitResult:
    """Named parameters with 1-sigma uncertainties and solver diagnostics."""

    model: str
    names: Tuple[str, ...]
    values: np.ndarray
    uncertainties: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int
    message: str = ""

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def uncertainty(self, name: str) -> float:
        return float(self.uncertainties[self.names.index(name)])

    def relative_uncertainty(self, name: str) -> float:
        value = self[name]
        if value == 0:
            return math.inf
        return self.uncertainty(name) / abs(value)

    def to_dict(self) -> Dict:
        return {
            "model": self.model,
            "parameters": {name: {"value": float(v), "uncertainty": float(u)}
                           for name, v, u in zip(self.names, self.values, self.uncertainties)},
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class SplitComparison:
    first: DensityEstimate
    second: DensityEstimate
    difference: float
    difference_sem: float

    def to_dict(self) -> Dict:
        return {"first": self.first.to_dict(), "second": self.second.to_dict(),
                "difference_per_nm2": self.difference, "difference_sem_per_nm2": self.difference_sem}


# -- density estimator -----------------------------------------------------------

def estimate_density(min_signal: float, mean_depth: float = 12.0, tau: float = 900.0,
                     min_signal_sem: float = 0.0) -> DensityEstimate:
    """Areal density from the minimum DEER signal over Ts.

    >>> estimate_density(1.0).sigma_hat
    0.0
    """
    if not min_signal > 0:
        raise DomainError(f"min_signal must be > 0 (log diverges), got {min_signal}")
    if not mean_depth > 0:
        raise DomainError(f"mean_depth must be > 0, got {mean_depth}")
    if not tau > 0:
        raise DomainError(f"tau must be > 0, got {tau}")
    status = "ok"
    if min_signal > 1:
        logging.warning(f"min_signal {min_signal} is above the baseline; clamping to 1 (noise floor)")
        min_signal, status = 1.0, "noise-floor"
    coefficient = eq1_coefficient(mean_depth, tau)
    sigma_hat = abs(math.log(min_signal)) / coefficient
    sigma_sem = min_signal_sem / (min_signal * coefficient)
    return DensityEstimate(sigma_hat, min_signal, mean_depth, tau,
                           sigma_hat > DARK_SPIN_THRESHOLD, status, sigma_sem)


def classify_densities(values: Sequence[float], threshold: float = DARK_SPIN_THRESHOLD) -> List[bool]:
    """True for each density above the dark-spin threshold."""
    return [float(v) > threshold for v in values]


def mean_ratio(numerator: Sequence[float], denominator: Sequence[float]) -> float:
    return float(np.mean(numerator) / np.mean(denominator))


# -- smoothing and minima --------------------------------------------------------

def _check_window(window: int, length: int) -> None:
    if window < 1 or window % 2 == 0 or window > length:
        raise ParameterError(f"window must be an odd integer in [1, {length}], got {window}")


def smooth(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Centered running mean; windows shrink symmetrically at the edges."""
    values = np.asarray(values, dtype=float)
    _check_window(window, len(values))
    half = window // 2
    smoothed = np.empty_like(values)
    for i in range(len(values)):
        reach = min(half, i, len(values) - 1 - i)
        smoothed[i] = values[i - reach:i + reach + 1].mean()
    return smoothed


def _argmin_first(values: np.ndarray) -> int:
    lowest = values.min()
    return int(np.argmax(values <= lowest + TIE_TOLERANCE * max(1.0, abs(lowest))))


def extract_min(curve: DeerCurve, window: int = 5) -> Tuple[float, float]:
    """Smoothed minimum and its sweep value; ties go to the smallest x."""
    smoothed = smooth(curve.mean, window)
    index = _argmin_first(smoothed)
    return float(smoothed[index]), float(curve.x[index])


def min_sem(curve: DeerCurve, window: int) -> float:
    smoothed = smooth(curve.mean, window)
    return float(curve.sem[_argmin_first(smoothed)])


# -- curve shape -----------------------------------------------------------------

def detrend(values: Sequence[float]) -> np.ndarray:
    """Subtract the straight line through the first and last points."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return values - values
    line = np.linspace(values[0], values[-1], len(values))
    return values - line


def count_sign_changes(values: Sequence[float], dead_band: float = DEAD_BAND) -> int:
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return 0
    band = dead_band * float(values.max() - values.min())
    signs = np.sign(values[np.abs(values) > band])
    return int(np.count_nonzero(signs[1:] != signs[:-1]))


def classify_curve_shape(values: Sequence[float], window: int = 5) -> str:
    """"oscillatory" (two or more sign changes after the minimum) or "overdamped"."""
    values = np.asarray(values, dtype=float)
    if len(values) < 3:
        return "overdamped"
    longest = len(values) if len(values) % 2 else len(values) - 1
    smoothed = smooth(values, min(window, longest))
    tail = smoothed[_argmin_first(smoothed):]
    if len(tail) < 3:
        return "overdamped"
    return "oscillatory" if count_sign_changes(detrend(tail)) >= 2 else "overdamped"


# -- least squares ---------------------------------------------------------------

def _solve(residual: Callable, jacobian: Callable, initial: np.ndarray) -> optimize.OptimizeResult:
    return optimize.least_squares(residual, initial, jac=jacobian, method="lm", xtol=FIT_XTOL,
                                  ftol=1e-12, gtol=1e-12, max_nfev=MAX_FIT_EVALUATIONS)


def _covariance(jac: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    dof = max(len(residuals) - jac.shape[1], 1)
    scale = float(residuals @ residuals) / dof
    return np.linalg.pinv(jac.T @ jac) * scale


def _report(model: str, solution: optimize.OptimizeResult) -> None:
    if not solution.success:
        logging.warning(f"{model} fit did not converge after {solution.nfev} evaluations: {solution.message}")


def lorentzian_model(x, center: float, fwhm: float, amplitude: float, baseline: float) -> np.ndarray:
    u = 2.0 * (np.asarray(x, dtype=float) - center) / fwhm
    return baseline - amplitude / (1.0 + u ** 2)


def lorentzian_jacobian(x, center: float, fwhm: float, amplitude: float, baseline: float) -> np.ndarray:
    """Columns: d/d center, fwhm, amplitude, baseline."""
    u = 2.0 * (np.asarray(x, dtype=float) - center) / fwhm
    shape = 1.0 / (1.0 + u ** 2)
    return np.column_stack([
        -amplitude * 4.0 * u * shape ** 2 / fwhm,
        -amplitude * 2.0 * u ** 2 * shape ** 2 / fwhm,
        -shape,
        np.ones_like(u),
    ])


LORENTZIAN_PARAMETERS = ("center", "fwhm", "amplitude", "baseline")


def lorentzian_initial_guess(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """center = argmin, baseline = median of the outer quartiles, fwhm = half the span."""
    quarter = max(1, len(x) // 4)
    baseline = float(np.median(np.concatenate([y[:quarter], y[-quarter:]])))
    index = int(np.argmin(y))
    return np.array([x[index], (x[-1] - x[0]) / 2.0, baseline - y[index], baseline])


def fit_lorentzian_xy(x: Sequence[float], y: Sequence[float]) -> FitResult:
    """Fit ``baseline - amplitude / (1 + (2 (x - center) / fwhm)^2)``; points may be in any order."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 5:
        raise ParameterError(f"Lorentzian fit needs at least 5 points, got {len(x)}")
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]

    solution = _solve(lambda p: lorentzian_model(x, *p) - y,
                      lambda p: lorentzian_jacobian(x, *p),
                      lorentzian_initial_guess(x, y))
    _report("Lorentzian", solution)
    values = solution.x.copy()
    values[1] = abs(values[1])
    covariance = _covariance(solution.jac, solution.fun)
    return FitResult("lorentzian", LORENTZIAN_PARAMETERS, values, np.sqrt(np.abs(np.diag(covariance))),
                     float(np.linalg.norm(solution.fun)), bool(solution.status > 0), int(solution.nfev),
                     solution.message)


def fit_lorentzian(curve: DeerCurve) -> FitResult:
    if curve.axis_kind != FREQUENCY_AXIS:
        raise ParameterError(f"Lorentzian fits need a {FREQUENCY_AXIS} curve, got {curve.axis_kind}")
    return fit_lorentzian_xy(curve.x, curve.mean)


BIEXPONENTIAL_PARAMETERS = ("a1", "t_a", "a2", "t_b", "offset")


def _unpack(p: np.ndarray) -> Tuple[float, float, float, float, float]:
    a1, log_ta, a2, log_gap, offset = p
    t_a = math.exp(log_ta)
    return a1, t_a, a2, t_a + math.exp(log_gap), offset


def biexponential_model(t, a1: float, t_a: float, a2: float, t_b: float, offset: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return a1 * np.exp(-t / t_a) + a2 * np.exp(-t / t_b) + offset


def biexponential_jacobian(t, p: np.ndarray) -> np.ndarray:
    """Jacobian in the internal parameters (a1, log t_a, a2, log(t_b - t_a), offset)."""
    t = np.asarray(t, dtype=float)
    a1, t_a, a2, t_b, _ = _unpack(p)
    fast = np.exp(-t / t_a)
    slow = np.exp(-t / t_b)
    d_tb = a2 * slow * t / t_b ** 2
    d_ta = a1 * fast * t / t_a ** 2 + d_tb
    return np.column_stack([fast, d_ta * t_a, slow, d_tb * (t_b - t_a), np.ones_like(t)])


def _public_gradient(p: np.ndarray) -> np.ndarray:
    _, t_a, _, t_b, _ = _unpack(p)
    gradient = np.eye(5)
    gradient[1, 1] = t_a
    gradient[3, 1] = t_a
    gradient[3, 3] = t_b - t_a
    return gradient


def _log_linear(t: np.ndarray, y: np.ndarray) -> Optional[Tuple[float, float]]:
    """(amplitude, time constant) from a line through log(y), or None."""
    keep = y > 0
    if np.count_nonzero(keep) < 2:
        return None
    slope, intercept = np.polyfit(t[keep], np.log(y[keep]), 1)
    if not slope < 0:
        return None
    return math.exp(intercept), -1.0 / slope


def biexponential_initial_guess(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Two-segment log-linear heuristic.

    The offset starts just below the smallest value; the slow component comes
    from a line through log(y - offset) over the later half, the fast one from
    the earliest third after removing the slow component.
    """
    span = float(y.max() - y.min()) or 1.0
    offset = float(y.min()) - 1e-3 * span
    late = slice(len(t) // 2, None)
    slow = _log_linear(t[late], y[late] - offset) or (span / 2.0, float(t[-1] - t[0]) / 2.0 or 1.0)
    a2, t_b = slow
    early = slice(0, max(3, len(t) // 3))
    remainder = y[early] - offset - a2 * np.exp(-t[early] / t_b)
    fast = _log_linear(t[early], remainder)
    if fast is None or not fast[1] < t_b:
        fast = (float(y[0] - offset - a2), t_b / 5.0)
    a1, t_a = fast
    return np.array([a1, math.log(t_a), a2, math.log(t_b - t_a), offset])


def fit_biexponential(times: Sequence[float], values: Sequence[float]) -> FitResult:
    """Fit ``a1 exp(-t/t_a) + a2 exp(-t/t_b) + offset`` with t_a <= t_b."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(t) < 7:
        raise ParameterError(f"Bi-exponential fit needs at least 7 points, got {len(t)}")
    if np.any(np.diff(t) <= 0):
        raise ParameterError("Relaxation times must be strictly increasing")

    solution = _solve(lambda p: biexponential_model(t, *_unpack(p)) - y,
                      lambda p: biexponential_jacobian(t, p),
                      biexponential_initial_guess(t, y))
    _report("Bi-exponential", solution)
    gradient = _public_gradient(solution.x)
    covariance = gradient @ _covariance(solution.jac, solution.fun) @ gradient.T
    return FitResult("biexponential", BIEXPONENTIAL_PARAMETERS, np.array(_unpack(solution.x)),
                     np.sqrt(np.abs(np.diag(covariance))), float(np.linalg.norm(solution.fun)),
                     bool(solution.status > 0), int(solution.nfev), solution.message)


# -- split comparison ------------------------------------------------------------

def pair_average(curve: DeerCurve) -> DeerCurve:
    """Average neighbouring pairs of points; a trailing odd point is dropped."""
    count = len(curve) // 2 * 2
    if count == 0:
        raise ParameterError("Pair averaging needs at least two points")
    x = curve.x[:count].reshape(-1, 2).mean(axis=1)
    mean = curve.mean[:count].reshape(-1, 2).mean(axis=1)
    sem = np.sqrt((curve.sem[:count].reshape(-1, 2) ** 2).sum(axis=1)) / 2.0
    n = curve.n[:count].reshape(-1, 2).sum(axis=1)
    return DeerCurve(curve.axis_kind, x, mean, sem, n)


def normalize_to_first(curve: DeerCurve) -> DeerCurve:
    first = curve.mean[0]
    if first == 0:
        raise ParameterError("Cannot normalize a curve whose first point is zero")
    return DeerCurve(curve.axis_kind, curve.x, curve.mean / first, curve.sem / abs(first), curve.n)


def split_compare(curve_a: DeerCurve, curve_b: DeerCurve, mean_depth: float = 12.0, tau: float = 900.0,
                  pair: bool = False, normalize: bool = False, window: int = 1) -> SplitComparison:
    """Densities of two acquisition periods and their difference (second minus first)."""
    if curve_a.axis_kind != curve_b.axis_kind:
        raise AlignmentError(f"Axis kinds differ: {curve_a.axis_kind} vs {curve_b.axis_kind}")
    if len(curve_a) != len(curve_b) or not np.allclose(curve_a.x, curve_b.x, rtol=0.0, atol=1e-9):
        raise AlignmentError("Curves do not share a sweep grid")
    curves = []
    for curve in (curve_a, curve_b):
        if pair:
            curve = pair_average(curve)
        if normalize:
            curve = normalize_to_first(curve)
        curves.append(curve)

    estimates = []
    for curve in curves:
        min_signal, _ = extract_min(curve, window)
        estimates.append(estimate_density(min_signal, mean_depth, tau, min_sem(curve, window)))
    first, second = estimates
    difference = second.sigma_hat - first.sigma_hat
    difference_sem = math.hypot(first.sigma_hat_sem, second.sigma_hat_sem)
    return SplitComparison(first, second, difference, difference_sem)


# -- CSV -------------------------------------------------------------------------

def format_curve_row(x: float, mean: float, sem: float, n: int) -> List[str]:
    return [format(float(x), ".17g"), format(float(mean), ".17g"), format(float(sem), ".17g"), str(int(n))]


def write_curve_csv(path, curve: DeerCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for point in curve.points:
            writer.writerow(format_curve_row(*point))


def read_curve_csv(path, axis_kind: str = TS_AXIS) -> DeerCurve:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    missing = [name for name in CURVE_HEADER if rows and name not in rows[0]]
    if not rows or missing:
        raise ParameterError(f"{path}: expected columns {', '.join(CURVE_HEADER)}")
    columns = {name: [row[name] for row in rows] for name in CURVE_HEADER}
    return DeerCurve(axis_kind, np.array(columns["sweep_value"], dtype=float),
                     np.array(columns["signal_mean"], dtype=float),
                     np.array(columns["signal_sem"], dtype=float),
                     np.array(columns["n_realizations"], dtype=int))


def read_xy_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    """First two numeric columns of a CSV file; a non-numeric first row is taken as header."""
    xs, ys = [], []
    with open(path, newline="", encoding="utf-8") as f:
        for i, row in enumerate(csv.reader(f)):
            if not row:
                continue
            try:
                x, y = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if i == 0:
                    continue
                raise ParameterError(f"{path}: row {i + 1} is not numeric: {row}")
            xs.append(x)
            ys.append(y)
    return np.array(xs), np.array(ys)
