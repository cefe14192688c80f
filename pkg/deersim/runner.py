"""Monte Carlo orchestration across engines and sweep points.

Each realization is one task covering every sweep point, so all points of a
curve share the same configurations (common random numbers). Workers get
immutable tasks and return plain results; the orchestrator reduces them in
realization order and does all the writing.
"""
import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from deersim.analysis import CURVE_HEADER, FREQUENCY_AXIS, TS_AXIS, DeerCurve, format_curve_row
from deersim.analytic import FloorParams, QuadratureSpec, ensemble_signal, poisson_average_signal
from deersim.bloch import CONFIGURATION_STREAM, SIGN_STREAM, initial_signs, nv_phase, reduce_phases
from deersim.config import ExperimentConfig
from deersim.errors import ConfigValidationError, DeerSimError
from deersim.geometry import child_seed, sample_configuration
from deersim.manifest import RunManifest
from deersim.quantum_engine import QuantumDeerEngine
from deersim.sequence import TS_SWEEP, build_deer_timeline

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PARTIAL = 3

ProgressCallback = Optional[Callable[[], None]]


@dataclass
class RealizationResult:
    """Per-point values of one realization: signals, or NV phases for the Bloch engine."""

    index: int
    points: List[int]
    values: np.ndarray
    errors: Dict[int, str] = field(default_factory=dict)
    n_targets: int = 0
    n_sampled: int = 0


@dataclass
class RunResult:
    curve: DeerCurve
    manifest: RunManifest
    csv_path: str
    manifest_path: str
    raw_path: Optional[str] = None

    @property
    def failed_points(self) -> List[int]:
        return self.manifest.failed_points

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failed_points else EXIT_OK


@dataclass
class ComparisonReport:
    engines: List[str]
    sweep_values: List[float]
    signals: Dict[str, List[float]]
    sems: Dict[str, List[float]]
    differences: Dict[str, List[float]]
    max_deviation: Dict[str, float]
    max_z: Dict[str, float]
    failed_points: Dict[str, List[int]]

    @property
    def reference(self) -> str:
        return self.engines[0]

    def to_dict(self) -> Dict:
        return {
            "reference": self.reference,
            "engines": self.engines,
            "sweep_values": self.sweep_values,
            "signals": self.signals,
            "sems": self.sems,
            "differences": self.differences,
            "max_deviation": self.max_deviation,
            "max_z": self.max_z,
            "failed_points": self.failed_points,
        }


def _is_poisson(config: ExperimentConfig, engine: str) -> bool:
    return engine == "analytic" and config.engine.analytic_mode == "poisson"


def realization_indices(config: ExperimentConfig, engine: Optional[str] = None) -> List[int]:
    """The Poisson average is deterministic, so it needs a single realization."""
    engine = engine or config.engine.name
    return [0] if _is_poisson(config, engine) else list(range(config.engine.n_realizations))


def _poisson_values(config: ExperimentConfig, points: Sequence[int]) -> RealizationResult:
    drives = config.drives()
    targets = config.targets
    floor = FloorParams(targets.density_per_nm2, config.physics.depth_nm, config.sequence.tau_ns)
    quadrature = QuadratureSpec(rmax_factor=targets.rmax_factor, detuning_fwhm=targets.detuning_fwhm_mhz,
                                detuning_shape=targets.detuning_shape)
    axis = (config.physics.axis_polar_deg, config.physics.axis_azimuth_deg)
    result = RealizationResult(0, list(points), np.full(len(points), np.nan))
    for j, p in enumerate(points):
        try:
            result.values[j] = poisson_average_signal(floor, drives[p], axis, quadrature)
        except DeerSimError as e:
            result.errors[p] = str(e)
    return result


def evaluate_realization(config: ExperimentConfig, index: int, points: Optional[Sequence[int]] = None,
                         engine: Optional[str] = None, clamp: Optional[bool] = None) -> RealizationResult:
    """Values of one realization at the requested sweep points (all by default)."""
    engine = engine or config.engine.name
    drives = config.drives()
    points = list(range(len(drives))) if points is None else list(points)
    if _is_poisson(config, engine):
        return _poisson_values(config, points)

    result = RealizationResult(index, points, np.full(len(points), np.nan))
    master = config.engine.master_seed
    clamp = engine == "quantum" if clamp is None else clamp
    tau = config.sequence.tau_ns
    try:
        configuration = sample_configuration(config.sampling_params(clamp), config.nv_site(),
                                             child_seed(master, index, CONFIGURATION_STREAM))
        result.n_targets, result.n_sampled = len(configuration), configuration.n_sampled
        if engine == "quantum":
            evaluator = QuantumDeerEngine(configuration, config.targets.interaction, config.engine.max_qubits)
            state = config.initial_state()

            def evaluate(drive, timeline):
                return evaluator.evaluate(timeline, drive, state).signal
        elif engine == "bloch":
            rng = np.random.default_rng(child_seed(master, index, SIGN_STREAM))
            signs = initial_signs(rng, len(configuration), config.initial_state().polarization)
            relax = config.relaxation()

            def evaluate(drive, timeline):
                return nv_phase(configuration, timeline, relax, drive, initial_mz=signs)
        else:
            def evaluate(drive, timeline):
                return ensemble_signal(configuration, drive, tau)
    except DeerSimError as e:
        logging.warning(f"Realization {index} failed: {e}")
        result.errors.update({p: str(e) for p in points})
        return result

    for j, p in enumerate(points):
        try:
            result.values[j] = evaluate(drives[p], build_deer_timeline(tau, drives[p]))
        except DeerSimError as e:
            logging.warning(f"Realization {index}, point {p} failed: {e}")
            result.errors[p] = str(e)
    return result


def _run_task(task: Tuple[ExperimentConfig, int, Optional[List[int]], str, bool]) -> RealizationResult:
    config, index, points, engine, clamp = task
    return evaluate_realization(config, index, points, engine, clamp)


def _map_realizations(config: ExperimentConfig, engine: str, clamp: bool, points: Optional[List[int]],
                      workers: int, progress: ProgressCallback) -> List[RealizationResult]:
    tasks = [(config, i, points, engine, clamp) for i in realization_indices(config, engine)]
    results = []
    if workers <= 1 or len(tasks) <= 1:
        for task in tasks:
            results.append(_run_task(task))
            if progress:
                progress()
        return results
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        # map yields in submission order, so reduction order is the realization index
        for result in pool.map(_run_task, tasks):
            results.append(result)
            if progress:
                progress()
    return results


def _reduce(config: ExperimentConfig, engine: str, results: List[RealizationResult],
            points: List[int]) -> Tuple[Dict[int, Tuple[float, float, int]], Dict[int, List[Tuple[int, str]]]]:
    """Per-point (mean, sem, n) for points where every realization succeeded, plus failures."""
    reduced, failures = {}, {}
    for j, p in enumerate(points):
        failed = [(r.index, r.errors[p]) for r in results if p in r.errors]
        if failed:
            failures[p] = failed
            continue
        column = np.array([r.values[j] for r in results])
        if engine == "bloch":
            signal = reduce_phases(column, config.engine.bloch_mode)
            reduced[p] = (signal.mean, signal.sem, signal.n)
        else:
            n = len(column)
            sem = float(np.std(column, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            reduced[p] = (float(np.mean(column)), sem, n)
    return reduced, failures


def _axis_kind(config: ExperimentConfig) -> str:
    return TS_AXIS if config.sequence.sweep_kind == TS_SWEEP else FREQUENCY_AXIS


def _curve(config: ExperimentConfig, reduced: Dict[int, Tuple[float, float, int]]) -> DeerCurve:
    keys = sorted(reduced)
    values = config.sequence.sweep_values
    return DeerCurve(_axis_kind(config), [values[p] for p in keys], [reduced[p][0] for p in keys],
                     [reduced[p][1] for p in keys], [reduced[p][2] for p in keys])


def _write_rows(path: str, rows: List[List[str]], header: Sequence[str]) -> None:
    """Append rows to ``path.part`` one by one, then rename into place."""
    partial = path + ".part"
    with open(partial, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        f.flush()
        for row in rows:
            writer.writerow(row)
            f.flush()
    os.replace(partial, path)


def _check_runnable(config: ExperimentConfig) -> None:
    problems = config.validate()
    if problems:
        raise ConfigValidationError(problems)


def run_experiment(config: ExperimentConfig, workers: int = 1, progress: ProgressCallback = None) -> RunResult:
    """Evaluate the configured engine over all sweep points and persist curve and manifest."""
    _check_runnable(config)
    start = time.perf_counter()
    engine = config.engine.name
    out_dir = config.output.directory
    os.makedirs(out_dir, exist_ok=True)
    label = config.output.label
    csv_path = os.path.join(out_dir, f"{label}.csv")
    manifest_path = os.path.join(out_dir, f"{label}.manifest.json")

    manifest = RunManifest(config.to_dict(), engine)
    master = config.engine.master_seed
    for i in realization_indices(config):
        manifest.add_seeds(i, child_seed(master, i, CONFIGURATION_STREAM), child_seed(master, i, SIGN_STREAM))
    logging.info(f"Running {engine} engine: {len(config.sequence.sweep_values)} points, "
                 f"{len(manifest.child_seeds)} realizations, {workers} worker(s)")

    results = _map_realizations(config, engine, engine == "quantum", None, workers, progress)
    points = list(range(len(config.sequence.sweep_values)))
    reduced, failures = _reduce(config, engine, results, points)
    values = config.sequence.sweep_values
    for p, failed in sorted(failures.items()):
        for realization, message in failed:
            manifest.add_failure(p, values[p], realization, message)

    curve = _curve(config, reduced)
    _write_rows(csv_path, [format_curve_row(*point) for point in curve.points], CURVE_HEADER)
    manifest.add_output("curve", csv_path)

    raw_path = None
    if config.engine.save_raw:
        raw_path = os.path.join(out_dir, f"{label}.raw.csv")
        rows = [[str(r.index), format(values[p], ".17g"), format(float(r.values[j]), ".17g")]
                for r in results for j, p in enumerate(r.points)]
        _write_rows(raw_path, rows, ("realization", "sweep_value", "phase" if engine == "bloch" else "signal"))
        manifest.add_output("raw", raw_path)

    counts = [r.n_targets for r in results]
    manifest.add_stat("n_points", len(points))
    manifest.add_stat("n_failed_points", len(failures))
    manifest.add_stat("mean_targets", float(np.mean(counts)) if counts else 0.0)
    manifest.add_stat("max_targets_seen", int(max(counts)) if counts else 0)
    manifest.add_stat("mean_sampled", float(np.mean([r.n_sampled for r in results])) if results else 0.0)
    manifest.add_output("manifest", manifest_path)
    manifest.wall_clock_s = time.perf_counter() - start
    manifest.write(manifest_path)
    if failures:
        logging.warning(f"{len(failures)} of {len(points)} sweep points failed; see {manifest_path}")
    return RunResult(curve, manifest, csv_path, manifest_path, raw_path)


def evaluate_points(config: ExperimentConfig, indices: Sequence[int], workers: int = 1) -> DeerCurve:
    """Recompute selected sweep points in isolation; rows match a full run exactly."""
    _check_runnable(config)
    engine = config.engine.name
    points = sorted(set(int(i) for i in indices))
    if any(p < 0 or p >= len(config.sequence.sweep_values) for p in points):
        raise IndexError(f"Sweep point indices out of range: {list(indices)}")
    results = _map_realizations(config, engine, engine == "quantum", points, workers, None)
    reduced, failures = _reduce(config, engine, results, points)
    if failures:
        raise DeerSimError(f"Replay failed at points {sorted(failures)}: {failures[min(failures)][0][1]}")
    return _curve(config, reduced)


def compare_engines(config: ExperimentConfig, engines: Sequence[str], workers: int = 1,
                    progress: ProgressCallback = None, write: bool = True) -> ComparisonReport:
    """Run each engine on the same clamped configurations and sweep; the first engine is the reference."""
    problems = config.validate()
    if config.targets.max_targets is None:
        problems.append("targets.max_targets must be set to compare engines")
    unknown = [e for e in engines if e not in ("quantum", "bloch", "analytic")]
    if unknown:
        problems.append(f"unknown engines: {', '.join(unknown)}")
    if len(engines) < 2:
        problems.append("compare needs at least two engines")
    if problems:
        raise ConfigValidationError(problems)

    points = list(range(len(config.sequence.sweep_values)))
    signals, sems, failed = {}, {}, {}
    for engine in engines:
        results = _map_realizations(config, engine, True, None, workers, progress)
        reduced, failures = _reduce(config, engine, results, points)
        signals[engine] = [reduced[p][0] if p in reduced else math.nan for p in points]
        sems[engine] = [reduced[p][1] if p in reduced else math.nan for p in points]
        failed[engine] = sorted(failures)

    reference = engines[0]
    differences, max_deviation, max_z = {}, {}, {}
    for engine in engines[1:]:
        diff = np.array(signals[engine]) - np.array(signals[reference])
        combined = np.hypot(np.array(sems[engine]), np.array(sems[reference]))
        differences[engine] = [float(d) for d in diff]
        valid = ~np.isnan(diff)
        max_deviation[engine] = float(np.max(np.abs(diff[valid]))) if valid.any() else math.nan
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(combined[valid] > 0, np.abs(diff[valid]) / combined[valid],
                         np.where(diff[valid] == 0, 0.0, math.inf))
        max_z[engine] = float(np.max(z)) if valid.any() else math.nan
        logging.info(f"{engine} vs {reference}: max deviation {max_deviation[engine]:.3g}, "
                     f"max |z| {max_z[engine]:.3g}")

    report = ComparisonReport(list(engines), list(config.sequence.sweep_values), signals, sems,
                              differences, max_deviation, max_z, failed)
    if write:
        os.makedirs(config.output.directory, exist_ok=True)
        path = os.path.join(config.output.directory, f"{config.output.label}.comparison.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2)
            f.write("\n")
    return report
