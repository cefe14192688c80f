import json
import logging
import os
import sys
from typing import Dict, List, Optional

from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from deersim.analysis import (FREQUENCY_AXIS, TS_AXIS, DeerCurve, estimate_density, extract_min,
                              fit_biexponential, fit_lorentzian, min_sem, read_curve_csv, read_xy_csv,
                              split_compare)
from deersim.config import DEBUG_ENV, Config, ExperimentConfig, load_config
from deersim.errors import ConfigValidationError, DeerSimError
from deersim.runner import EXIT_OK, EXIT_PARTIAL, EXIT_VALIDATION, compare_engines, realization_indices, run_experiment

EXIT_ERROR = 1
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = "deersim.log"

console = Console()

_handlers: List[logging.Handler] = []


def setup_logging(debug: bool = False, quiet: bool = False, log_dir: Optional[str] = None) -> None:
    """Attach a stream handler and, with a directory, a file handler to the root logger."""
    root = logging.getLogger()
    for handler in _handlers:
        root.removeHandler(handler)
        handler.close()
    _handlers.clear()

    stream = logging.StreamHandler()
    stream.setLevel(logging.ERROR if quiet else logging.DEBUG if debug else logging.WARNING)
    _handlers.append(stream)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, LOG_FILE))
        file_handler.setLevel(logging.DEBUG if debug else logging.INFO)
        _handlers.append(file_handler)
    formatter = logging.Formatter(LOG_FORMAT)
    for handler in _handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    root.setLevel(logging.DEBUG if debug else logging.INFO)


def _say(quiet: bool, message) -> None:
    if not quiet:
        console.print(message)


def _progress(quiet: bool) -> Progress:
    return Progress(TextColumn("[cyan]{task.description}"), BarColumn(), MofNCompleteColumn(),
                    TimeElapsedColumn(), console=console, transient=True, disable=quiet)


def _curve_table(curve: DeerCurve, title: str) -> Table:
    table = Table(title=title)
    table.add_column("Ts (ns)" if curve.axis_kind == TS_AXIS else "Frequency (MHz)", justify="right")
    table.add_column("Signal", justify="right")
    table.add_column("SEM", justify="right")
    table.add_column("n", justify="right")
    for x, mean, sem, n in curve.points:
        table.add_row(f"{x:g}", f"{mean:.4f}", f"{sem:.4f}", str(n))
    return table


def _write_json(out: Optional[str], name: str, data: Dict) -> Optional[str]:
    if not out:
        return None
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    return path


def _load(config: Config) -> ExperimentConfig:
    experiment = load_config(config.args.config).with_overrides(config.seed, config.out)
    setup_logging(config.debug, config.quiet, experiment.output.directory)
    return experiment


def handle_simulate(config: Config) -> int:
    experiment = _load(config)
    quiet = config.quiet
    total = len(realization_indices(experiment))
    with _progress(quiet) as progress:
        task = progress.add_task(f"{experiment.engine.name} engine", total=total)
        result = run_experiment(experiment, config.workers, lambda: progress.advance(task))
    _say(quiet, _curve_table(result.curve, f"DEER signal ({experiment.engine.name})"))
    _say(quiet, f"[green]Wrote[/green] {result.csv_path} and {result.manifest_path}")
    if result.failed_points:
        console.print(f"[yellow]Warning:[/yellow] {len(result.failed_points)} sweep point(s) failed: "
                      f"{result.failed_points}; see {result.manifest_path}")
    return result.exit_code


def handle_compare(config: Config) -> int:
    experiment = _load(config)
    engines = config.args.engines
    total = sum(len(realization_indices(experiment, engine)) for engine in engines)
    with _progress(config.quiet) as progress:
        task = progress.add_task("comparing " + ", ".join(engines), total=total)
        report = compare_engines(experiment, engines, config.workers, lambda: progress.advance(task))

    table = Table(title=f"Engines against {report.reference}")
    table.add_column("Engine")
    table.add_column("Max |difference|", justify="right")
    table.add_column("Max |z|", justify="right")
    table.add_column("Failed points", justify="right")
    for engine in engines[1:]:
        table.add_row(engine, f"{report.max_deviation[engine]:.3g}", f"{report.max_z[engine]:.3g}",
                      str(len(report.failed_points[engine])))
    _say(config.quiet, table)
    failed = any(report.failed_points.values())
    return EXIT_PARTIAL if failed else EXIT_OK


def handle_estimate_density(config: Config) -> int:
    args = config.args
    setup_logging(config.debug, config.quiet, config.out)
    if args.csv:
        curve = read_curve_csv(args.csv)
        min_signal, at = extract_min(curve, args.window)
        estimate = estimate_density(min_signal, args.depth_nm, args.tau_ns, min_sem(curve, args.window))
        logging.info(f"Smoothed minimum {min_signal:.4f} at Ts = {at:g} ns")
    else:
        estimate = estimate_density(args.min_signal, args.depth_nm, args.tau_ns)

    table = Table(title="Areal density")
    table.add_column("Quantity")
    table.add_column("Value", justify="right")
    table.add_row("min signal", f"{estimate.min_signal:.4f}")
    table.add_row("sigma (nm^-2)", f"{estimate.sigma_hat:.4f} +/- {estimate.sigma_hat_sem:.4f}")
    table.add_row("above dark-spin threshold", "yes" if estimate.above_dark_threshold else "no")
    table.add_row("status", estimate.status)
    _say(config.quiet, table)
    _write_json(config.out, "density.json", estimate.to_dict())
    return EXIT_OK


def _fit_table(title: str, fit) -> Table:
    table = Table(title=title)
    table.add_column("Parameter")
    table.add_column("Value", justify="right")
    table.add_column("Uncertainty", justify="right")
    for name, value, error in zip(fit.names, fit.values, fit.uncertainties):
        table.add_row(name, f"{value:.6g}", f"{error:.3g}")
    return table


def handle_fit_lorentzian(config: Config) -> int:
    setup_logging(config.debug, config.quiet, config.out)
    fit = fit_lorentzian(read_curve_csv(config.args.csv, FREQUENCY_AXIS))
    _say(config.quiet, _fit_table("Lorentzian fit", fit))
    if not fit.converged:
        console.print(f"[yellow]Warning:[/yellow] fit did not converge: {fit.message}")
    _write_json(config.out, "lorentzian.json", fit.to_dict())
    return EXIT_OK


def handle_fit_relax(config: Config) -> int:
    setup_logging(config.debug, config.quiet, config.out)
    times, values = read_xy_csv(config.args.csv)
    fit = fit_biexponential(times, values)
    _say(config.quiet, _fit_table("Bi-exponential fit", fit))
    if not fit.converged:
        console.print(f"[yellow]Warning:[/yellow] fit did not converge: {fit.message}")
    _write_json(config.out, "relaxation.json", fit.to_dict())
    return EXIT_OK


def handle_split_compare(config: Config) -> int:
    args = config.args
    setup_logging(config.debug, config.quiet, config.out)
    comparison = split_compare(read_curve_csv(args.csv_a), read_curve_csv(args.csv_b), args.depth_nm,
                               args.tau_ns, args.pair_average, args.normalize, args.window)
    table = Table(title="Split comparison")
    table.add_column("Period")
    table.add_column("sigma (nm^-2)", justify="right")
    table.add_column("SEM", justify="right")
    table.add_row("first", f"{comparison.first.sigma_hat:.4f}", f"{comparison.first.sigma_hat_sem:.4f}")
    table.add_row("second", f"{comparison.second.sigma_hat:.4f}", f"{comparison.second.sigma_hat_sem:.4f}")
    table.add_row("difference", f"{comparison.difference:.4f}", f"{comparison.difference_sem:.4f}")
    _say(config.quiet, table)
    _write_json(config.out, "split_compare.json", comparison.to_dict())
    return EXIT_OK


HANDLERS = {
    "simulate": handle_simulate,
    "compare": handle_compare,
    "estimate-density": handle_estimate_density,
    "fit-lorentzian": handle_fit_lorentzian,
    "fit-relax": handle_fit_relax,
    "split-compare": handle_split_compare,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Execute one command and return its exit code."""
    config = Config(argv)
    if config.debug:
        os.environ[DEBUG_ENV] = "1"
    try:
        return HANDLERS[config.command](config)
    except ConfigValidationError as e:
        console.print(f"[red]Invalid configuration[/red] ({len(e.violations)} problem(s)):")
        for violation in e.violations:
            console.print(f"  - {violation}")
        logging.error(str(e))
        return EXIT_VALIDATION
    except (DeerSimError, ValueError, OSError) as e:
        logging.error(f"{config.command} failed: {e}", exc_info=config.debug)
        console.print(f"[red]Error:[/red] {e}")
        return EXIT_ERROR
    except Exception as e:
        logging.error(f"Unhandled exception in {config.command}: {e}", exc_info=True)
        console.print(f"[red]Error:[/red] {e}")
        return EXIT_ERROR


def main(argv: Optional[List[str]] = None) -> None:
    """CLI entry point"""
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
