"""Experiment configuration and command-line parsing."""
import argparse
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional

from packaging import version

from deersim import __version__
from deersim.bloch import BLOCH_MODES, RelaxationParams
from deersim.constants import MAGIC_ANGLE_DEG, larmor_frequency
from deersim.errors import ConfigValidationError
from deersim.geometry import NvSite, SamplingParams
from deersim.quantum_engine import DEFAULT_MAX_QUBITS, INTERACTIONS, InitialState
from deersim.sequence import FREQUENCY_SWEEP, SWEEP_KINDS, TS_SWEEP, DriveParams, check_fits, sweep_axis

SCHEMA_VERSION = "1.0"

ENGINES = ("quantum", "bloch", "analytic")
ANALYTIC_MODES = ("product", "poisson")
INITIAL_STATES = ("maximally_mixed", "thermal")

OUTPUT_DIR_ENV = "DEERSIM_OUTPUT_DIR"
DEBUG_ENV = "DEERSIM_DEBUG"
DEFAULT_OUTPUT_DIR = "runs"


@dataclass(frozen=True)
class PhysicsSection:
    field_gauss: float = 233.0
    depth_nm: float = 12.0
    axis_polar_deg: float = MAGIC_ANGLE_DEG
    axis_azimuth_deg: float = 0.0


@dataclass(frozen=True)
class TargetsSection:
    density_per_nm2: float = 0.1
    rmax_factor: float = 10.0
    min_separation_nm: float = 0.5
    detuning_fwhm_mhz: float = 20.0
    detuning_shape: str = "lorentzian"
    t1_us: Optional[float] = None
    t2_us: Optional[float] = None
    equilibrium_mz: float = 0.0
    max_targets: Optional[int] = 12
    interaction: str = "secular"


@dataclass(frozen=True)
class SequenceSection:
    tau_ns: float = 900.0
    sweep_kind: str = TS_SWEEP
    sweep_values: List[float] = field(default_factory=lambda: [float(v) for v in range(20, 441, 20)])
    rabi_mhz: float = 10.0
    drive_offset_ns: float = 0.0
    drive_duration_ns: float = 100.0
    frequency_offset_mhz: float = 0.0


@dataclass(frozen=True)
class EngineSection:
    name: str = "quantum"
    n_realizations: int = 16
    master_seed: int = 0
    analytic_mode: str = "product"
    bloch_mode: str = "cos"
    initial_state: str = "maximally_mixed"
    beta: float = 0.0
    max_qubits: int = DEFAULT_MAX_QUBITS
    save_raw: bool = False


@dataclass(frozen=True)
class OutputSection:
    directory: str = field(default_factory=lambda: os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))
    label: str = "run"


SECTIONS = {
    "physics": PhysicsSection,
    "targets": TargetsSection,
    "sequence": SequenceSection,
    "engine": EngineSection,
    "output": OutputSection,
}

# Keys that accept null.
NULLABLE = {"t1_us", "t2_us", "max_targets"}


def _check_type(section: str, key: str, value: Any, default: Any) -> Optional[str]:
    where = f"{section}.{key}"
    if value is None:
        return None if key in NULLABLE else f"{where} must not be null"
    if key == "sweep_values":
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            return f"{where} must be a list of numbers"
        return None
    if isinstance(default, bool):
        return None if isinstance(value, bool) else f"{where} must be true or false"
    if isinstance(default, int) or key == "max_targets":
        return None if isinstance(value, int) and not isinstance(value, bool) else f"{where} must be an integer"
    if isinstance(default, float) or key in NULLABLE:
        return None if _is_number(value) else f"{where} must be a number"
    if isinstance(default, str):
        return None if isinstance(value, str) else f"{where} must be a string"
    return None


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment configuration; every field carries its default."""

    physics: PhysicsSection = field(default_factory=PhysicsSection)
    targets: TargetsSection = field(default_factory=TargetsSection)
    sequence: SequenceSection = field(default_factory=SequenceSection)
    engine: EngineSection = field(default_factory=EngineSection)
    output: OutputSection = field(default_factory=OutputSection)
    schema_version: str = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """Build and validate; raises ConfigValidationError listing every problem."""
        problems = []
        if not isinstance(data, dict):
            raise ConfigValidationError(["configuration must be a JSON object"])
        schema = data.get("schema_version", SCHEMA_VERSION)
        problems.extend(_schema_problems(schema))

        sections = {}
        for key in data:
            if key != "schema_version" and key not in SECTIONS:
                problems.append(f"unknown section {key!r}")
        for name, section_cls in SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                problems.append(f"section {name!r} must be an object")
                raw = {}
            defaults = section_cls()
            known = {f.name for f in fields(section_cls)}
            values = {}
            for key, value in raw.items():
                if key not in known:
                    problems.append(f"unknown key {name}.{key}")
                    continue
                problem = _check_type(name, key, value, getattr(defaults, key))
                if problem:
                    problems.append(problem)
                    continue
                if key == "sweep_values":
                    value = [float(v) for v in value]
                elif isinstance(getattr(defaults, key), float) and value is not None:
                    value = float(value)
                values[key] = value
            sections[name] = replace(defaults, **values)

        if problems:
            raise ConfigValidationError(problems)
        config = cls(schema_version=str(schema), **sections)
        problems = config.validate()
        if problems:
            raise ConfigValidationError(problems)
        return config

    def validate(self) -> List[str]:
        """Every violated precondition, checked before any computation."""
        problems = []
        physics, targets, sequence, engine = self.physics, self.targets, self.sequence, self.engine
        if physics.field_gauss < 0:
            problems.append(f"physics.field_gauss must be >= 0, got {physics.field_gauss}")
        if not physics.depth_nm > 0:
            problems.append(f"physics.depth_nm must be > 0, got {physics.depth_nm}")
        if not 0.0 <= physics.axis_polar_deg <= 90.0:
            problems.append(f"physics.axis_polar_deg must lie in [0, 90], got {physics.axis_polar_deg}")

        problems.extend(f"targets.{p}" for p in self._sampling(clamped=True).violations())
        problems.extend(f"targets.{p}" for p in self.relaxation().violations())
        if targets.interaction not in INTERACTIONS:
            problems.append(f"targets.interaction must be one of {', '.join(INTERACTIONS)}")

        if engine.name not in ENGINES:
            problems.append(f"engine.name must be one of {', '.join(ENGINES)}, got {engine.name!r}")
        if engine.n_realizations < 1:
            problems.append(f"engine.n_realizations must be >= 1, got {engine.n_realizations}")
        if engine.analytic_mode not in ANALYTIC_MODES:
            problems.append(f"engine.analytic_mode must be one of {', '.join(ANALYTIC_MODES)}")
        if engine.bloch_mode not in BLOCH_MODES:
            problems.append(f"engine.bloch_mode must be one of {', '.join(BLOCH_MODES)}")
        if engine.initial_state not in INITIAL_STATES:
            problems.append(f"engine.initial_state must be one of {', '.join(INITIAL_STATES)}")
        elif engine.initial_state == "thermal" and engine.name == "analytic":
            problems.append("engine.initial_state 'thermal' is not supported by the analytic engine")
        if engine.max_qubits < 1:
            problems.append(f"engine.max_qubits must be >= 1, got {engine.max_qubits}")
        if engine.name == "quantum" and targets.max_targets is None:
            problems.append("targets.max_targets must be set for the quantum engine")

        if not sequence.tau_ns > 0:
            problems.append(f"sequence.tau_ns must be > 0, got {sequence.tau_ns}")
        elif sequence.sweep_kind not in SWEEP_KINDS:
            problems.append(f"sequence.sweep_kind must be one of {', '.join(SWEEP_KINDS)}")
        elif not sequence.sweep_values:
            problems.append("sequence.sweep_values must not be empty")
        elif physics.field_gauss >= 0:
            if any(b <= a for a, b in zip(sequence.sweep_values, sequence.sweep_values[1:])):
                problems.append("sequence.sweep_values must be strictly increasing")
            problems.extend(f"sequence.{p}" for p in self.base_drive().violations())
            for value, drive in zip(sequence.sweep_values, self._drives_unchecked()):
                problem = drive.violations() or check_fits(sequence.tau_ns, drive)
                if problem:
                    detail = problem if isinstance(problem, str) else "; ".join(problem)
                    problems.append(f"sequence.sweep_values: {value} rejected ({detail})")
        if not self.output.label:
            problems.append("output.label must not be empty")
        return problems

    def to_dict(self) -> Dict[str, Any]:
        data = {"schema_version": self.schema_version}
        for name in SECTIONS:
            data[name] = asdict(getattr(self, name))
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None) -> "ExperimentConfig":
        config = self
        if seed is not None:
            config = replace(config, engine=replace(config.engine, master_seed=int(seed)))
        if out is not None:
            config = replace(config, output=replace(config.output, directory=out))
        return config

    # -- derived parameter objects --

    def nv_site(self) -> NvSite:
        return NvSite(self.physics.depth_nm, self.physics.axis_polar_deg, self.physics.axis_azimuth_deg)

    def _sampling(self, clamped: bool) -> SamplingParams:
        t = self.targets
        return SamplingParams(t.density_per_nm2, t.rmax_factor, t.min_separation_nm, t.detuning_fwhm_mhz,
                              t.max_targets if clamped else None, t.detuning_shape)

    def sampling_params(self, clamp: Optional[bool] = None) -> SamplingParams:
        """Sampling parameters; clamping to max_targets applies to the quantum engine by default."""
        if clamp is None:
            clamp = self.engine.name == "quantum"
        return self._sampling(clamp)

    def relaxation(self) -> RelaxationParams:
        t = self.targets
        return RelaxationParams(math.inf if t.t1_us is None else t.t1_us,
                                math.inf if t.t2_us is None else t.t2_us,
                                t.equilibrium_mz)

    def initial_state(self) -> InitialState:
        return InitialState(self.engine.initial_state, self.engine.beta)

    def center_frequency(self) -> float:
        return larmor_frequency(self.physics.field_gauss)

    def base_drive(self) -> DriveParams:
        s = self.sequence
        if s.sweep_kind == FREQUENCY_SWEEP:
            return DriveParams(s.rabi_mhz, 0.0, s.drive_duration_ns, s.drive_offset_ns)
        return DriveParams(s.rabi_mhz, s.frequency_offset_mhz, 0.0, s.drive_offset_ns)

    def _drives_unchecked(self) -> List[DriveParams]:
        base = self.base_drive()
        if self.sequence.sweep_kind == TS_SWEEP:
            return [replace(base, duration=v) for v in self.sequence.sweep_values]
        center = self.center_frequency()
        return [replace(base, frequency_offset=v - center) for v in self.sequence.sweep_values]

    def drives(self) -> List[DriveParams]:
        center = self.center_frequency() if self.sequence.sweep_kind == FREQUENCY_SWEEP else None
        return sweep_axis(self.sequence.sweep_kind, self.sequence.sweep_values, self.base_drive(),
                          self.sequence.tau_ns, center)


def _schema_problems(schema: Any) -> List[str]:
    try:
        found = version.parse(str(schema))
    except version.InvalidVersion:
        return [f"schema_version {schema!r} is not a version string"]
    expected = version.parse(SCHEMA_VERSION)
    if found.major != expected.major:
        return [f"schema_version {schema} is incompatible with {SCHEMA_VERSION}"]
    return []


def load_config(path: str) -> ExperimentConfig:
    """Read an experiment configuration file (JSON)."""
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigValidationError([f"configuration file not found: {path}"])
    except json.JSONDecodeError as e:
        raise ConfigValidationError([f"{path} is not valid JSON: {e}"])
    return ExperimentConfig.from_dict(data)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, help="Master seed (overrides the configuration)")
    parser.add_argument("--out", help="Output directory (overrides the configuration)")
    parser.add_argument("--quiet", "-q", action="store_true", help="Only print errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deersim",
                                     description="Simulate and analyse NV-detected DEER on surface spins")
    parser.add_argument("--version", "-v", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--debug", "-d", action="store_true", help="Enable debug output")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    simulate = sub.add_parser("simulate", help="Run an experiment configuration")
    simulate.add_argument("config", help="Path to the JSON experiment configuration")
    simulate.add_argument("--workers", "-w", type=int, default=os.cpu_count() or 1,
                          help="Worker processes for realizations (default: logical cores)")
    _common(simulate)

    compare = sub.add_parser("compare", help="Cross-check engines on identical seeds")
    compare.add_argument("config", help="Path to the JSON experiment configuration")
    compare.add_argument("--engines", nargs="+", default=["quantum", "analytic"], choices=ENGINES,
                         help="Engines to compare; the first is the reference")
    compare.add_argument("--workers", "-w", type=int, default=os.cpu_count() or 1,
                         help="Worker processes for realizations (default: logical cores)")
    _common(compare)

    density = sub.add_parser("estimate-density", help="Areal density from a minimum DEER signal")
    source = density.add_mutually_exclusive_group(required=True)
    source.add_argument("--min-signal", type=float, help="Minimum signal over Ts")
    source.add_argument("--csv", help="Curve CSV to take the smoothed minimum from")
    density.add_argument("--depth-nm", type=float, default=12.0, help="Mean NV depth (default: 12)")
    density.add_argument("--tau-ns", type=float, default=900.0, help="Total free evolution (default: 900)")
    density.add_argument("--window", type=int, default=5, help="Running-mean window for --csv (default: 5)")
    _common(density)

    lorentz = sub.add_parser("fit-lorentzian", help="Fit a Lorentzian dip to a frequency sweep CSV")
    lorentz.add_argument("csv", help="Curve CSV (sweep_value in MHz)")
    _common(lorentz)

    relax = sub.add_parser("fit-relax", help="Bi-exponential fit of relaxometry data")
    relax.add_argument("csv", help="Two-column CSV: time, value")
    _common(relax)

    split = sub.add_parser("split-compare", help="Compare densities from two acquisition periods")
    split.add_argument("csv_a", help="Curve CSV of the first period")
    split.add_argument("csv_b", help="Curve CSV of the second period")
    split.add_argument("--depth-nm", type=float, default=12.0, help="Mean NV depth (default: 12)")
    split.add_argument("--tau-ns", type=float, default=900.0, help="Total free evolution (default: 900)")
    split.add_argument("--pair-average", action="store_true", help="Average neighbouring Ts points")
    split.add_argument("--normalize", action="store_true", help="Normalize each curve to its first point")
    split.add_argument("--window", type=int, default=1, help="Running-mean window (default: 1)")
    _common(split)
    return parser


class Config:
    """Parsed command line."""

    def __init__(self, argv: Optional[List[str]] = None):
        self.args = build_parser().parse_args(argv)

    @property
    def command(self) -> str:
        return self.args.command

    @property
    def debug(self) -> bool:
        return self.args.debug or bool(os.environ.get(DEBUG_ENV))

    @property
    def quiet(self) -> bool:
        return self.args.quiet

    @property
    def seed(self) -> Optional[int]:
        return self.args.seed

    @property
    def out(self) -> Optional[str]:
        return self.args.out

    @property
    def workers(self) -> int:
        workers = getattr(self.args, "workers", 1)
        if workers < 1:
            raise ValueError(f"--workers must be >= 1, got {workers}")
        return workers
