"""Surface spin configurations and secular dipolar couplings.

The NV sits at (0, 0, -depth); reporter spins lie on the z = 0 surface plane.
Couplings are linear frequencies in MHz:

    a = D (1 - 3 cos^2 theta) / r^3,   D = (mu0/4pi) gamma^2 hbar / 2pi

with theta measured from the field direction, taken along the NV axis.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import special

from deersim.constants import CONST, MAGIC_ANGLE_DEG
from deersim.errors import CouplingError, DomainError, SamplingError

CONFIGURATION_SCHEMA = "deersim.configuration/1"

# Detuning distributions are truncated at this many FWHM on either side.
DETUNING_TRUNCATION = 5.0

MAX_PLACEMENT_ATTEMPTS = 1000

_COINCIDENCE_NM = 1e-12


@dataclass(frozen=True)
class NvSite:
    """Shallow NV centre below the surface plane."""

    depth: float = 12.0
    axis_polar: float = MAGIC_ANGLE_DEG
    axis_azimuth: float = 0.0

    def __post_init__(self):
        if not self.depth > 0:
            raise DomainError(f"NV depth must be positive, got {self.depth} nm")
        if not 0.0 <= self.axis_polar <= 90.0:
            raise DomainError(f"NV axis polar angle must lie in [0, 90] deg, got {self.axis_polar}")

    @property
    def position(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.depth])

    @property
    def axis(self) -> np.ndarray:
        return field_axis(self.axis_polar, self.axis_azimuth)


@dataclass(frozen=True)
class TargetSpin:
    position: tuple
    detuning: float = 0.0


@dataclass(frozen=True)
class SamplingParams:
    """Parameters of the surface point process."""

    density: float = 0.1
    rmax_factor: float = 10.0
    min_separation: float = 0.5
    detuning_fwhm: float = 20.0
    max_targets: Optional[int] = 12
    detuning_shape: str = "lorentzian"

    def violations(self) -> List[str]:
        problems = []
        if not self.density >= 0:
            problems.append(f"density must be >= 0, got {self.density}")
        if not self.rmax_factor > 0:
            problems.append(f"rmax_factor must be > 0, got {self.rmax_factor}")
        if not self.min_separation >= 0:
            problems.append(f"min_separation must be >= 0, got {self.min_separation}")
        if not self.detuning_fwhm >= 0:
            problems.append(f"detuning_fwhm must be >= 0, got {self.detuning_fwhm}")
        if self.max_targets is not None and self.max_targets < 0:
            problems.append(f"max_targets must be >= 0, got {self.max_targets}")
        if self.detuning_shape not in ("lorentzian", "gaussian"):
            problems.append(f"detuning_shape must be 'lorentzian' or 'gaussian', got {self.detuning_shape!r}")
        return problems

    def unclamped(self) -> "SamplingParams":
        return SamplingParams(self.density, self.rmax_factor, self.min_separation,
                              self.detuning_fwhm, None, self.detuning_shape)


@dataclass(frozen=True, eq=False)
class SpinConfiguration:
    """One sampled realization of the reporter layer."""

    nv: NvSite
    positions: np.ndarray = field(repr=False)
    detunings: np.ndarray = field(repr=False)
    nv_couplings: np.ndarray = field(repr=False)
    seed: int = 0
    n_sampled: int = 0
    clamped: bool = False

    def __len__(self) -> int:
        return len(self.nv_couplings)

    @property
    def targets(self) -> List[TargetSpin]:
        return [TargetSpin(tuple(float(c) for c in p), float(d))
                for p, d in zip(self.positions, self.detunings)]

    @cached_property
    def pair_couplings(self) -> np.ndarray:
        """Symmetric target-target coupling matrix (MHz), zero diagonal."""
        return pair_coupling_matrix(self.positions, self.nv.axis)

    def without_pair_couplings(self) -> "SpinConfiguration":
        """Copy whose pair couplings are forced to zero."""
        clone = SpinConfiguration(self.nv, self.positions, self.detunings, self.nv_couplings,
                                  self.seed, self.n_sampled, self.clamped)
        clone.__dict__["pair_couplings"] = np.zeros((len(self), len(self)))
        return clone

    def to_dict(self, include_pairs: bool = True) -> Dict[str, Any]:
        data = {
            "schema": CONFIGURATION_SCHEMA,
            "seed": int(self.seed),
            "n_sampled": int(self.n_sampled),
            "clamped": bool(self.clamped),
            "nv": {
                "depth_nm": self.nv.depth,
                "axis_polar_deg": self.nv.axis_polar,
                "axis_azimuth_deg": self.nv.axis_azimuth,
            },
            "targets": [{"position_nm": [float(c) for c in p], "detuning_mhz": float(d)}
                        for p, d in zip(self.positions, self.detunings)],
            "nv_couplings_mhz": [float(a) for a in self.nv_couplings],
        }
        if include_pairs:
            data["pair_couplings_mhz"] = self.pair_couplings.tolist()
        return data

    def to_json(self, include_pairs: bool = True) -> str:
        return json.dumps(self.to_dict(include_pairs), indent=2)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SpinConfiguration":
        if data.get("schema") != CONFIGURATION_SCHEMA:
            raise ValueError(f"Unsupported configuration schema: {data.get('schema')!r}")
        nv_data = data["nv"]
        nv = NvSite(nv_data["depth_nm"], nv_data["axis_polar_deg"], nv_data["axis_azimuth_deg"])
        positions = np.array([t["position_nm"] for t in data["targets"]], dtype=float).reshape(-1, 3)
        detunings = np.array([t["detuning_mhz"] for t in data["targets"]], dtype=float)
        config = cls(nv, positions, detunings, np.array(data["nv_couplings_mhz"], dtype=float),
                     data["seed"], data.get("n_sampled", len(detunings)), data.get("clamped", False))
        if "pair_couplings_mhz" in data:
            config.__dict__["pair_couplings"] = np.array(data["pair_couplings_mhz"], dtype=float).reshape(
                len(detunings), len(detunings))
        return config


def field_axis(polar_deg: float, azimuth_deg: float = 0.0) -> np.ndarray:
    """Unit vector of the field / NV axis."""
    polar = math.radians(polar_deg)
    azimuth = math.radians(azimuth_deg)
    return np.array([math.sin(polar) * math.cos(azimuth),
                     math.sin(polar) * math.sin(azimuth),
                     math.cos(polar)])


def secular_coupling(separation: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """D (1 - 3cos^2 theta) / r^3 in MHz for separation vectors (..., 3) in nm.

    ``axis`` may have any nonzero length; only its direction is used.
    """
    separation = np.asarray(separation, dtype=float)
    axis = np.asarray(axis, dtype=float)
    length = np.linalg.norm(axis)
    if not length > 0:
        raise DomainError("Field axis must be a nonzero vector")
    r = np.linalg.norm(separation, axis=-1)
    if np.any(r < _COINCIDENCE_NM):
        raise CouplingError("Dipolar coupling is singular for coincident positions")
    cos_theta = separation @ (axis / length) / r
    return CONST.dipolar_prefactor_mhz * (1.0 - 3.0 * cos_theta ** 2) / r ** 3


def nv_target_coupling(target_position: Sequence[float], nv: NvSite) -> float:
    """Secular NV-target coupling a_k (MHz, signed)."""
    separation = np.asarray(target_position, dtype=float) - nv.position
    return float(secular_coupling(separation, nv.axis))


def target_target_coupling(pos_j: Sequence[float], pos_k: Sequence[float],
                           axis: Sequence[float]) -> float:
    """Secular coupling b_jk (MHz, signed) between two reporter spins."""
    separation = np.asarray(pos_j, dtype=float) - np.asarray(pos_k, dtype=float)
    return float(secular_coupling(separation, axis))


def pair_coupling_matrix(positions: np.ndarray, axis: np.ndarray) -> np.ndarray:
    n = len(positions)
    couplings = np.zeros((n, n))
    if n < 2:
        return couplings
    rows, cols = np.triu_indices(n, k=1)
    values = secular_coupling(positions[rows] - positions[cols], axis)
    couplings[rows, cols] = values
    couplings[cols, rows] = values
    return couplings


def child_seed(master_seed: int, index: int, stream: int = 0) -> int:
    """Seed for realization ``index`` derived from the master seed."""
    sequence = np.random.SeedSequence(int(master_seed), spawn_key=(int(index), int(stream)))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def _sample_detunings(rng: np.random.Generator, count: int, fwhm: float, shape: str) -> np.ndarray:
    if fwhm == 0 or count == 0:
        return np.zeros(count)
    u = rng.random(count)
    limit = DETUNING_TRUNCATION * fwhm
    if shape == "gaussian":
        sigma = fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        lo, hi = special.ndtr(-limit / sigma), special.ndtr(limit / sigma)
        return sigma * special.ndtri(lo + u * (hi - lo))
    half_width = fwhm / 2.0
    edge = math.atan(limit / half_width)
    return half_width * np.tan(-edge + 2.0 * edge * u)


def _place_on_disk(rng: np.random.Generator, count: int, radius: float,
                   min_separation: float, params: SamplingParams) -> np.ndarray:
    positions = np.zeros((count, 3))
    if count == 0:
        return positions
    if min_separation == 0:
        r = radius * np.sqrt(rng.random(count))
        phi = 2.0 * math.pi * rng.random(count)
        positions[:, 0] = r * np.cos(phi)
        positions[:, 1] = r * np.sin(phi)
        return positions
    limit_sq = min_separation ** 2
    for i in range(count):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            r = radius * math.sqrt(rng.random())
            phi = 2.0 * math.pi * rng.random()
            candidate = (r * math.cos(phi), r * math.sin(phi))
            if i == 0:
                break
            d_sq = (positions[:i, 0] - candidate[0]) ** 2 + (positions[:i, 1] - candidate[1]) ** 2
            if d_sq.min() >= limit_sq:
                break
        else:
            raise SamplingError(
                f"Could not place spin {i + 1} of {count} after {MAX_PLACEMENT_ATTEMPTS} attempts "
                f"(density={params.density} nm^-2, min_separation={min_separation} nm, "
                f"radius={radius:.3g} nm)")
        positions[i, 0], positions[i, 1] = candidate
    return positions


def expected_count(params: SamplingParams, nv: NvSite) -> float:
    radius = params.rmax_factor * nv.depth
    return params.density * math.pi * radius ** 2


def sample_count(params: SamplingParams, nv: NvSite, seed: int) -> int:
    """Poisson target count only, drawn exactly as ``sample_configuration`` draws it."""
    rng = np.random.default_rng(int(seed))
    return int(rng.poisson(expected_count(params, nv)))


def sample_configuration(params: SamplingParams, nv: NvSite, seed: int) -> SpinConfiguration:
    """Draw a reporter-spin configuration above ``nv``.

    Count ~ Poisson(density * pi * (rmax_factor * depth)^2), positions uniform on the
    disk with hard-core rejection, truncated detunings, then the strongest
    ``max_targets`` spins by |a_k| are kept.
    """
    problems = params.violations()
    if problems:
        raise DomainError("; ".join(problems))
    rng = np.random.default_rng(int(seed))
    radius = params.rmax_factor * nv.depth
    count = int(rng.poisson(expected_count(params, nv)))
    positions = _place_on_disk(rng, count, radius, params.min_separation, params)
    detunings = _sample_detunings(rng, count, params.detuning_fwhm, params.detuning_shape)
    couplings = secular_coupling(positions - nv.position, nv.axis) if count else np.zeros(0)

    clamped = params.max_targets is not None and count > params.max_targets
    if clamped:
        keep = np.sort(np.argsort(-np.abs(couplings), kind="stable")[:params.max_targets])
        positions, detunings, couplings = positions[keep], detunings[keep], couplings[keep]
        logging.debug(f"Seed {seed}: clamped {count} sampled spins to {params.max_targets}")

    return SpinConfiguration(nv, positions, detunings, couplings, int(seed), count, clamped)


def configuration_from_couplings(couplings: Sequence[float], detunings: Optional[Sequence[float]] = None,
                                 pair_couplings: Optional[np.ndarray] = None,
                                 nv: Optional[NvSite] = None, seed: int = 0) -> SpinConfiguration:
    """Configuration with prescribed couplings, for engine checks without geometry."""
    couplings = np.asarray(couplings, dtype=float)
    n = len(couplings)
    detunings = np.zeros(n) if detunings is None else np.asarray(detunings, dtype=float)
    config = SpinConfiguration(nv or NvSite(), np.full((n, 3), np.nan), detunings, couplings, seed, n, False)
    pairs = np.zeros((n, n)) if pair_couplings is None else np.asarray(pair_couplings, dtype=float)
    config.__dict__["pair_couplings"] = pairs
    return config
