"""Closed-form and semi-analytic DEER models.

Single-spin factors compose the target's 2x2 propagators segment by segment in
each NV branch; ensembles of non-interacting spins multiply them. The Poisson
average integrates 1 - s(r) over the surface plane, and the floor formula
evaluates the closed-form minimum signal.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from scipy import integrate

from deersim.constants import CONST, MAGIC_ANGLE_DEG, TWO_PI, ns_to_us
from deersim.errors import AccuracyError, DomainError
from deersim.geometry import DETUNING_TRUNCATION, SpinConfiguration, field_axis, secular_coupling
from deersim.sequence import DriveParams, SegmentKind, build_deer_timeline

# Tolerance for factors that round slightly outside [-1, 1].
FACTOR_SLACK = 1e-9


@dataclass(frozen=True)
class SingleSpinParams:
    """One target spin: coupling and detuning (MHz), Rabi (MHz), tau, Ts, offset (ns)."""

    coupling: float
    detuning: float = 0.0
    rabi: float = 10.0
    tau: float = 900.0
    ts: float = 0.0
    offset: float = 0.0

    @property
    def drive(self) -> DriveParams:
        return DriveParams(rabi=self.rabi, duration=self.ts, offset_after_nv_pulse=self.offset)


@dataclass(frozen=True)
class FloorParams:
    """Areal density (nm^-2), NV depth (nm), total free evolution tau (ns)."""

    density: float
    depth: float = 12.0
    tau: float = 900.0

    def __post_init__(self):
        if not self.density >= 0:
            raise DomainError(f"density must be >= 0, got {self.density}")
        if not self.depth > 0:
            raise DomainError(f"depth must be > 0, got {self.depth}")
        if not self.tau > 0:
            raise DomainError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class QuadratureSpec:
    """Controls for the surface-plane average.

    The radial integral is adaptive (``abs_tol`` on the area integral in nm^2) and
    truncated at ``rmax_factor * depth``; the neglected tail is O((depth/rmax)^4)
    of the total since the integrand falls as r^-6. The azimuthal integral uses the
    periodic trapezoid rule with ``azimuth_nodes`` points. Detuning averages use
    ``detuning_nodes`` Gauss-Legendre nodes, truncated at 5 FWHM.
    """

    abs_tol: float = 1e-6
    rmax_factor: float = 10.0
    azimuth_nodes: int = 64
    detuning_fwhm: float = 0.0
    detuning_shape: str = "lorentzian"
    detuning_nodes: int = 48
    instantaneous: bool = False
    max_subdivisions: int = 500


@dataclass(frozen=True)
class OrientationFinding:
    """Which field orientation the closed-form floor's exponent corresponds to."""

    orientation: str
    ratios: Dict[str, float] = field(default_factory=dict)
    residual_factor: float = 1.0

    def to_dict(self) -> Dict:
        return {"orientation": self.orientation, "ratios": dict(self.ratios),
                "residual_factor": self.residual_factor}


def _rotations(wx: np.ndarray, wz: np.ndarray, t: float) -> np.ndarray:
    """exp(-i t (wx s_x + wz s_z)) for arrays of angular frequencies, shape (..., 2, 2)."""
    norm = np.hypot(wx, wz)
    c = np.cos(norm * t / 2.0)
    # sin(|w|t/2)/|w| without dividing by zero
    s = (t / 2.0) * np.sinc(norm * t / (2.0 * math.pi))
    u = np.empty(np.shape(norm) + (2, 2), dtype=complex)
    u[..., 0, 0] = c - 1j * s * wz
    u[..., 0, 1] = -1j * s * wx
    u[..., 1, 0] = -1j * s * wx
    u[..., 1, 1] = c + 1j * s * wz
    return u


def instantaneous_factor(coupling, tau: float, offset: float = 0.0):
    """Echo factor for an ideal pi flip ``offset`` ns after each NV pulse."""
    effective = ns_to_us(tau - 4.0 * offset)
    return np.cos(math.pi * np.asarray(coupling, dtype=float) * effective)


def single_spin_factors(couplings, detunings, drive: DriveParams, tau: float,
                        instantaneous: bool = False) -> np.ndarray:
    """Vectorized single-spin DEER factors.

    ``detunings`` are relative to the spin's resonance at zero drive offset; the
    drive's ``frequency_offset`` is subtracted here.
    """
    couplings = np.asarray(couplings, dtype=float)
    detunings = np.broadcast_to(np.asarray(detunings, dtype=float), couplings.shape)
    if instantaneous:
        return instantaneous_factor(couplings, tau, drive.offset_after_nv_pulse)
    if drive.duration == 0 or drive.rabi == 0 or couplings.size == 0:
        return np.ones(couplings.shape)

    first, second = build_deer_timeline(tau, drive).halves()
    rabi = TWO_PI * drive.rabi
    delta = TWO_PI * (detunings - drive.frequency_offset)
    split = math.pi * couplings
    identity = np.broadcast_to(np.eye(2, dtype=complex), couplings.shape + (2, 2))

    def compose(segments, sign):
        u = identity
        wz = delta + sign * split
        for segment in segments:
            wx = np.full(couplings.shape, rabi if segment.kind is SegmentKind.DRIVE else 0.0)
            u = _rotations(wx, wz, ns_to_us(segment.duration)) @ u
        return u

    left = compose(second, -1.0) @ compose(first, +1.0)
    right = compose(second, +1.0) @ compose(first, -1.0)
    coherence = np.einsum("...ij,...ij->...", right.conj(), left) / 2.0
    return np.clip(coherence.real, -1.0, 1.0)


def single_spin_deer(p: SingleSpinParams, instantaneous: bool = False) -> float:
    """DEER factor of one target spin; see ``single_spin_factors``."""
    return float(single_spin_factors(p.coupling, p.detuning, p.drive, p.tau, instantaneous))


def ensemble_product(factors: Iterable[float]) -> float:
    factors = np.asarray(list(factors), dtype=float)
    if np.any(np.abs(factors) > 1.0 + FACTOR_SLACK):
        raise DomainError(f"Signal factors must lie in [-1, 1], got {factors[np.abs(factors) > 1.0]}")
    return float(np.prod(factors))


def ensemble_signal(config: SpinConfiguration, drive: DriveParams, tau: float,
                    instantaneous: bool = False) -> float:
    """Non-interacting signal of a sampled configuration (pair couplings ignored)."""
    factors = single_spin_factors(config.nv_couplings, config.detunings, drive, tau, instantaneous)
    return ensemble_product(factors)


def _detuning_nodes(quad: QuadratureSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Detuning nodes (MHz) and normalized weights for the line-shape average."""
    if quad.detuning_fwhm == 0:
        return np.zeros(1), np.ones(1)
    x, w = np.polynomial.legendre.leggauss(quad.detuning_nodes)
    limit = DETUNING_TRUNCATION * quad.detuning_fwhm
    if quad.detuning_shape == "gaussian":
        sigma = quad.detuning_fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        nodes = limit * x
        weights = w * np.exp(-0.5 * (nodes / sigma) ** 2)
    else:
        # in u = atan(2 delta / fwhm) the Lorentzian is uniform
        half_width = quad.detuning_fwhm / 2.0
        edge = math.atan(limit / half_width)
        nodes = half_width * np.tan(edge * x)
        weights = w
    return nodes, weights / weights.sum()


def _azimuths(quad: QuadratureSpec, normal: bool) -> np.ndarray:
    if normal:
        return np.zeros(1)
    return TWO_PI * np.arange(quad.azimuth_nodes) / quad.azimuth_nodes


def _couplings_on_ring(radius: float, depth: float, axis: np.ndarray, phis: np.ndarray) -> np.ndarray:
    separation = np.stack([radius * np.cos(phis), radius * np.sin(phis), np.full_like(phis, depth)], axis=-1)
    return secular_coupling(separation, axis)


def _is_normal(nv_axis: Tuple[float, float]) -> bool:
    return abs(nv_axis[0]) < 1e-12


def _plane_integral(ring_mean, depth: float, quad: QuadratureSpec, label: str) -> float:
    """2 pi * integral of r * ring_mean(r) dr over [0, rmax_factor * depth]."""
    upper = quad.rmax_factor * depth
    result = integrate.quad(lambda r: r * ring_mean(r), 0.0, upper, epsabs=quad.abs_tol, epsrel=0.0,
                            limit=quad.max_subdivisions, full_output=1)
    value, error = result[0], result[1]
    if len(result) > 3:
        # quad appends a message when it stops short of the tolerance
        raise AccuracyError(f"{label} quadrature did not converge: {result[3]}", achieved=TWO_PI * error)
    logging.debug(f"{label} integral: {TWO_PI * value:.10g} nm^2 (error estimate {TWO_PI * error:.3g})")
    return TWO_PI * value


def dephasing_area(params: FloorParams, drive: DriveParams, nv_axis: Tuple[float, float] = (MAGIC_ANGLE_DEG, 0.0),
                   quadrature: QuadratureSpec = QuadratureSpec()) -> float:
    """Integral of 1 - s(r) over the surface plane (nm^2), s averaged over detunings."""
    axis = field_axis(*nv_axis)
    phis = _azimuths(quadrature, _is_normal(nv_axis))
    nodes, weights = _detuning_nodes(quadrature)

    def ring_mean(radius):
        couplings = _couplings_on_ring(radius, params.depth, axis, phis)
        grid_a, grid_d = np.meshgrid(couplings, nodes, indexing="ij")
        factors = single_spin_factors(grid_a, grid_d, drive, params.tau, quadrature.instantaneous)
        return float(np.mean((1.0 - factors) @ weights))

    return _plane_integral(ring_mean, params.depth, quadrature, "Dephasing")


def poisson_average_signal(params: FloorParams, drive: DriveParams,
                           nv_axis: Tuple[float, float] = (MAGIC_ANGLE_DEG, 0.0),
                           quadrature: QuadratureSpec = QuadratureSpec()) -> float:
    """exp(-density * integral of (1 - s(r)) d^2r) for a Poisson layer of non-interacting spins."""
    if params.density == 0:
        return 1.0
    area = dephasing_area(params, drive, nv_axis, quadrature)
    return math.exp(-params.density * area)


def eq1_coefficient(depth: float, tau: float, constants=CONST) -> float:
    """Floor exponent per unit density (nm^2), evaluated in SI units.

    (mu0/4pi)^2 * 3 pi gamma^4 hbar^2 tau^2 / (16 d^4)
    """
    depth_m = depth * 1e-9
    tau_s = tau * 1e-9
    per_m2 = (constants.mu0_over_4pi ** 2 * 3.0 * math.pi * constants.gamma_e ** 4 * constants.hbar ** 2
              * tau_s ** 2 / (16.0 * depth_m ** 4))
    return per_m2 * 1e-18


def eq1_exponent(params: FloorParams) -> float:
    return params.density * eq1_coefficient(params.depth, params.tau)


def eq1_floor(params: FloorParams) -> float:
    """Closed-form minimum DEER signal over Ts for a Poisson layer.

    >>> eq1_floor(FloorParams(0.0))
    1.0
    >>> round(eq1_floor(FloorParams(0.31, 12.0, 900.0)), 2)
    0.47
    """
    return math.exp(-eq1_exponent(params))


def second_moment_exponent(params: FloorParams, nv_axis: Tuple[float, float],
                           quadrature: QuadratureSpec = QuadratureSpec()) -> float:
    """Gaussian-phase exponent (1/2) density (tau/2)^2 integral of a_angular^2 d^2r."""
    axis = field_axis(*nv_axis)
    phis = _azimuths(quadrature, _is_normal(nv_axis))

    def ring_mean(radius):
        couplings = TWO_PI * _couplings_on_ring(radius, params.depth, axis, phis)
        return float(np.mean(couplings ** 2))

    moment = _plane_integral(ring_mean, params.depth, quadrature, "Second moment")
    half_tau = ns_to_us(params.tau) / 2.0
    return 0.5 * params.density * half_tau ** 2 * moment


CANDIDATE_ORIENTATIONS = {
    "normal": (0.0, 0.0),
    "tilted": (MAGIC_ANGLE_DEG, 0.0),
}


def identify_eq1_orientation(params: Optional[FloorParams] = None,
                             quadrature: QuadratureSpec = QuadratureSpec()) -> OrientationFinding:
    """Match the floor exponent against second-moment exponents of candidate orientations.

    The ratio second-moment / floor is independent of density, depth and tau; the
    orientation whose ratio is closest to 1 (in log) is reported together with the
    remaining factor.
    """
    params = params or FloorParams(0.1, 12.0, 900.0)
    reference = eq1_exponent(params)
    ratios = {name: second_moment_exponent(params, angles, quadrature) / reference
              for name, angles in CANDIDATE_ORIENTATIONS.items()}
    orientation = min(ratios, key=lambda name: abs(math.log(ratios[name])))
    finding = OrientationFinding(orientation, ratios, ratios[orientation])
    logging.info(f"Floor formula matches the {orientation} field orientation "
                 f"(second-moment/floor ratios: {', '.join(f'{k}={v:.4f}' for k, v in ratios.items())})")
    return finding
