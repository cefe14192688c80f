"""Classical magnetization model of the reporter layer.

Each target is a Bloch vector in the drive's rotating frame::

    dm/dt = m x w - (m_x, m_y, 0)/T2 - (0, 0, m_z - m_eq)/T1,   w = (Omega, 0, Delta)

with angular frequencies in rad/us and times in us. The integral of m_z over each
segment is carried alongside m so that the NV phase

    phi = sum_k (a_k / 2) * integral eta(t) m_z^k(t) dt

(a_k angular, eta = +1 before the NV pi pulse and -1 after) needs no extra sampling.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg

from deersim.constants import TWO_PI, ns_to_us
from deersim.errors import IntegrationError
from deersim.geometry import NvSite, SamplingParams, SpinConfiguration, child_seed, sample_configuration
from deersim.sequence import DeerTimeline, DriveParams, Segment, SegmentKind

# RK4 step bound: at most 1/STEPS_PER_RADIAN of a rotation or relaxation time per step.
STEPS_PER_RADIAN = 50
MAX_STEPS = 2_000_000

BLOCH_MODES = ("cos", "gaussian")

# Realization streams derived from the master seed.
CONFIGURATION_STREAM = 0
SIGN_STREAM = 1


@dataclass(frozen=True)
class RelaxationParams:
    """T1 and T2 in us (``math.inf`` disables) and the equilibrium m_z."""

    t1: float = math.inf
    t2: float = math.inf
    equilibrium_mz: float = 0.0

    def violations(self) -> List[str]:
        problems = []
        if not self.t1 > 0:
            problems.append(f"t1 must be > 0 or infinite, got {self.t1}")
        if not self.t2 > 0:
            problems.append(f"t2 must be > 0 or infinite, got {self.t2}")
        if math.isfinite(self.t1) and math.isfinite(self.t2) and self.t2 > 2.0 * self.t1:
            problems.append(f"t2 ({self.t2} us) must not exceed 2*t1 ({2.0 * self.t1} us)")
        if not -1.0 <= self.equilibrium_mz <= 1.0:
            problems.append(f"equilibrium_mz must lie in [-1, 1], got {self.equilibrium_mz}")
        return problems

    @property
    def rates(self) -> Tuple[float, float]:
        return 1.0 / self.t1, 1.0 / self.t2

    @property
    def is_lossless(self) -> bool:
        return math.isinf(self.t1) and math.isinf(self.t2)


@dataclass(frozen=True)
class BlochState:
    m: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    time: float = 0.0


@dataclass(frozen=True)
class BlochSignal:
    mean: float
    sem: float
    n: int


def _generator(rabi: float, delta: float, relax: RelaxationParams) -> np.ndarray:
    """Affine generator on (m_x, m_y, m_z, q, 1) with q the running integral of m_z."""
    g1, g2 = relax.rates
    return np.array([
        [-g2, delta, 0.0, 0.0, 0.0],
        [-delta, -g2, rabi, 0.0, 0.0],
        [0.0, -rabi, -g1, 0.0, g1 * relax.equilibrium_mz],
        [0.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ])


def _free(m: np.ndarray, deltas: np.ndarray, t: float, relax: RelaxationParams) -> Tuple[np.ndarray, np.ndarray]:
    g1, g2 = relax.rates
    c, s = np.cos(deltas * t), np.sin(deltas * t)
    out = np.empty_like(m)
    decay = math.exp(-g2 * t)
    out[:, 0] = (m[:, 0] * c + m[:, 1] * s) * decay
    out[:, 1] = (-m[:, 0] * s + m[:, 1] * c) * decay
    if g1 == 0:
        out[:, 2] = m[:, 2]
        return out, m[:, 2] * t
    m_eq = relax.equilibrium_mz
    relaxed = math.exp(-g1 * t)
    out[:, 2] = m_eq + (m[:, 2] - m_eq) * relaxed
    return out, m_eq * t + (m[:, 2] - m_eq) * (1.0 - relaxed) / g1


def _rotate(m: np.ndarray, rabi: float, deltas: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Lossless evolution: rotation of m by -|w| t about w."""
    w = np.stack([np.full_like(deltas, rabi), np.zeros_like(deltas), deltas], axis=-1)
    norm = np.linalg.norm(w, axis=-1)
    n = w / norm[:, None]
    along = np.sum(n * m, axis=-1)
    parallel = along[:, None] * n
    perpendicular = m - parallel
    cross = np.cross(n, m)
    angle = norm * t
    c, s = np.cos(angle), np.sin(angle)
    out = parallel + c[:, None] * perpendicular - s[:, None] * cross
    integral = (parallel[:, 2] * t + perpendicular[:, 2] * s / norm
                - cross[:, 2] * (1.0 - c) / norm)
    return out, integral


def _shared_expm(m: np.ndarray, rabi: float, delta: float, t: float,
                 relax: RelaxationParams) -> Tuple[np.ndarray, np.ndarray]:
    propagator = linalg.expm(_generator(rabi, delta, relax) * t)
    augmented = np.hstack([m, np.zeros((len(m), 1)), np.ones((len(m), 1))])
    result = augmented @ propagator.T
    return result[:, :3], result[:, 3]


def _derivative(m: np.ndarray, rabi: float, deltas: np.ndarray, relax: RelaxationParams) -> np.ndarray:
    g1, g2 = relax.rates
    dm = np.empty((len(m), 4))
    dm[:, 0] = deltas * m[:, 1] - g2 * m[:, 0]
    dm[:, 1] = rabi * m[:, 2] - deltas * m[:, 0] - g2 * m[:, 1]
    dm[:, 2] = -rabi * m[:, 1] - g1 * (m[:, 2] - relax.equilibrium_mz)
    dm[:, 3] = m[:, 2]
    return dm


def rk4_step_bound(rabi: float, deltas: np.ndarray, relax: RelaxationParams) -> float:
    """Largest RK4 step (us) allowed for these frequencies and relaxation times."""
    omega = math.sqrt(rabi ** 2 + float(np.max(np.abs(deltas), initial=0.0)) ** 2)
    bounds = [math.inf if omega == 0 else 1.0 / (STEPS_PER_RADIAN * omega),
              relax.t2 / STEPS_PER_RADIAN, relax.t1 / STEPS_PER_RADIAN]
    return min(bounds)


def _rk4(m: np.ndarray, rabi: float, deltas: np.ndarray, t: float,
         relax: RelaxationParams) -> Tuple[np.ndarray, np.ndarray]:
    bound = rk4_step_bound(rabi, deltas, relax)
    steps = max(1, math.ceil(t / bound))
    if steps > MAX_STEPS:
        raise IntegrationError(
            f"Bloch step underflow: {t} us needs {steps} steps of at most {bound:.3g} us (limit {MAX_STEPS})")
    h = t / steps
    state = np.hstack([m, np.zeros((len(m), 1))])
    for _ in range(steps):
        k1 = _derivative(state, rabi, deltas, relax)
        k2 = _derivative(state + 0.5 * h * k1, rabi, deltas, relax)
        k3 = _derivative(state + 0.5 * h * k2, rabi, deltas, relax)
        k4 = _derivative(state + h * k3, rabi, deltas, relax)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return state[:, :3], state[:, 3]


def evolve_batch(m: np.ndarray, duration_ns: float, rabi_mhz: float, deltas_mhz: np.ndarray,
                 relax: RelaxationParams) -> Tuple[np.ndarray, np.ndarray]:
    """Evolve Bloch vectors (n, 3) for one segment; returns (m, integral of m_z in us)."""
    m = np.asarray(m, dtype=float).reshape(-1, 3)
    deltas = TWO_PI * np.broadcast_to(np.asarray(deltas_mhz, dtype=float), (len(m),))
    t = ns_to_us(duration_ns)
    if t == 0 or len(m) == 0:
        return m.copy(), np.zeros(len(m))
    rabi = TWO_PI * rabi_mhz
    if rabi == 0:
        return _free(m, deltas, t, relax)
    if relax.is_lossless:
        return _rotate(m, rabi, deltas, t)
    if np.all(deltas == deltas[0]):
        return _shared_expm(m, rabi, float(deltas[0]), t, relax)
    return _rk4(m, rabi, deltas, t, relax)


def bloch_evolve(state: BlochState, segment: Segment, drive: DriveParams, relax: RelaxationParams,
                 detuning: float = 0.0) -> BlochState:
    """Evolve one Bloch vector through ``segment``; ``detuning`` (MHz) is the spin's own offset."""
    rabi = drive.rabi if segment.kind is SegmentKind.DRIVE else 0.0
    m, _ = evolve_batch(state.m, segment.duration, rabi, detuning - drive.frequency_offset, relax)
    return BlochState(m[0], state.time + segment.duration)


def initial_signs(rng: np.random.Generator, count: int, polarization: float = 0.0) -> np.ndarray:
    """+/-1 initial m_z with P(+1) = (1 + polarization)/2."""
    return np.where(rng.random(count) < 0.5 * (1.0 + polarization), 1.0, -1.0)


def nv_phase(config: SpinConfiguration, timeline: DeerTimeline, relax: RelaxationParams,
             drive: DriveParams, initial_mz: Optional[np.ndarray] = None,
             rng: Optional[np.random.Generator] = None, polarization: float = 0.0) -> float:
    """Accumulated NV phase (rad) for one configuration and one draw of initial signs."""
    n = len(config)
    if n == 0:
        return 0.0
    if initial_mz is None:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        initial_mz = initial_signs(rng, n, polarization)
    m = np.zeros((n, 3))
    m[:, 2] = initial_mz
    weights = math.pi * np.asarray(config.nv_couplings)  # a_angular / 2
    deltas = np.asarray(config.detunings) - drive.frequency_offset

    halves = []
    for segments in timeline.halves():
        accumulated = 0.0
        for segment in segments:
            rabi = drive.rabi if segment.kind is SegmentKind.DRIVE else 0.0
            m, integral = evolve_batch(m, segment.duration, rabi, deltas, relax)
            accumulated += float(weights @ integral)
        halves.append(accumulated)
    # echo sign: +1 before the NV pi pulse, -1 after
    return halves[0] - halves[1]


def reduce_phases(phases: np.ndarray, mode: str = "cos") -> BlochSignal:
    """Signal and standard error from per-realization phases."""
    phases = np.asarray(phases, dtype=float)
    n = len(phases)
    if mode == "cos":
        values = np.cos(phases)
        sem = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return BlochSignal(float(np.mean(values)), sem, n)
    if mode == "gaussian":
        squares = phases ** 2
        signal = math.exp(-0.5 * float(np.mean(squares)))
        sem = 0.5 * signal * float(np.std(squares, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
        return BlochSignal(signal, sem, n)
    raise ValueError(f"Unknown Bloch mode {mode!r}; choose from {', '.join(BLOCH_MODES)}")


def realization_phase(params: SamplingParams, nv: NvSite, timeline: DeerTimeline, drive: DriveParams,
                      relax: RelaxationParams, master_seed: int, index: int, polarization: float = 0.0) -> float:
    config = sample_configuration(params, nv, child_seed(master_seed, index, CONFIGURATION_STREAM))
    rng = np.random.default_rng(child_seed(master_seed, index, SIGN_STREAM))
    return nv_phase(config, timeline, relax, drive, rng=rng, polarization=polarization)


def deer_signal_bloch(params: SamplingParams, nv: NvSite, timeline: DeerTimeline, drive: DriveParams,
                      relax: RelaxationParams, n_realizations: int, seed: int, mode: str = "cos",
                      polarization: float = 0.0) -> BlochSignal:
    """Monte Carlo DEER signal of the classical layer over ``n_realizations`` child seeds."""
    if n_realizations < 1:
        raise ValueError(f"n_realizations must be >= 1, got {n_realizations}")
    phases = np.array([realization_phase(params, nv, timeline, drive, relax, seed, i, polarization)
                       for i in range(n_realizations)])
    signal = reduce_phases(phases, mode)
    logging.debug(f"Bloch DEER ({mode}): {signal.mean:.6f} +/- {signal.sem:.2g} over {n_realizations} realizations")
    return signal
