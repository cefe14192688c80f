"""Exact NV-conditional evolution of a small dipolar-coupled reporter ensemble.

Operator conventions (the only place they are fixed):

* Targets are spin-1/2, s = sigma/2. Basis index i encodes spin k in bit
  ``N-1-k`` (Kronecker order), bit 0 = up (s_z = +1/2).
* Frame rotating at the drive frequency for targets and at omega_NV for the NV.
  Angular units rad/us, times in us.
* NV branch Hamiltonians on the target space::

      h_plus/minus = sum_k [2pi(delta_k - f) +/- pi a_k] s_z^k
                     + pair term
                     + 2pi Omega sum_k s_x^k            (drive segments only)

  so that h_plus - h_minus = 2pi sum_k a_k s_z^k. f is the drive frequency offset.
* Pair term with b_jk in rad/us: "secular" b (3 s_z s_z - s.s)/2,
  "ising" b s_z s_z, "none" zero.
* The NV pi pulse exchanges the branches. With L = U2_minus U1_plus and
  R = U2_plus U1_minus the echo coherence is C = Tr(L rho R^dagger), and the
  phase-alternated, normalized readout p(0) - p(180) equals Re C.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from deersim.constants import TWO_PI, ns_to_us
from deersim.errors import CapacityError, NumericalIntegrityError
from deersim.geometry import SpinConfiguration
from deersim.sequence import DeerTimeline, DriveParams, SegmentKind

DEFAULT_MAX_QUBITS = 12

# Above this many targets propagators come from scaling-and-squaring instead of eigh.
DIAGONALIZATION_LIMIT = 8

UNITARITY_TOLERANCE = 1e-8

INTERACTIONS = ("secular", "ising", "none")


@dataclass(frozen=True)
class InitialState:
    """Target initial state: maximally mixed, or thermal with inverse temperature beta.

    beta is hbar*omega_L/kT, giving polarization tanh(beta/2) per spin.
    """

    kind: str = "maximally_mixed"
    beta: float = 0.0

    @property
    def polarization(self) -> float:
        if self.kind == "maximally_mixed":
            return 0.0
        if self.kind == "thermal":
            return math.tanh(self.beta / 2.0)
        raise ValueError(f"Unknown initial state {self.kind!r}")


@dataclass(frozen=True)
class ConditionalHamiltonianPair:
    h_plus: np.ndarray
    h_minus: np.ndarray
    segment_kind: SegmentKind


@dataclass(frozen=True)
class DeerObservable:
    signal: float
    coherence: complex = 1.0 + 0.0j

    def readout_population(self, readout_phase: float) -> float:
        """NV population after a final pi/2 pulse with the given phase (degrees)."""
        return 0.5 * (1.0 + math.cos(math.radians(readout_phase)) * self.coherence.real)


def _bits(n_targets: int) -> np.ndarray:
    """(2^N, N) array of basis-state bits, bit 1 = spin down."""
    index = np.arange(2 ** n_targets)
    shifts = np.arange(n_targets - 1, -1, -1)
    return (index[:, None] >> shifts[None, :]) & 1


def _check_capacity(n_targets: int, max_qubits: int) -> None:
    if n_targets > max_qubits:
        raise CapacityError(
            f"{n_targets} targets need a 2^{n_targets}-dimensional space; limit is {max_qubits} targets")


def build_segment_hamiltonians(config: SpinConfiguration, drive: DriveParams,
                               segment_kind: SegmentKind, interaction: str = "secular",
                               max_qubits: int = DEFAULT_MAX_QUBITS) -> ConditionalHamiltonianPair:
    """Branch Hamiltonians (rad/us) for one segment kind; see module docstring."""
    if interaction not in INTERACTIONS:
        raise ValueError(f"interaction must be one of {INTERACTIONS}, got {interaction!r}")
    n = len(config)
    _check_capacity(n, max_qubits)
    dim = 2 ** n
    if n == 0:
        empty = np.zeros((1, 1))
        return ConditionalHamiltonianPair(empty, empty.copy(), SegmentKind(segment_kind))

    bits = _bits(n)
    z = 0.5 - bits  # s_z eigenvalues, (dim, N)
    detuning = TWO_PI * (np.asarray(config.detunings) - drive.frequency_offset)
    conditional = math.pi * np.asarray(config.nv_couplings)

    common = np.zeros((dim, dim))
    diagonal = z @ detuning

    if interaction != "none" and n > 1:
        pairs = TWO_PI * np.asarray(config.pair_couplings)
        for j in range(n):
            for k in range(j + 1, n):
                b = pairs[j, k]
                if b == 0.0:
                    continue
                diagonal = diagonal + b * z[:, j] * z[:, k]
                if interaction == "secular":
                    # -(b/2)(s_x s_x + s_y s_y) has element -b/4 between bit-swapped states
                    differ = bits[:, j] != bits[:, k]
                    source = np.nonzero(differ)[0]
                    target = source ^ ((1 << (n - 1 - j)) | (1 << (n - 1 - k)))
                    common[source, target] += -b / 4.0

    if SegmentKind(segment_kind) is SegmentKind.DRIVE and drive.rabi != 0.0:
        rabi = TWO_PI * drive.rabi
        states = np.arange(dim)
        for k in range(n):
            common[states, states ^ (1 << (n - 1 - k))] += rabi / 2.0

    split = z @ conditional
    h_plus = common.copy()
    h_minus = common
    h_plus[np.diag_indices(dim)] += diagonal + split
    h_minus[np.diag_indices(dim)] += diagonal - split
    return ConditionalHamiltonianPair(h_plus, h_minus, SegmentKind(segment_kind))


def _check_unitary(u: np.ndarray, label: str) -> None:
    drift = np.abs(u.conj().T @ u - np.eye(len(u))).max()
    if drift > UNITARITY_TOLERANCE:
        raise NumericalIntegrityError(f"Propagator {label} is not unitary (drift {drift:.3g})")


class QuantumDeerEngine:
    """Propagates both NV branches through a DEER timeline for one configuration.

    Eigendecompositions are cached per (segment kind, branch, drive) and
    propagators per (segment kind, branch, drive, duration), so a Ts sweep reuses
    the free-evolution work across points.
    """

    def __init__(self, config: SpinConfiguration, interaction: str = "secular",
                 max_qubits: int = DEFAULT_MAX_QUBITS):
        _check_capacity(len(config), max_qubits)
        self.config = config
        self.interaction = interaction
        self.max_qubits = max_qubits
        self._hamiltonians: Dict[Tuple, ConditionalHamiltonianPair] = {}
        self._eigen: Dict[Tuple, Tuple[np.ndarray, np.ndarray]] = {}
        self._propagators: Dict[Tuple, np.ndarray] = {}

    @property
    def n_targets(self) -> int:
        return len(self.config)

    def _drive_key(self, kind: SegmentKind, drive: DriveParams) -> Tuple:
        # free evolution does not depend on the Rabi frequency
        rabi = drive.rabi if kind is SegmentKind.DRIVE else 0.0
        return (kind.value, rabi, drive.frequency_offset)

    def _pair(self, kind: SegmentKind, drive: DriveParams) -> ConditionalHamiltonianPair:
        key = self._drive_key(kind, drive)
        if key not in self._hamiltonians:
            self._hamiltonians[key] = build_segment_hamiltonians(
                self.config, drive, kind, self.interaction, self.max_qubits)
        return self._hamiltonians[key]

    def propagator(self, kind: SegmentKind, branch: str, drive: DriveParams, duration_ns: float) -> np.ndarray:
        key = self._drive_key(kind, drive) + (branch, duration_ns)
        if key in self._propagators:
            return self._propagators[key]
        pair = self._pair(kind, drive)
        h = pair.h_plus if branch == "plus" else pair.h_minus
        t = ns_to_us(duration_ns)
        if self.n_targets <= DIAGONALIZATION_LIMIT:
            eig_key = key[:-1]
            if eig_key not in self._eigen:
                self._eigen[eig_key] = linalg.eigh(h)
            w, v = self._eigen[eig_key]
            u = (v * np.exp(-1j * w * t)) @ v.conj().T
        else:
            u = linalg.expm(-1j * t * h)
        _check_unitary(u, f"{kind.value}/{branch}/{duration_ns}ns")
        self._propagators[key] = u
        return u

    def _half_propagators(self, segments, drive: DriveParams) -> Tuple[np.ndarray, np.ndarray]:
        dim = 2 ** self.n_targets
        u_plus = np.eye(dim, dtype=complex)
        u_minus = np.eye(dim, dtype=complex)
        for segment in segments:
            if segment.duration <= 0:
                continue
            u_plus = self.propagator(segment.kind, "plus", drive, segment.duration) @ u_plus
            u_minus = self.propagator(segment.kind, "minus", drive, segment.duration) @ u_minus
        return u_plus, u_minus

    def coherence(self, timeline: DeerTimeline, drive: DriveParams,
                  initial_state: InitialState = InitialState()) -> complex:
        if self.n_targets == 0:
            return 1.0 + 0.0j
        first, second = timeline.halves()
        u1_plus, u1_minus = self._half_propagators(first, drive)
        u2_plus, u2_minus = self._half_propagators(second, drive)
        left = u2_minus @ u1_plus
        right = u2_plus @ u1_minus
        polarization = initial_state.polarization
        if polarization == 0.0:
            return complex(np.vdot(right, left)) / left.shape[0]
        weights = np.prod(0.5 * (1.0 + polarization * (1 - 2 * _bits(self.n_targets))), axis=1)
        return complex(np.vdot(right, left * weights[None, :]))

    def evaluate(self, timeline: DeerTimeline, drive: DriveParams,
                 initial_state: InitialState = InitialState()) -> DeerObservable:
        c = self.coherence(timeline, drive, initial_state)
        return DeerObservable(float(c.real), c)

    def dump_propagators(self, path) -> None:
        """Write cached propagators as text: a ``# key`` line, then rows of ``re im`` pairs."""
        with open(path, "w", encoding="utf-8") as f:
            for key, u in sorted(self._propagators.items(), key=lambda item: repr(item[0])):
                kind, rabi, offset, branch, duration = key
                f.write(f"# kind={kind} rabi_mhz={rabi!r} frequency_offset_mhz={offset!r} "
                        f"branch={branch} duration_ns={duration!r} dim={len(u)}\n")
                for row in u:
                    f.write(" ".join(f"{z.real:.17g} {z.imag:.17g}" for z in row))
                    f.write("\n")


def deer_signal_quantum(config: SpinConfiguration, timeline: DeerTimeline, drive: DriveParams,
                        initial_state: InitialState = InitialState(), interaction: str = "secular",
                        max_qubits: int = DEFAULT_MAX_QUBITS,
                        engine: Optional[QuantumDeerEngine] = None) -> DeerObservable:
    """Normalized DEER signal of ``config`` under ``timeline`` (exact propagation)."""
    engine = engine or QuantumDeerEngine(config, interaction, max_qubits)
    observable = engine.evaluate(timeline, drive, initial_state)
    logging.debug(f"Quantum DEER: N={engine.n_targets}, Ts={drive.duration} ns, signal={observable.signal:.6f}")
    return observable
