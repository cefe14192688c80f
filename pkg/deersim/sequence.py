"""DEER timeline construction.

tau is the total NV free evolution: two echo halves of tau/2 separated by the NV
pi pulse. Each half carries one radical drive window of duration Ts starting
``offset_after_nv_pulse`` ns after the preceding NV pulse. NV pulses are ideal
and take zero time.
"""
import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from deersim.errors import ConstraintError

# Slack for comparing sums of floating-point durations (ns).
TIME_TOLERANCE_NS = 1e-9

TS_SWEEP = "ts_sweep"
FREQUENCY_SWEEP = "frequency_sweep"
SWEEP_KINDS = (TS_SWEEP, FREQUENCY_SWEEP)


class NvAction(str, Enum):
    NONE = "none"
    HALF_PULSE_X = "half_pulse_x"
    HALF_PULSE_PHASE = "half_pulse_phase"
    PI_PULSE = "pi_pulse"


class SegmentKind(str, Enum):
    FREE = "free"
    DRIVE = "drive"


@dataclass(frozen=True)
class DriveParams:
    """Radical drive: Rabi frequency (MHz), detuning (MHz), Ts and offset (ns)."""

    rabi: float = 10.0
    frequency_offset: float = 0.0
    duration: float = 0.0
    offset_after_nv_pulse: float = 0.0

    def violations(self) -> List[str]:
        problems = []
        if not self.rabi >= 0:
            problems.append(f"rabi must be >= 0, got {self.rabi}")
        if not self.duration >= 0:
            problems.append(f"duration must be >= 0, got {self.duration}")
        if not self.offset_after_nv_pulse >= 0:
            problems.append(f"offset_after_nv_pulse must be >= 0, got {self.offset_after_nv_pulse}")
        if not np.isfinite(self.frequency_offset):
            problems.append(f"frequency_offset must be finite, got {self.frequency_offset}")
        return problems


@dataclass(frozen=True)
class Segment:
    duration: float
    nv_action: NvAction = NvAction.NONE
    radical_drive_on: bool = False

    @property
    def kind(self) -> SegmentKind:
        return SegmentKind.DRIVE if self.radical_drive_on else SegmentKind.FREE

    @property
    def is_pulse(self) -> bool:
        return self.nv_action is not NvAction.NONE


@dataclass(frozen=True)
class DeerTimeline:
    segments: Tuple[Segment, ...]
    tau_total: float
    readout_phase: float = 0.0

    def halves(self) -> Tuple[List[Segment], List[Segment]]:
        """Timed segments before and after the NV pi pulse."""
        first, second = [], []
        current = first
        for segment in self.segments:
            if segment.nv_action is NvAction.PI_PULSE:
                current = second
            elif not segment.is_pulse:
                current.append(segment)
        return first, second

    @property
    def total_duration(self) -> float:
        return sum(s.duration for s in self.segments)

    @property
    def drive_time(self) -> float:
        return sum(s.duration for s in self.segments if s.radical_drive_on)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tau_total_ns": self.tau_total,
            "readout_phase_deg": self.readout_phase,
            "segments": [{"duration_ns": s.duration, "nv_action": s.nv_action.value,
                          "radical_drive_on": s.radical_drive_on} for s in self.segments],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _half(tau: float, drive: DriveParams) -> List[Segment]:
    half = tau / 2.0
    segments = []
    if drive.duration > 0:
        if drive.offset_after_nv_pulse > 0:
            segments.append(Segment(drive.offset_after_nv_pulse))
        segments.append(Segment(drive.duration, radical_drive_on=True))
        rest = half - drive.offset_after_nv_pulse - drive.duration
    else:
        rest = half
    if rest > 0:
        segments.append(Segment(rest))
    return segments


def check_fits(tau: float, drive: DriveParams) -> Optional[str]:
    if drive.duration + drive.offset_after_nv_pulse > tau / 2.0 + TIME_TOLERANCE_NS:
        return (f"Ts ({drive.duration} ns) + offset ({drive.offset_after_nv_pulse} ns) "
                f"exceeds tau/2 ({tau / 2.0} ns)")
    return None


def build_deer_timeline(tau: float, drive: DriveParams, readout_phase: float = 0.0) -> DeerTimeline:
    """Build the two-window DEER timeline for total free evolution ``tau`` (ns)."""
    if not tau > 0:
        raise ConstraintError(f"tau must be positive, got {tau} ns", [tau])
    problems = drive.violations()
    if problems:
        raise ConstraintError("; ".join(problems), problems)
    problem = check_fits(tau, drive)
    if problem:
        raise ConstraintError(problem, [drive.duration])
    if readout_phase not in (0, 180):
        raise ConstraintError(f"readout_phase must be 0 or 180 degrees, got {readout_phase}", [readout_phase])

    segments = [Segment(0.0, NvAction.HALF_PULSE_X)]
    segments.extend(_half(tau, drive))
    segments.append(Segment(0.0, NvAction.PI_PULSE))
    segments.extend(_half(tau, drive))
    segments.append(Segment(0.0, NvAction.HALF_PULSE_PHASE))
    timeline = DeerTimeline(tuple(segments), tau, float(readout_phase))
    logging.debug(f"Built DEER timeline: tau={tau} ns, Ts={drive.duration} ns, {len(segments)} segments")
    return timeline


def sweep_axis(kind: str, values: Sequence[float], base: DriveParams, tau: float,
               center_frequency: Optional[float] = None) -> List[DriveParams]:
    """One DriveParams per sweep value, all other fields taken from ``base``.

    For frequency sweeps ``values`` are absolute drive frequencies when
    ``center_frequency`` is given (offsets = value - center), else offsets.
    """
    if kind not in SWEEP_KINDS:
        raise ConstraintError(f"Unknown sweep kind {kind!r}; choose from {', '.join(SWEEP_KINDS)}", [kind])
    values = list(values)
    if not values:
        raise ConstraintError("Sweep values must not be empty")

    drives, offenders = [], []
    for value in values:
        if kind == TS_SWEEP:
            drive = replace(base, duration=float(value))
        else:
            offset = float(value) - center_frequency if center_frequency is not None else float(value)
            drive = replace(base, frequency_offset=offset)
        if drive.violations() or check_fits(tau, drive):
            offenders.append(value)
        drives.append(drive)
    if offenders:
        raise ConstraintError(f"Sweep values out of range for tau={tau} ns: {offenders}", offenders)
    return drives