"""Washing-machine cycle generator with injectable bearing and heating faults.

All physical constants here are fixture values chosen to make the
classification task realistic and reproducible; none are measured data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..storage import StreamSegment, check_rate
from .prng import XorShiftRng

MAINS_VOLTAGE = 230.0
MOTOR_HZ = 50.0
BEARING_HZ = 137.0
MOTOR_CURRENT_A = 0.4
MOTOR_VIBRATION_G = 0.05
VIBRATION_FLOOR_G = 0.02
CURRENT_NOISE_A = 0.01
BEARING_AMPLITUDE_G = 0.25
HEATING_POWER_LOSS = 0.4

FAULT_KINDS = ("none", "bearing_fault", "heating_fault")


@dataclass(frozen=True)
class Phase:
    name: str
    duration_s: float
    base_power_w: float
    power_noise_w: float
    drum_hz: float
    vibration_rms_g: float
    motor: bool = True


@dataclass(frozen=True)
class ApplianceProfile:
    name: str
    phases: tuple[Phase, ...]

    def __post_init__(self):
        if not self.phases:
            raise ValueError("profile needs at least one phase")
        for p in self.phases:
            if p.duration_s <= 0:
                raise ValueError(f"phase {p.name} has non-positive duration")


WASHING_MACHINE = ApplianceProfile("washing_machine", (
    Phase("fill", 120, 30.0, 3.0, 0.0, 0.01, motor=False),
    Phase("heat", 600, 2000.0, 40.0, 0.8, 0.05),
    Phase("wash", 1200, 250.0, 15.0, 0.8, 0.20),
    Phase("rinse", 600, 200.0, 10.0, 0.8, 0.15),
    Phase("spin", 300, 450.0, 25.0, 20.0, 1.00),
))


@dataclass(frozen=True)
class FaultMode:
    kind: str = "none"
    severity: float = 0.0

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault {self.kind!r}")
        if self.kind != "none" and not 0.0 < self.severity <= 1.0:
            raise ValueError("severity must be in (0, 1]")

    @property
    def label(self) -> str:
        return "normal" if self.kind == "none" else self.kind


NO_FAULT = FaultMode()


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    fast_rate_hz: int = 2048
    duration_scale: float = 1.0
    speedup: float = 1.0
    device_id: str = "wm-01"
    start_us: int = 1_700_000_000_000_000

    def __post_init__(self):
        check_rate("fast", self.fast_rate_hz)
        if self.duration_scale <= 0:
            raise ValueError("duration_scale must be positive")

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


@dataclass
class CycleSignals:
    power: StreamSegment
    current: StreamSegment
    vibration: StreamSegment
    duration_s: float
    schedule: list[tuple[str, float]] = field(default_factory=list)

    @property
    def start_us(self) -> int:
        return self.power.start_us

    @property
    def end_us(self) -> int:
        return self.power.start_us + int(round(self.duration_s * 1e6))

    def segments(self) -> tuple[StreamSegment, StreamSegment, StreamSegment]:
        return self.power, self.current, self.vibration


def phase_schedule(profile: ApplianceProfile, fault: FaultMode, config: SimConfig) -> list[Phase]:
    """Phases with scaled durations and the heating fault applied."""
    out = []
    for p in profile.phases:
        dur = p.duration_s * config.duration_scale
        power = p.base_power_w
        if fault.kind == "heating_fault" and p.name == "heat":
            dur = dur * (1.0 + fault.severity)
            power = power * (1.0 - HEATING_POWER_LOSS * fault.severity)
        out.append(replace(p, duration_s=dur, base_power_w=power))
    return out


def generate_cycle(profile: ApplianceProfile = WASHING_MACHINE, fault: FaultMode = NO_FAULT,
                   config: SimConfig = SimConfig()) -> CycleSignals:
    phases = phase_schedule(profile, fault, config)
    durations = np.array([p.duration_s for p in phases])
    bounds = np.concatenate([[0.0], np.cumsum(durations)])
    total = float(bounds[-1])
    rate = config.fast_rate_hz
    rng = XorShiftRng(config.seed)

    # slow power, 1 Hz
    n_slow = int(np.floor(total + 1e-9))
    t_slow = np.arange(n_slow, dtype=np.float64)
    ph_slow = np.clip(np.searchsorted(bounds, t_slow, side="right") - 1, 0, len(phases) - 1)
    base = np.array([p.base_power_w for p in phases])[ph_slow]
    noise_sd = np.array([p.power_noise_w for p in phases])[ph_slow]
    power = base + rng.normal(n_slow) * noise_sd

    # fast channels
    n_fast = int(round(total * rate))
    t = np.arange(n_fast, dtype=np.float64) / rate
    ph = np.clip(np.searchsorted(bounds, t, side="right") - 1, 0, len(phases) - 1)
    motor = np.array([p.motor for p in phases], dtype=np.float64)[ph]
    held = power[np.minimum(t.astype(np.int64), max(n_slow - 1, 0))] if n_slow else np.zeros(n_fast)
    current = (held / MAINS_VOLTAGE
               + MOTOR_CURRENT_A * motor * np.sin(2 * np.pi * MOTOR_HZ * t)
               + rng.normal(n_fast, CURRENT_NOISE_A))

    drum = np.array([p.drum_hz for p in phases])[ph]
    vib_rms = np.array([p.vibration_rms_g for p in phases])[ph]
    floor = VIBRATION_FLOOR_G
    vibration = (np.sqrt(2.0) * vib_rms * (drum > 0) * np.sin(2 * np.pi * drum * t)
                 + MOTOR_VIBRATION_G * motor * np.sin(2 * np.pi * MOTOR_HZ * t))
    if fault.kind == "bearing_fault":
        vibration += BEARING_AMPLITUDE_G * fault.severity * motor * np.sin(2 * np.pi * BEARING_HZ * t)
        floor *= 1.0 + fault.severity
    vibration += rng.normal(n_fast, floor)

    dev, start = config.device_id, config.start_us
    return CycleSignals(
        StreamSegment(dev, "power", "slow", start, 1, power,
                      start + np.arange(n_slow, dtype=np.int64) * 1_000_000),
        StreamSegment(dev, "current", "fast", start, rate, current),
        StreamSegment(dev, "vibration", "fast", start, rate, vibration),
        total,
        [(p.name, p.duration_s) for p in phases],
    )
