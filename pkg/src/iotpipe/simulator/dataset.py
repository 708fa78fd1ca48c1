"""Labeled synthetic cycle sets for training and evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from ..storage import write_segment
from .generator import (
    WASHING_MACHINE,
    ApplianceProfile,
    CycleSignals,
    FaultMode,
    SimConfig,
    generate_cycle,
    phase_schedule,
)
from .prng import XorShiftRng, derive_seed

LABELS = ("normal", "bearing_fault", "heating_fault")
SEVERITY_RANGE = (0.3, 1.0)
CYCLE_SPACING_US = 4 * 3600 * 1_000_000


@dataclass
class LabeledCycle:
    cycle_id: str
    label: str
    fault: FaultMode
    config: SimConfig
    profile: ApplianceProfile = WASHING_MACHINE

    def generate(self) -> CycleSignals:
        return generate_cycle(self.profile, self.fault, self.config)


def plan_dataset(n_per_class: int, config: SimConfig,
                 profile: ApplianceProfile = WASHING_MACHINE) -> list[LabeledCycle]:
    """Cycle descriptors only; signals are generated lazily via ``generate()``."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = XorShiftRng(derive_seed(config.seed, 0xDA7A))
    lo, hi = SEVERITY_RANGE
    severities = lo + (hi - lo) * rng.uniform(3 * n_per_class)
    out = []
    idx = 0
    for c, label in enumerate(LABELS):
        for i in range(n_per_class):
            kind = "none" if label == "normal" else label
            sev = 0.0 if kind == "none" else float(severities[idx])
            cfg = config.with_(
                seed=derive_seed(config.seed, c, i),
                start_us=config.start_us + idx * CYCLE_SPACING_US,
            )
            out.append(LabeledCycle(f"sim{config.seed}-{label}-{i:04d}", label,
                                    FaultMode(kind, sev), cfg, profile))
            idx += 1
    return out


def write_manifest_csv(cycles: list[LabeledCycle], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle_id", "label"])
        for c in cycles:
            w.writerow([c.cycle_id, c.label])
    return path


def read_manifest_csv(path: str | Path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["cycle_id", "label"]:
        raise ValueError(f"{path}: expected header cycle_id,label")
    return [(r[0], r[1]) for r in rows[1:]]


def make_dataset(n_per_class: int, config: SimConfig, out_dir: str | Path | None = None,
                 profile: ApplianceProfile = WASHING_MACHINE) -> list[LabeledCycle]:
    """Plan ``n_per_class`` cycles of each label; with ``out_dir``, also write
    raw CSVs under ``<out>/data/<cycle_id>/`` and ``<out>/labels.csv``."""
    cycles = plan_dataset(n_per_class, config, profile)
    if out_dir is not None:
        out = Path(out_dir)
        for c in cycles:
            sig = c.generate()
            for seg in sig.segments():
                write_segment(seg, out / "data" / c.cycle_id / f"{seg.channel}.{seg.stream_kind}.raw.csv",
                              overwrite=True)
        write_manifest_csv(cycles, out / "labels.csv")
        with open(out / "bounds.csv", "w", encoding="utf-8") as fh:
            fh.write("cycle_id,start_us,end_us\n")
            for c in cycles:
                fh.write(f"{c.cycle_id},{c.config.start_us},{cycle_end_us(c)}\n")
    return cycles


def cycle_end_us(c: LabeledCycle) -> int:
    total = sum(p.duration_s for p in phase_schedule(c.profile, c.fault, c.config))
    return c.config.start_us + int(round(total * 1e6))
