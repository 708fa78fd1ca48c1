"""Deterministic appliance-cycle simulator with fault injection."""

from .dataset import LABELS, LabeledCycle, make_dataset, plan_dataset, read_manifest_csv, write_manifest_csv
from .generator import (
    BEARING_HZ,
    WASHING_MACHINE,
    ApplianceProfile,
    CycleSignals,
    FaultMode,
    Phase,
    SimConfig,
    generate_cycle,
    phase_schedule,
)
from .prng import XorShiftRng, derive_seed
from .publisher import MqttPublisher, PublishError, cycle_batches, post_notification, publish_cycle

__all__ = [
    "BEARING_HZ",
    "LABELS",
    "WASHING_MACHINE",
    "ApplianceProfile",
    "CycleSignals",
    "FaultMode",
    "LabeledCycle",
    "MqttPublisher",
    "Phase",
    "PublishError",
    "SimConfig",
    "XorShiftRng",
    "cycle_batches",
    "derive_seed",
    "generate_cycle",
    "make_dataset",
    "phase_schedule",
    "plan_dataset",
    "post_notification",
    "publish_cycle",
    "read_manifest_csv",
    "write_manifest_csv",
]
