"""Utilisation probes, the elasticity controller and error alerting."""

from .alerts import ALERT_QUEUE, SEVERITIES, AlertRecord, ErrorLog, severity_rank
from .controller import ElasticityController, ManagerActuator
from .elasticity import (
    ACTIONS,
    REASONS,
    ApplyResult,
    ControllerState,
    ElasticityConfig,
    ScalingDecision,
    ScalingHistory,
    apply,
    decide,
    fresh_reports,
)
from .probes import MONITOR_QUEUE, MachineProbe, UtilizationReport
from .simulation import SimCluster, SimResult, simulate_burst
