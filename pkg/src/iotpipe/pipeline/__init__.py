"""Worker framework: staged pipelines over broker queues."""

from .manager import PipelineManager
from .node import NodeAgent, NodeAgentServer, RemoteNodeAgent, SubprocessWorker
from .registry import is_known, make_handler, register_handler
from .spec import (
    AtMaxWorkers,
    BrokenChain,
    DuplicateStage,
    MachineDescriptor,
    MachineUnavailable,
    PipelineError,
    PipelineSpec,
    StageSpec,
    UnknownHandler,
    UnknownStage,
    UnknownWorker,
    WorkerDescriptor,
    smart_pdm_spec,
)
from .worker import MAX_ATTEMPTS, StageWorker
