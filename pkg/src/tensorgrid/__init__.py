"""tensorgrid: a desk-scale sharded in-memory tensor store that executes
stored scripts and mini neural networks on demand, plus the launcher and
benchmark tooling around it."""

from .client import Client, connect
from .engine import (
    Affine,
    Dense,
    ModelSpec,
    ReLU,
    ScriptSpec,
    Step,
    Tanh,
    dump_model,
    dump_script,
    load_model,
    parse_script,
    run_model_exec,
    run_script_exec,
)
from .launcher import (
    BatchSettings,
    Ensemble,
    Experiment,
    ModelHandle,
    Orchestrator,
    RunSettings,
    launch_orchestrator,
)
from .routing import ClusterTopology, ShardInfo, crc16, key_slot, plan_topology, slot_owner
from .tensors import (
    Dataset,
    DType,
    MetaField,
    MetaKind,
    Tensor,
    dataset_add_tensor,
    deserialize_dataset,
    deserialize_tensor,
    make_tensor,
    serialize_dataset,
    serialize_tensor,
    tensor_from_array,
)

__version__ = "0.1.0"

__all__ = [
    "Affine",
    "BatchSettings",
    "Client",
    "ClusterTopology",
    "Dataset",
    "Dense",
    "DType",
    "Ensemble",
    "Experiment",
    "MetaField",
    "MetaKind",
    "ModelHandle",
    "ModelSpec",
    "Orchestrator",
    "ReLU",
    "RunSettings",
    "ScriptSpec",
    "ShardInfo",
    "Step",
    "Tanh",
    "Tensor",
    "connect",
    "crc16",
    "dataset_add_tensor",
    "deserialize_dataset",
    "deserialize_tensor",
    "dump_model",
    "dump_script",
    "key_slot",
    "launch_orchestrator",
    "load_model",
    "make_tensor",
    "parse_script",
    "plan_topology",
    "run_model_exec",
    "run_script_exec",
    "serialize_dataset",
    "serialize_tensor",
    "slot_owner",
    "tensor_from_array",
]
