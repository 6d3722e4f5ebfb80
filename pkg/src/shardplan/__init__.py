"""shardplan: planner and per-device schedule simulator for distributed
transformer training.

Model DAGs with shaped edges, logical-mesh sharding with propagation,
analytic compute/collective cost models, GPipe and tensor-parallel step
simulation, and capacity/checkpoint planning.
"""

__version__ = "0.1.0"

from .analysis import (MemoryBreakdown, OptimizerSpec, activation_bytes,
                       flops_per_step, memory_bytes, param_count)
from .errors import ConfigError, InfeasibleError, ShardPlanError, ValidationError
from .hw_cost import (CostEstimate, HardwareProfile, allreduce_time, collective_time,
                      infer_comm_fraction, load_profile, matmul_time)
from .mesh import (Collective, LogicalMesh, PartitionSpec, ShardingAssignment,
                   propagate, shard_shape, validate_tensor_parallel)
from .model_ir import (Edge, ModelGraph, NodeSpec, TensorShape, TransformerConfig,
                       build_byol, build_decoder_only, build_moe, topological_order)
from .planner import (CapacityResult, CheckpointPlan, checkpoint_interval,
                      compare_parallelism, max_layers)
from .simulator import (StageAssignment, Timeline, TimelineEvent, balance_stages,
                        simulate_combined, simulate_pipeline, simulate_tensor_parallel)

__all__ = [
    "__version__",
    "MemoryBreakdown", "OptimizerSpec", "activation_bytes", "flops_per_step",
    "memory_bytes", "param_count",
    "ConfigError", "InfeasibleError", "ShardPlanError", "ValidationError",
    "CostEstimate", "HardwareProfile", "allreduce_time", "collective_time",
    "infer_comm_fraction", "load_profile", "matmul_time",
    "Collective", "LogicalMesh", "PartitionSpec", "ShardingAssignment",
    "propagate", "shard_shape", "validate_tensor_parallel",
    "Edge", "ModelGraph", "NodeSpec", "TensorShape", "TransformerConfig",
    "build_byol", "build_decoder_only", "build_moe", "topological_order",
    "CapacityResult", "CheckpointPlan", "checkpoint_interval",
    "compare_parallelism", "max_layers",
    "StageAssignment", "Timeline", "TimelineEvent", "balance_stages",
    "simulate_combined", "simulate_pipeline", "simulate_tensor_parallel",
]
