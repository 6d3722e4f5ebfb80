"""Static analysis over model graphs: parameters, memory, and FLOPs.

Everything here is a pure function of an immutable ModelGraph, computed
exactly in integer arithmetic where possible.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError
from .model_ir import DTYPE_BYTES, ModelGraph, NodeSpec, topological_order


@dataclass(frozen=True)
class OptimizerSpec:
    """Optimizer state accounting: how many extra per-parameter tensors exist.

    Adam keeps two state slots (first and second moment), stored in float32
    by default regardless of parameter dtype; pass state_dtype to override.
    """

    kind: str
    state_slots: int
    state_dtype: str = "float32"

    def __post_init__(self):
        if self.kind not in ("none", "adam"):
            raise ValidationError(f"unknown optimizer kind {self.kind!r}")
        if (self.state_slots == 0) != (self.kind == "none"):
            raise ValidationError(
                f"state_slots ({self.state_slots}) inconsistent with kind {self.kind!r}")

    @classmethod
    def none(cls) -> "OptimizerSpec":
        return cls("none", 0)

    @classmethod
    def adam(cls, state_dtype: str = "float32") -> "OptimizerSpec":
        return cls("adam", 2, state_dtype)


@dataclass(frozen=True)
class MemoryBreakdown:
    param_bytes: int
    grad_bytes: int
    optimizer_bytes: int
    activation_bytes: int
    total_bytes: int

    @classmethod
    def build(cls, param_bytes: int, grad_bytes: int, optimizer_bytes: int,
              activation_bytes: int) -> "MemoryBreakdown":
        parts = (param_bytes, grad_bytes, optimizer_bytes, activation_bytes)
        if any(p < 0 for p in parts):
            raise ValidationError(f"memory components must be >= 0, got {parts}")
        return cls(*parts, total_bytes=sum(parts))

    def to_json(self) -> dict:
        return {
            "param_bytes": self.param_bytes,
            "grad_bytes": self.grad_bytes,
            "optimizer_bytes": self.optimizer_bytes,
            "activation_bytes": self.activation_bytes,
            "total_bytes": self.total_bytes,
        }


def param_count(g: ModelGraph) -> int:
    """Total parameter count: sum of extent products over all param tensors."""
    total = 0
    for node in g.nodes.values():
        for _, shape in node.param_tensors:
            total += shape.num_elements
    return total


def memory_bytes(params: int, dtype: str = "float32",
                 opt: OptimizerSpec | None = None,
                 grads: bool = False) -> MemoryBreakdown:
    """Resident bytes for a parameter count (activations not included here).

    Gradients, when materialized, are assumed to use the parameter dtype.
    """
    if params < 0:
        raise ValidationError(f"params must be >= 0, got {params}")
    opt = opt or OptimizerSpec.none()
    width = DTYPE_BYTES[dtype]
    param_b = int(params) * width
    grad_b = int(params) * width if grads else 0
    opt_b = int(params) * opt.state_slots * DTYPE_BYTES[opt.state_dtype]
    return MemoryBreakdown.build(param_b, grad_b, opt_b, 0)


def bytes_per_param(dtype: str = "float32", opt: OptimizerSpec | None = None,
                    grads: bool = True) -> int:
    """Bytes of resident state per parameter (param + grad + optimizer slots)."""
    return memory_bytes(1, dtype, opt, grads).total_bytes


def activation_bytes(g: ModelGraph, remat: str = "none") -> int:
    """Live activation bytes for one step.

    remat="none" counts every edge. remat="per_block" keeps only edges that
    cross block boundaries (nodes sharing a block_index attr form one block;
    unannotated nodes are their own block) plus the largest single block's
    internal footprint, which is what per-block rematerialization retains.
    """
    if remat not in ("none", "per_block"):
        raise ValidationError(f"unknown remat mode {remat!r}")
    if remat == "none":
        return sum(e.shape.num_bytes for e in g.edges)

    def block_of(node: NodeSpec):
        return node.attrs.get("block_index", node.id)

    boundary = 0
    internal: dict[object, int] = {}
    for e in g.edges:
        b_src = block_of(g.nodes[e.src])
        b_dst = block_of(g.nodes[e.dst])
        if b_src == b_dst:
            internal[b_src] = internal.get(b_src, 0) + e.shape.num_bytes
        else:
            boundary += e.shape.num_bytes
    return boundary + (max(internal.values()) if internal else 0)


def node_forward_flops(g: ModelGraph, node_id: str) -> int:
    """Forward FLOPs of one node.

    Each 2-D parameter counts as a matmul: 2 * (tokens) * d_in * d_out, where
    tokens is the product of the activation's non-feature axes. Embedding
    lookups are costed as the equivalent one-hot matmul so the total stays
    comparable to the 6*N*tokens closed form. Attention-bearing kinds add the
    score and value matmuls, 4 * tokens * seq * hidden forward.
    """
    node = g.nodes[node_id]
    in_e = g.in_edges(node_id)
    out_e = g.out_edges(node_id)
    ref = in_e[0].shape if in_e else (out_e[0].shape if out_e else None)
    if ref is None:
        return 0
    tokens = 1
    for d in ref.dims[:-1]:
        tokens *= d

    flops = 0
    for _, shape in node.param_tensors:
        if shape.rank == 2:
            flops += 2 * tokens * shape.dims[0] * shape.dims[1]
    if node.kind in ("transformer_block", "attention") and ref.rank >= 2:
        seq, hidden = ref.dims[-2], ref.dims[-1]
        flops += 4 * tokens * seq * hidden
    return flops


def forward_flops(g: ModelGraph) -> int:
    return sum(node_forward_flops(g, nid) for nid in g.nodes)


def flops_per_step(g: ModelGraph) -> int:
    """Training-step FLOPs: forward plus backward, with backward = 2x forward."""
    fwd = forward_flops(g)
    return fwd + 2 * fwd


def per_block_params(g: ModelGraph) -> int:
    """Parameters of one transformer block (block homogeneity assumed)."""
    for nid in topological_order(g):
        node = g.nodes[nid]
        if node.kind == "transformer_block":
            return sum(s.num_elements for _, s in node.param_tensors)
    return 0
