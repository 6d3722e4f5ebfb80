"""Logical device meshes, partition specs, and sharding propagation.

The propagation rules are a deterministic, documented approximation of what
an SPMD partitioner infers:

  * elementwise ops (layernorm, loss, routing) preserve their input spec;
  * shape-changing ops transfer a spec per axis only when the extent is
    preserved, otherwise the affected axis becomes replicated;
  * matmuls inherit batch-axis specs from the input and the feature-axis
    spec from the weight; a sharded contraction dimension yields partial
    sums and therefore an all_reduce whose payload is the output shard;
  * when two inferred specs collide on one tensor, the spec that shards
    more bytes wins (ties broken by topological order) and an all_gather is
    recorded for the loser.

"Optimal" interior sharding is approximated greedily as minimum collective
payload under these rules; it makes no global optimality claim.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .errors import ValidationError
from .model_ir import ModelGraph, NodeSpec, TensorShape, TransformerConfig, topological_order


class DivisibilityError(ValidationError):
    def __init__(self, axis: int, extent: int, divisor: int):
        self.axis, self.extent, self.divisor = axis, extent, divisor
        super().__init__(
            f"tensor axis {axis} with extent {extent} is not divisible by mesh factor {divisor}")


class HeadDivisibilityError(ValidationError):
    def __init__(self, heads: int, tp: int):
        self.heads, self.tp = heads, tp
        super().__init__(
            f"attention head count ({heads}) must be divisible by the order of tensor parallelism ({tp})")


class SpecConflictError(ValidationError):
    def __init__(self, tensor: str, spec_a: "PartitionSpec", spec_b: "PartitionSpec"):
        self.tensor, self.spec_a, self.spec_b = tensor, spec_a, spec_b
        super().__init__(
            f"conflicting hard sharding constraints on {tensor}: {spec_a.to_string()} vs {spec_b.to_string()}")


@dataclass(frozen=True)
class LogicalMesh:
    """An n-dimensional array of devices with named axes."""

    axes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple((str(n), int(s)) for n, s in self.axes))
        names = [n for n, _ in self.axes]
        if len(set(names)) != len(names):
            raise ValidationError(f"mesh axis names must be unique, got {names}")
        if any(s < 1 for _, s in self.axes):
            raise ValidationError(f"mesh axis sizes must be >= 1, got {self.axes}")

    @property
    def device_count(self) -> int:
        return math.prod(s for _, s in self.axes)

    @property
    def axis_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.axes)

    def axis_size(self, name: str) -> int:
        for n, s in self.axes:
            if n == name:
                return s
        raise KeyError(f"mesh has no axis {name!r} (axes: {self.axis_names})")

    def coords(self, device_index: int) -> tuple[int, ...]:
        """Row-major device index -> coordinate tuple."""
        if not 0 <= device_index < self.device_count:
            raise ValidationError(f"device index {device_index} out of range [0, {self.device_count})")
        out = []
        rem = device_index
        for _, size in reversed(self.axes):
            out.append(rem % size)
            rem //= size
        return tuple(reversed(out))

    def index(self, coords: tuple[int, ...]) -> int:
        if len(coords) != len(self.axes):
            raise ValidationError(f"expected {len(self.axes)} coordinates, got {coords}")
        idx = 0
        for (name, size), c in zip(self.axes, coords):
            if not 0 <= c < size:
                raise ValidationError(f"coordinate {c} out of range for axis {name!r} (size {size})")
            idx = idx * size + c
        return idx


_SPEC_ENTRY = re.compile(r"^axis(\d+)=(.+)$")


@dataclass(frozen=True)
class PartitionSpec:
    """Per-tensor-axis assignment of mesh axes; an empty entry means replicated.

    A mesh axis may appear at most once across the whole spec.
    """

    assignments: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "assignments", tuple(tuple(a) for a in self.assignments))
        used = [a for axes in self.assignments for a in axes]
        if len(set(used)) != len(used):
            raise ValidationError(
                f"each mesh axis may appear at most once in a partition spec, got {self.to_string()}")

    @classmethod
    def replicated(cls, rank: int) -> "PartitionSpec":
        return cls(((),) * rank)

    @property
    def rank(self) -> int:
        return len(self.assignments)

    @property
    def mesh_axes_used(self) -> tuple[str, ...]:
        return tuple(a for axes in self.assignments for a in axes)

    def validate_against(self, mesh: LogicalMesh) -> None:
        for name in self.mesh_axes_used:
            if name not in mesh.axis_names:
                raise ValidationError(
                    f"partition spec references unknown mesh axis {name!r} (mesh axes: {mesh.axis_names})")

    def axis_factor(self, tensor_axis: int, mesh: LogicalMesh) -> int:
        return math.prod(mesh.axis_size(a) for a in self.assignments[tensor_axis])

    def total_factor(self, mesh: LogicalMesh) -> int:
        return math.prod(mesh.axis_size(a) for a in self.mesh_axes_used)

    def normalized(self, mesh: LogicalMesh) -> "PartitionSpec":
        """Drop mesh axes of size 1: sharding over them is replication."""
        self.validate_against(mesh)
        return PartitionSpec(tuple(
            tuple(a for a in axes if mesh.axis_size(a) > 1) for axes in self.assignments))

    def sharded_bytes(self, shape: TensorShape, mesh: LogicalMesh) -> int:
        """Bytes this spec removes from each device relative to replication."""
        factor = self.total_factor(mesh)
        return shape.num_bytes - shape.num_bytes // factor

    def to_string(self) -> str:
        parts = []
        for i, axes in enumerate(self.assignments):
            parts.append(f"axis{i}=" + ("+".join(axes) if axes else "~"))
        return "P(" + ", ".join(parts) + ")"

    @classmethod
    def parse(cls, text: str) -> "PartitionSpec":
        text = text.strip()
        if not (text.startswith("P(") and text.endswith(")")):
            raise ValidationError(f"partition spec must look like 'P(...)', got {text!r}")
        body = text[2:-1].strip()
        if not body:
            return cls(())
        assignments = []
        for i, entry in enumerate(p.strip() for p in body.split(",")):
            m = _SPEC_ENTRY.match(entry)
            if not m or int(m.group(1)) != i:
                raise ValidationError(f"malformed partition spec entry {entry!r} at position {i}")
            names = m.group(2).strip()
            assignments.append(() if names == "~" else tuple(n.strip() for n in names.split("+")))
        return cls(tuple(assignments))


def shard_shape(shape: TensorShape, spec: PartitionSpec, mesh: LogicalMesh) -> TensorShape:
    """Per-device shard shape: each extent divided by its mesh-axis product."""
    spec.validate_against(mesh)
    if spec.rank != shape.rank:
        raise ValidationError(
            f"spec rank {spec.rank} does not match tensor rank {shape.rank}")
    dims = []
    for i, extent in enumerate(shape.dims):
        factor = spec.axis_factor(i, mesh)
        if extent % factor != 0:
            raise DivisibilityError(i, extent, factor)
        dims.append(extent // factor)
    return TensorShape(tuple(dims), shape.dtype, shape.axis_names)


def unshard_shape(shape: TensorShape, spec: PartitionSpec, mesh: LogicalMesh) -> TensorShape:
    """Inverse of shard_shape: multiply shard extents back up."""
    dims = tuple(d * spec.axis_factor(i, mesh) for i, d in enumerate(shape.dims))
    return TensorShape(dims, shape.dtype, shape.axis_names)


def validate_tensor_parallel(cfg: TransformerConfig, tp: int) -> None:
    """Heads must be divisible by the order of tensor parallelism."""
    if tp < 1:
        raise ValidationError(f"tensor parallelism order must be >= 1, got {tp}")
    if cfg.heads % tp != 0:
        raise HeadDivisibilityError(cfg.heads, tp)


@dataclass(frozen=True)
class Collective:
    site: str                 # node id, or "src->dst" for an edge site
    kind: str                 # all_reduce | all_gather | reduce_scatter | all_to_all
    direction: str            # forward | backward
    payload_bytes: int
    axes: tuple[str, ...]

    def to_json(self) -> dict:
        return {"site": self.site, "kind": self.kind, "direction": self.direction,
                "payload_bytes": self.payload_bytes, "axes": list(self.axes)}


EdgeKey = tuple[str, str]
ParamKey = tuple[str, str]


@dataclass
class ShardingAssignment:
    """Total map from every activation edge and parameter to a PartitionSpec,
    plus the collectives the assignment requires."""

    mesh: LogicalMesh
    edge_specs: dict[EdgeKey, PartitionSpec]
    param_specs: dict[ParamKey, PartitionSpec]
    collectives: list[Collective] = field(default_factory=list)

    def spec_for_edge(self, src: str, dst: str) -> PartitionSpec:
        return self.edge_specs[(src, dst)]

    def collectives_at(self, site: str, direction: str) -> list[Collective]:
        return [c for c in self.collectives if c.site == site and c.direction == direction]

    def as_constraints(self) -> dict:
        """Interior specs in the form accepted by propagate(constraints=...)."""
        out: dict = {}
        for (src, dst), spec in self.edge_specs.items():
            out[("edge", src, dst)] = spec
        for (node, name), spec in self.param_specs.items():
            out[("param", node, name)] = spec
        return out

    def to_json(self) -> dict:
        return {
            "edges": [
                {"src": s, "dst": d, "spec": spec.to_string()}
                for (s, d), spec in sorted(self.edge_specs.items())
            ],
            "params": [
                {"node": n, "name": p, "spec": spec.to_string()}
                for (n, p), spec in sorted(self.param_specs.items())
            ],
            "collectives": [c.to_json() for c in self.collectives],
        }


_PRESERVE_KINDS = {"layernorm", "loss", "moe_router", "mlp"}
_OPAQUE_KINDS = {"encoder", "ema_target"}


def _transfer_spec(in_shape: TensorShape, in_spec: PartitionSpec, out_shape: TensorShape) -> PartitionSpec:
    # Reshape rule: keep a sharded axis only where the extent is preserved.
    assignments = []
    for i in range(out_shape.rank):
        if i < in_shape.rank and in_shape.dims[i] == out_shape.dims[i]:
            assignments.append(in_spec.assignments[i])
        else:
            assignments.append(())
    return PartitionSpec(tuple(assignments))


def _shard_bytes(shape: TensorShape, spec: PartitionSpec, mesh: LogicalMesh) -> int:
    # Ceil division: internal tensors may be padded, edges are checked strictly
    # in the final validation pass.
    elems = 1
    for i, d in enumerate(shape.dims):
        elems *= -(-d // spec.axis_factor(i, mesh))
    from .model_ir import DTYPE_BYTES
    return elems * DTYPE_BYTES[shape.dtype]


class _Propagator:
    def __init__(self, g: ModelGraph, mesh: LogicalMesh,
                 io_specs: dict[str, PartitionSpec],
                 constraints: dict | None):
        self.g = g
        self.mesh = mesh
        self.order = topological_order(g)
        self.topo_pos = {nid: i for i, nid in enumerate(self.order)}
        self.edge_shapes = {(e.src, e.dst): e.shape for e in g.edges}

        self.hard: dict[EdgeKey, PartitionSpec] = {}
        self.param_specs: dict[ParamKey, PartitionSpec] = {}
        self._load_inputs(io_specs or {}, constraints or {})
        self.specs: dict[EdgeKey, PartitionSpec] = dict(self.hard)
        self.collectives: list[Collective] = []
        self.record = False

    def _load_inputs(self, io_specs, constraints):
        for key, spec in constraints.items():
            if key[0] == "edge":
                _, src, dst = key
                if (src, dst) not in self.edge_shapes:
                    raise ValidationError(f"constraint references unknown edge {src!r}->{dst!r}")
                self.hard[(src, dst)] = spec.normalized(self.mesh)
            elif key[0] == "param":
                _, node, name = key
                if node not in self.g.nodes:
                    raise ValidationError(f"constraint references unknown node {node!r}")
                self.g.nodes[node].param(name)  # raises KeyError if absent
                self.param_specs[(node, name)] = spec.normalized(self.mesh)
            else:
                raise ValidationError(f"unknown constraint key {key!r}")

        for nid, spec in io_specs.items():
            if nid not in self.g.nodes:
                raise ValidationError(f"io spec references unknown node {nid!r}")
            spec = spec.normalized(self.mesh)
            # An input node pins its produced activations, an output node the
            # activations it consumes.
            edges = self.g.out_edges(nid) if nid in self.g.inputs else self.g.in_edges(nid)
            for e in edges:
                key = (e.src, e.dst)
                if key in self.hard and self.hard[key] != spec:
                    raise SpecConflictError(f"edge {e.src}->{e.dst}", self.hard[key], spec)
                self.hard[key] = spec

        for nid, node in self.g.nodes.items():
            for pname, pshape in node.param_tensors:
                key = (nid, pname)
                if key not in self.param_specs:
                    self.param_specs[key] = PartitionSpec.replicated(pshape.rank)
                elif self.param_specs[key].rank != pshape.rank:
                    raise ValidationError(
                        f"param constraint rank mismatch on {nid}.{pname}: "
                        f"{self.param_specs[key].to_string()} for rank {pshape.rank}")

    def run(self) -> ShardingAssignment:
        for _ in range(len(self.g.nodes) + 2):
            if not self._sweep():
                break
        # Everything still unknown is replicated; then one recording sweep
        # emits the collectives implied by the final specs.
        for key, shape in self.edge_shapes.items():
            self.specs.setdefault(key, PartitionSpec.replicated(shape.rank))
        self.record = True
        self._sweep()
        self._validate_final()
        return ShardingAssignment(self.mesh, dict(self.specs), dict(self.param_specs),
                                  list(self.collectives))

    def _sweep(self) -> bool:
        changed = False
        for nid in self.order:
            changed |= self._apply_node(nid)
        for nid in reversed(self.order):
            changed |= self._back_infer(nid)
        return changed

    # -- spec bookkeeping ---------------------------------------------------

    def _propose(self, key: EdgeKey, spec: PartitionSpec) -> bool:
        """Set an edge spec, resolving collisions per the byte-greedy rule."""
        spec = spec.normalized(self.mesh)
        current = self.specs.get(key)
        if current is None:
            self.specs[key] = spec
            return True
        if current == spec:
            return False
        return self._resolve(key, current, spec, hard_winner=key in self.hard)

    def _resolve(self, key: EdgeKey, spec_a: PartitionSpec, spec_b: PartitionSpec,
                 hard_winner: bool) -> bool:
        shape = self.edge_shapes[key]
        if hard_winner:
            winner, loser = self.hard[key], spec_b
            if winner == loser:
                return False
        else:
            a_bytes = spec_a.sharded_bytes(shape, self.mesh)
            b_bytes = spec_b.sharded_bytes(shape, self.mesh)
            # Tie: the earlier proposal (spec_a, set by an earlier site in
            # topological order) wins.
            winner, loser = (spec_a, spec_b) if a_bytes >= b_bytes else (spec_b, spec_a)
        if self.record:
            gathered = set(loser.mesh_axes_used) - set(winner.mesh_axes_used)
            if gathered:
                self.collectives.append(Collective(
                    site=f"{key[0]}->{key[1]}", kind="all_gather", direction="forward",
                    payload_bytes=_shard_bytes(shape, winner, self.mesh),
                    axes=tuple(sorted(gathered))))
        changed = self.specs.get(key) != winner
        self.specs[key] = winner
        return changed

    def _in_spec(self, nid: str) -> tuple[TensorShape, PartitionSpec] | None:
        """Reference input (shape, spec) for a node: first assigned in-edge
        in topological order of the producing nodes."""
        in_edges = sorted(self.g.in_edges(nid), key=lambda e: (self.topo_pos[e.src], e.src))
        for e in in_edges:
            spec = self.specs.get((e.src, e.dst))
            if spec is not None:
                return e.shape, spec
        return None

    def _emit(self, site: str, kind: str, direction: str, payload: int,
              axes: tuple[str, ...]):
        if self.record and axes and payload > 0:
            self.collectives.append(Collective(site, kind, direction, payload, tuple(axes)))

    # -- rule table ----------------------------------------------------------

    def _apply_node(self, nid: str) -> bool:
        node = self.g.nodes[nid]
        out_edges = self.g.out_edges(nid)
        if not out_edges:
            return False
        ref = self._in_spec(nid)

        if node.kind == "embedding":
            out_spec = self._embedding_spec(node, out_edges[0].shape)
        elif node.kind in _PRESERVE_KINDS or (node.kind == "generic" and not node.param_tensors):
            if ref is None:
                return False
            return self._assign_outputs(
                {(e.src, e.dst): _transfer_spec(ref[0], ref[1], e.shape) for e in out_edges})
        elif node.kind in _OPAQUE_KINDS:
            if ref is None:
                out_spec = PartitionSpec.replicated(out_edges[0].shape.rank)
            else:
                out_spec = _transfer_spec(ref[0], ref[1], out_edges[0].shape)
        elif node.kind in ("transformer_block", "attention"):
            if ref is None:
                return False
            out_spec = self._block_spec(node, ref)
        else:  # matmul-chain kinds: unembedding, projector, predictor, expert, mlp, generic
            if ref is None:
                return False
            out_spec = self._matmul_chain_spec(node, ref, out_edges[0].shape)

        return self._assign_outputs({(e.src, e.dst): out_spec for e in out_edges})

    def _assign_outputs(self, out_spec_by_edge: dict[EdgeKey, PartitionSpec]) -> bool:
        changed = False
        for key, spec in out_spec_by_edge.items():
            changed |= self._propose(key, spec)
        return changed

    def _back_infer(self, nid: str) -> bool:
        """Fill unassigned in-edges from assigned out-edges (extent transfer)."""
        node = self.g.nodes[nid]
        if node.kind not in _PRESERVE_KINDS and node.kind != "generic":
            return False
        out_specs = [(e.shape, self.specs.get((e.src, e.dst))) for e in self.g.out_edges(nid)]
        out_specs = [(s, sp) for s, sp in out_specs if sp is not None]
        if not out_specs:
            return False
        changed = False
        for e in self.g.in_edges(nid):
            key = (e.src, e.dst)
            if key not in self.specs:
                o_shape, o_spec = out_specs[0]
                self.specs[key] = _transfer_spec(o_shape, o_spec, e.shape).normalized(self.mesh)
                changed = True
        return changed

    def _embedding_spec(self, node: NodeSpec, out_shape: TensorShape) -> PartitionSpec:
        # Lookup: batch axes replicated unless pinned by an io spec; the
        # feature axis follows the table's output-axis sharding.
        table = node.param_tensors[0][1] if node.param_tensors else None
        feature: tuple[str, ...] = ()
        if table is not None and table.rank == 2:
            feature = self.param_specs[(node.id, node.param_tensors[0][0])].assignments[1]
        assignments = [()] * (out_shape.rank - 1) + [feature]
        return PartitionSpec(tuple(assignments))

    def _matmul(self, site: str, in_shape: TensorShape, in_spec: PartitionSpec,
                w_spec: PartitionSpec, d_out: int) -> tuple[TensorShape, PartitionSpec]:
        """Apply one matmul over the last activation axis, recording the
        forward all_reduce (sharded contraction) and the backward all_reduce
        (sharded output features) it implies."""
        contraction = in_spec.assignments[-1] + tuple(
            a for a in w_spec.assignments[0] if a not in in_spec.assignments[-1])
        batch = in_spec.assignments[:-1]
        used = {a for axes in batch for a in axes}
        out_feature = tuple(a for a in w_spec.assignments[1] if a not in used)
        out_shape = TensorShape(in_shape.dims[:-1] + (d_out,), in_shape.dtype)
        out_spec = PartitionSpec(batch + (out_feature,))

        c_factor = math.prod(self.mesh.axis_size(a) for a in contraction)
        if c_factor > 1:
            self._emit(site, "all_reduce", "forward",
                       _shard_bytes(out_shape, out_spec, self.mesh), contraction)
        f_factor = math.prod(self.mesh.axis_size(a) for a in out_feature)
        if f_factor > 1:
            self._emit(site, "all_reduce", "backward",
                       _shard_bytes(in_shape, in_spec, self.mesh), out_feature)
        return out_shape, out_spec

    def _block_spec(self, node: NodeSpec, ref: tuple[TensorShape, PartitionSpec]) -> PartitionSpec:
        """Transformer block / attention internals: ln -> qkv -> heads ->
        out_proj [-> ln -> mlp_in -> mlp_out], with residual joins."""
        in_shape, in_spec = ref
        nid = node.id
        h = in_shape.dims[-1]

        def pspec(name: str) -> PartitionSpec | None:
            key = (nid, name)
            return self.param_specs.get(key)

        qkv = pspec("qkv")
        q_shape, q_spec = self._matmul(nid, in_shape, in_spec, qkv, 3 * h) if qkv else (in_shape, in_spec)

        # Head-sharded attention: sharding the projected feature axis splits
        # heads, which is only well formed when tp divides the head count.
        t = math.prod(self.mesh.axis_size(a) for a in q_spec.assignments[-1])
        if t > 1:
            heads = int(node.attrs.get("heads", 0))
            if heads % t != 0:
                raise HeadDivisibilityError(heads, t)

        out_w = pspec("out_proj")
        if out_w:
            attn_in = TensorShape(in_shape.dims[:-1] + (q_shape.dims[-1],), in_shape.dtype)
            _, x_spec = self._matmul(nid, attn_in, q_spec, out_w, h)
        else:
            x_spec = q_spec
        x_spec = self._join(nid, in_shape, in_spec, x_spec)  # residual

        if pspec("mlp_in") and pspec("mlp_out"):
            f = node.param("mlp_in").dims[1]
            m_shape, m_spec = self._matmul(nid, in_shape, x_spec, pspec("mlp_in"), f)
            _, y_spec = self._matmul(nid, m_shape, m_spec, pspec("mlp_out"), h)
            x_spec = self._join(nid, in_shape, x_spec, y_spec)  # residual
        return x_spec

    def _matmul_chain_spec(self, node: NodeSpec, ref: tuple[TensorShape, PartitionSpec],
                           out_shape: TensorShape) -> PartitionSpec:
        shape, spec = ref
        for pname, pshape in node.param_tensors:
            if pshape.rank == 2 and pshape.dims[0] == shape.dims[-1]:
                shape, spec = self._matmul(
                    node.id, shape, spec, self.param_specs[(node.id, pname)], pshape.dims[1])
        if shape.dims == out_shape.dims:
            return spec
        return _transfer_spec(shape, spec, out_shape)

    def _join(self, site: str, shape: TensorShape, spec_a: PartitionSpec,
              spec_b: PartitionSpec) -> PartitionSpec:
        if spec_a == spec_b:
            return spec_a
        a_bytes = spec_a.sharded_bytes(shape, self.mesh)
        b_bytes = spec_b.sharded_bytes(shape, self.mesh)
        winner, loser = (spec_a, spec_b) if a_bytes >= b_bytes else (spec_b, spec_a)
        gathered = set(loser.mesh_axes_used) - set(winner.mesh_axes_used)
        if gathered:
            self._emit(site, "all_gather", "forward",
                       _shard_bytes(shape, winner, self.mesh), tuple(sorted(gathered)))
        return winner

    def _validate_final(self):
        for (src, dst), spec in self.specs.items():
            shard_shape(self.edge_shapes[(src, dst)], spec, self.mesh)
        for (nid, pname), spec in self.param_specs.items():
            shard_shape(self.g.nodes[nid].param(pname), spec, self.mesh)


def propagate(g: ModelGraph, mesh: LogicalMesh,
              io_specs: dict[str, PartitionSpec] | None = None,
              constraints: dict | None = None) -> ShardingAssignment:
    """Infer a total sharding assignment from input/output specs and optional
    interior constraints.

    io_specs maps graph input/output node ids to the spec of the activation
    they produce/consume. constraints maps ("edge", src, dst) or
    ("param", node, name) keys to hard PartitionSpecs. Returns an assignment
    covering every edge and parameter, with the forward and backward
    collectives the assignment requires.
    """
    for spec in (io_specs or {}).values():
        spec.validate_against(mesh)
    for spec in (constraints or {}).values():
        spec.validate_against(mesh)
    return _Propagator(g, mesh, io_specs or {}, constraints).run()


def megatron_block_constraints(g: ModelGraph, mesh: LogicalMesh,
                               model_axis: str = "model") -> dict:
    """Column/row-parallel parameter constraints for transformer graphs:
    QKV and MLP-in shard their output features, the following projection
    shards its input features, so each block needs one all_reduce after
    attention and one after the MLP, per direction.

    Parameters whose sharded dimension does not divide by the model-axis
    size stay replicated (e.g. a 32000 vocab on a 512-way mesh).
    """
    tp = mesh.axis_size(model_axis)
    col = PartitionSpec(((), (model_axis,)))
    row = PartitionSpec(((model_axis,), ()))
    col_bias = PartitionSpec(((model_axis,),))

    constraints: dict = {}

    def add(nid: str, pname: str, spec: PartitionSpec, sharded_dim: int):
        if sharded_dim % tp == 0:
            constraints[("param", nid, pname)] = spec

    for nid, node in g.nodes.items():
        params = dict(node.param_tensors)
        if node.kind in ("transformer_block", "attention") and "qkv" in params:
            add(nid, "qkv", col, params["qkv"].dims[1])
            add(nid, "out_proj", row, params["out_proj"].dims[0])
            if "qkv_bias" in params:
                add(nid, "qkv_bias", col_bias, params["qkv_bias"].dims[0])
        if node.kind in ("transformer_block", "expert", "mlp") and "mlp_in" in params:
            add(nid, "mlp_in", col, params["mlp_in"].dims[1])
            add(nid, "mlp_out", row, params["mlp_out"].dims[0])
            if "mlp_in_bias" in params:
                add(nid, "mlp_in_bias", col_bias, params["mlp_in_bias"].dims[0])
        if node.kind == "unembedding" and "proj" in params:
            add(nid, "proj", col, params["proj"].dims[1])
            if "bias" in params:
                add(nid, "bias", col_bias, params["bias"].dims[0])
    return constraints


def data_parallel_io_specs(g: ModelGraph, data_axis: str | None) -> dict[str, PartitionSpec]:
    """Batch-axis io specs for every graph input (replicated when no axis)."""
    specs = {}
    for nid in g.inputs:
        edges = g.out_edges(nid)
        if not edges:
            continue
        rank = edges[0].shape.rank
        if data_axis:
            specs[nid] = PartitionSpec(((data_axis,),) + ((),) * (rank - 1))
        else:
            specs[nid] = PartitionSpec.replicated(rank)
    return specs
