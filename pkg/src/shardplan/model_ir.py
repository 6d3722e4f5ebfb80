"""DAG model descriptions: shaped tensors, parameterized nodes, and builders.

A model is a directed acyclic graph whose nodes are parameterized functions
(typically "layers") and whose edges carry the shape of the activation
flowing between them. Builders are provided for a decoder-only transformer,
a mixture-of-experts variant, and a BYOL-style two-branch model.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

from .errors import ValidationError

DTYPE_BYTES = {"float32": 4, "bfloat16": 2, "float16": 2}

NODE_KINDS = frozenset({
    "embedding", "transformer_block", "attention", "mlp", "layernorm",
    "unembedding", "moe_router", "expert", "encoder", "projector",
    "predictor", "ema_target", "loss", "generic",
})


class CycleError(ValidationError):
    """Raised when a graph that must be acyclic contains a cycle."""

    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        super().__init__("graph contains a cycle: " + " -> ".join(self.cycle))


@dataclass(frozen=True)
class TensorShape:
    """Shape of a dense tensor plus its element dtype.

    axis_names, when given, must label every axis with a unique name.
    """

    dims: tuple[int, ...]
    dtype: str = "float32"
    axis_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if any(d < 1 for d in self.dims):
            raise ValidationError(f"tensor extents must be >= 1, got {self.dims}")
        if self.dtype not in DTYPE_BYTES:
            raise ValidationError(f"unknown dtype {self.dtype!r}, expected one of {sorted(DTYPE_BYTES)}")
        if self.axis_names is not None:
            names = tuple(self.axis_names)
            object.__setattr__(self, "axis_names", names)
            if len(names) != len(self.dims):
                raise ValidationError(
                    f"axis_names {names} does not match rank {len(self.dims)}")
            if len(set(names)) != len(names):
                raise ValidationError(f"axis names must be unique within a shape, got {names}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def num_elements(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    @property
    def num_bytes(self) -> int:
        return self.num_elements * DTYPE_BYTES[self.dtype]


@dataclass(frozen=True)
class NodeSpec:
    """A parameterized function node: its kind, parameter tensors, and attributes."""

    id: str
    kind: str
    param_tensors: tuple[tuple[str, TensorShape], ...] = ()
    attrs: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise ValidationError(f"node {self.id!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "param_tensors", tuple(self.param_tensors))

    def param(self, name: str) -> TensorShape:
        for pname, shape in self.param_tensors:
            if pname == name:
                return shape
        raise KeyError(f"node {self.id!r} has no parameter {name!r}")


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    shape: TensorShape


@dataclass(eq=False)
class ModelGraph:
    """A DAG of NodeSpecs with shaped activation edges.

    Graphs are treated as immutable after construction: builders return
    validated graphs and nothing in this package mutates them afterwards.
    """

    nodes: dict[str, NodeSpec]
    edges: list[Edge]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    def __eq__(self, other) -> bool:
        # Equality is over node/edge *sets*; edge order and activation axis
        # labels are presentation details that serialization does not keep.
        if not isinstance(other, ModelGraph):
            return NotImplemented

        def node_key(n: NodeSpec):
            params = tuple((p, s.dims, s.dtype) for p, s in n.param_tensors)
            return (n.kind, params, tuple(sorted(n.attrs.items())))

        def edge_set(g: ModelGraph):
            return sorted((e.src, e.dst, e.shape.dims, e.shape.dtype) for e in g.edges)

        return (
            {i: node_key(n) for i, n in self.nodes.items()}
            == {i: node_key(n) for i, n in other.nodes.items()}
            and edge_set(self) == edge_set(other)
            and set(self.inputs) == set(other.inputs)
            and set(self.outputs) == set(other.outputs)
        )

    def in_edges(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.dst == node_id]

    def out_edges(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.src == node_id]

    def validate(self) -> None:
        """Check endpoint existence, acyclicity, and input/output reachability."""
        for e in self.edges:
            for endpoint in (e.src, e.dst):
                if endpoint not in self.nodes:
                    raise ValidationError(f"edge ({e.src!r} -> {e.dst!r}) references unknown node {endpoint!r}")
        for nid in (*self.inputs, *self.outputs):
            if nid not in self.nodes:
                raise ValidationError(f"designated input/output {nid!r} is not a node")
        topological_order(self)  # raises CycleError on cycles

        forward = self._reachable(self.inputs, direction="out")
        backward = self._reachable(self.outputs, direction="in")
        for nid in self.nodes:
            if nid not in forward:
                raise ValidationError(f"node {nid!r} is not reachable from any input")
            if nid not in backward:
                raise ValidationError(f"node {nid!r} does not reach any output")

    def _reachable(self, seeds: tuple[str, ...], direction: str) -> set[str]:
        succ: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for e in self.edges:
            if direction == "out":
                succ[e.src].append(e.dst)
            else:
                succ[e.dst].append(e.src)
        seen = set(seeds)
        stack = list(seeds)
        while stack:
            for nxt in succ[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    def to_json(self) -> dict:
        """Serialize to the documented {nodes, edges} JSON layout."""
        return {
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "params": [
                        {"name": pname, "dims": list(shape.dims), "dtype": shape.dtype}
                        for pname, shape in n.param_tensors
                    ],
                    "attrs": dict(n.attrs),
                }
                for n in (self.nodes[i] for i in sorted(self.nodes))
            ],
            "edges": [
                {"src": e.src, "dst": e.dst, "dims": list(e.shape.dims), "dtype": e.shape.dtype}
                for e in self.edges
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelGraph":
        nodes = {}
        for nd in doc["nodes"]:
            params = tuple(
                (p["name"], TensorShape(tuple(p["dims"]), p["dtype"])) for p in nd["params"]
            )
            nodes[nd["id"]] = NodeSpec(nd["id"], nd["kind"], params, dict(nd["attrs"]))
        edges = [
            Edge(e["src"], e["dst"], TensorShape(tuple(e["dims"]), e["dtype"]))
            for e in doc["edges"]
        ]
        # Inputs/outputs are not part of the wire format; recover them as the
        # graph's sources and sinks.
        have_in = {e.dst for e in edges}
        have_out = {e.src for e in edges}
        inputs = tuple(sorted(i for i in nodes if i not in have_in))
        outputs = tuple(sorted(i for i in nodes if i not in have_out))
        g = cls(nodes=nodes, edges=edges, inputs=inputs, outputs=outputs)
        g.validate()
        return g

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ModelGraph":
        return cls.from_json(json.loads(text))


def topological_order(g: ModelGraph) -> list[str]:
    """Return node ids with every edge (u, v) having u before v.

    Ties are broken by node id, so the result is deterministic. Raises
    CycleError naming one cycle when the graph is not a DAG.
    """
    indeg = {nid: 0 for nid in g.nodes}
    succ: dict[str, list[str]] = {nid: [] for nid in g.nodes}
    for e in g.edges:
        indeg[e.dst] += 1
        succ[e.src].append(e.dst)

    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for nxt in succ[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) < len(g.nodes):
        raise CycleError(_find_cycle(g, {nid for nid, d in indeg.items() if d > 0}))
    return order


def _find_cycle(g: ModelGraph, candidates: set[str]) -> list[str]:
    # Walk successors inside the unresolved subgraph until a node repeats.
    succ: dict[str, list[str]] = {nid: [] for nid in candidates}
    for e in g.edges:
        if e.src in candidates and e.dst in candidates:
            succ[e.src].append(e.dst)
    start = sorted(candidates)[0]
    path, seen = [], {}
    node = start
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = sorted(succ[node])[0]
    return path[seen[node]:] + [node]


@dataclass(frozen=True)
class TransformerConfig:
    """Dimensions of a decoder-style transformer.

    ffn_hidden defaults to 4x hidden and vocab to 32000 when not given;
    capacity results downstream echo both so the defaults stay visible.
    """

    hidden: int
    layers: int
    heads: int
    ffn_hidden: int | None = None
    vocab: int = 32000
    seq_len: int = 2048
    batch: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.hidden)
        for name in ("hidden", "heads", "ffn_hidden", "vocab", "seq_len", "batch"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.layers < 0:
            raise ValidationError(f"layers must be >= 0, got {self.layers}")
        if self.hidden % self.heads != 0:
            raise ValidationError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.dtype not in DTYPE_BYTES:
            raise ValidationError(f"unknown dtype {self.dtype!r}")


def _activation(cfg: TransformerConfig, width: int, axis: str = "embed") -> TensorShape:
    return TensorShape(
        (cfg.batch, cfg.seq_len, width), cfg.dtype, ("batch", "seq", axis))


def _block_attention_params(cfg: TransformerConfig, include_biases: bool):
    h = cfg.hidden
    dt = cfg.dtype
    params = [
        ("ln1_gain", TensorShape((h,), dt)),
        ("ln1_bias", TensorShape((h,), dt)),
        ("qkv", TensorShape((h, 3 * h), dt)),
        ("out_proj", TensorShape((h, h), dt)),
        ("ln2_gain", TensorShape((h,), dt)),
        ("ln2_bias", TensorShape((h,), dt)),
    ]
    if include_biases:
        params.insert(3, ("qkv_bias", TensorShape((3 * h,), dt)))
        params.insert(5, ("out_bias", TensorShape((h,), dt)))
    return params


def _block_mlp_params(cfg: TransformerConfig, include_biases: bool, prefix: str = ""):
    h, f, dt = cfg.hidden, cfg.ffn_hidden, cfg.dtype
    params = [
        (prefix + "mlp_in", TensorShape((h, f), dt)),
        (prefix + "mlp_out", TensorShape((f, h), dt)),
    ]
    if include_biases:
        params.insert(1, (prefix + "mlp_in_bias", TensorShape((f,), dt)))
        params.append((prefix + "mlp_out_bias", TensorShape((h,), dt)))
    return params


def build_decoder_only(cfg: TransformerConfig, include_biases: bool = True) -> ModelGraph:
    """Embedding -> L transformer blocks -> unembedding -> loss.

    Per-block parameters: fused QKV (h, 3h), output projection (h, h),
    MLP in (h, ffn) and out (ffn, h), and two layernorm gain/bias pairs.
    Projection biases are controlled by include_biases.
    """
    h, dt = cfg.hidden, cfg.dtype
    nodes: dict[str, NodeSpec] = {}
    edges: list[Edge] = []

    embed_params = [("table", TensorShape((cfg.vocab, h), dt))]
    nodes["embed"] = NodeSpec("embed", "embedding", tuple(embed_params))

    prev = "embed"
    for i in range(cfg.layers):
        nid = f"block{i:03d}"
        params = _block_attention_params(cfg, include_biases) + _block_mlp_params(cfg, include_biases)
        nodes[nid] = NodeSpec(
            nid, "transformer_block", tuple(params),
            {"heads": cfg.heads, "ffn_hidden": cfg.ffn_hidden, "block_index": i})
        edges.append(Edge(prev, nid, _activation(cfg, h)))
        prev = nid

    unembed_params = [("proj", TensorShape((h, cfg.vocab), dt))]
    if include_biases:
        unembed_params.append(("bias", TensorShape((cfg.vocab,), dt)))
    nodes["unembed"] = NodeSpec("unembed", "unembedding", tuple(unembed_params))
    edges.append(Edge(prev, "unembed", _activation(cfg, h)))

    nodes["loss"] = NodeSpec("loss", "loss")
    edges.append(Edge("unembed", "loss", _activation(cfg, cfg.vocab, axis="vocab")))

    g = ModelGraph(nodes=nodes, edges=edges, inputs=("embed",), outputs=("loss",))
    g.validate()
    return g


def build_moe(cfg: TransformerConfig, experts: int, moe_every: int,
              include_biases: bool = True) -> ModelGraph:
    """Like build_decoder_only, but every moe_every-th block routes its MLP
    through `experts` parallel expert nodes.

    The router carries no parameters (gating weights are negligible at this
    model's granularity), so experts=1 is parameter-identical to the dense
    graph.
    """
    if experts < 1:
        raise ValidationError(f"experts must be >= 1, got {experts}")
    if moe_every < 1:
        raise ValidationError(f"moe_every must be >= 1, got {moe_every}")

    h = cfg.hidden
    nodes: dict[str, NodeSpec] = {}
    edges: list[Edge] = []
    nodes["embed"] = NodeSpec("embed", "embedding",
                              (("table", TensorShape((cfg.vocab, h), cfg.dtype)),))

    prev: list[str] = ["embed"]
    for i in range(cfg.layers):
        is_moe = (i + 1) % moe_every == 0
        if not is_moe:
            nid = f"block{i:03d}"
            params = _block_attention_params(cfg, include_biases) + _block_mlp_params(cfg, include_biases)
            nodes[nid] = NodeSpec(
                nid, "transformer_block", tuple(params),
                {"heads": cfg.heads, "ffn_hidden": cfg.ffn_hidden, "block_index": i})
            for p in prev:
                edges.append(Edge(p, nid, _activation(cfg, h)))
            prev = [nid]
        else:
            attn = f"block{i:03d}_attn"
            nodes[attn] = NodeSpec(
                attn, "attention", tuple(_block_attention_params(cfg, include_biases)),
                {"heads": cfg.heads, "block_index": i})
            for p in prev:
                edges.append(Edge(p, attn, _activation(cfg, h)))
            router = f"block{i:03d}_router"
            nodes[router] = NodeSpec(router, "moe_router", (), {"block_index": i})
            edges.append(Edge(attn, router, _activation(cfg, h)))
            prev = []
            for j in range(experts):
                eid = f"block{i:03d}_expert{j:02d}"
                nodes[eid] = NodeSpec(
                    eid, "expert", tuple(_block_mlp_params(cfg, include_biases)),
                    {"block_index": i, "expert_index": j})
                edges.append(Edge(router, eid, _activation(cfg, h)))
                prev.append(eid)

    unembed_params = [("proj", TensorShape((h, cfg.vocab), cfg.dtype))]
    if include_biases:
        unembed_params.append(("bias", TensorShape((cfg.vocab,), cfg.dtype)))
    nodes["unembed"] = NodeSpec("unembed", "unembedding", tuple(unembed_params))
    for p in prev:
        edges.append(Edge(p, "unembed", _activation(cfg, h)))
    nodes["loss"] = NodeSpec("loss", "loss")
    edges.append(Edge("unembed", "loss", _activation(cfg, cfg.vocab, axis="vocab")))

    g = ModelGraph(nodes=nodes, edges=edges, inputs=("embed",), outputs=("loss",))
    g.validate()
    return g


def build_byol(encoder_cfg: TransformerConfig, projector_dim: int, predictor_dim: int,
               include_biases: bool = True) -> ModelGraph:
    """Two-branch model: an online encoder/projector/predictor branch and an
    EMA target encoder/projector branch, joined at the loss.

    Both encoders carry the per-block parameter inventory of encoder_cfg;
    the target branch has no predictor, so the online branch is one node
    longer. The resulting DAG always has exactly two input-to-loss paths.
    """
    if projector_dim < 1 or predictor_dim < 1:
        raise ValidationError(
            f"projector/predictor dims must be >= 1, got {projector_dim}, {predictor_dim}")

    h, dt = encoder_cfg.hidden, encoder_cfg.dtype

    def encoder_params():
        params = []
        for i in range(encoder_cfg.layers):
            prefix = f"block{i:03d}_"
            for name, shape in _block_attention_params(encoder_cfg, include_biases):
                params.append((prefix + name, shape))
            params.extend(_block_mlp_params(encoder_cfg, include_biases, prefix=prefix))
        return tuple(params)

    def projector_params():
        params = [("proj", TensorShape((h, projector_dim), dt))]
        if include_biases:
            params.append(("bias", TensorShape((projector_dim,), dt)))
        return tuple(params)

    predictor_params = [("proj", TensorShape((projector_dim, predictor_dim), dt))]
    if include_biases:
        predictor_params.append(("bias", TensorShape((predictor_dim,), dt)))

    enc_attrs = {"layers": encoder_cfg.layers, "heads": encoder_cfg.heads}
    nodes = {
        "online_encoder": NodeSpec("online_encoder", "encoder", encoder_params(), dict(enc_attrs)),
        "online_projector": NodeSpec("online_projector", "projector", projector_params()),
        "online_predictor": NodeSpec("online_predictor", "predictor", tuple(predictor_params)),
        "target_encoder": NodeSpec("target_encoder", "ema_target", encoder_params(), dict(enc_attrs)),
        "target_projector": NodeSpec("target_projector", "projector", projector_params()),
        "loss": NodeSpec("loss", "loss"),
    }
    edges = [
        Edge("online_encoder", "online_projector", _activation(encoder_cfg, h)),
        Edge("online_projector", "online_predictor", _activation(encoder_cfg, projector_dim, axis="proj")),
        Edge("online_predictor", "loss", _activation(encoder_cfg, predictor_dim, axis="pred")),
        Edge("target_encoder", "target_projector", _activation(encoder_cfg, h)),
        Edge("target_projector", "loss", _activation(encoder_cfg, projector_dim, axis="proj")),
    ]
    g = ModelGraph(nodes=nodes, edges=edges,
                   inputs=("online_encoder", "target_encoder"), outputs=("loss",))
    g.validate()
    return g


def count_paths(g: ModelGraph) -> int:
    """Number of distinct paths from any graph input to any graph output."""
    order = topological_order(g)
    paths = {nid: (1 if nid in g.inputs else 0) for nid in order}
    for nid in order:
        for e in g.out_edges(nid):
            paths[e.dst] += paths[nid]
    return sum(paths[o] for o in g.outputs)
