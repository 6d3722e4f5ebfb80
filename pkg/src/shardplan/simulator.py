"""Discrete-event simulation of pipeline, tensor, and combined parallelism.

Produces per-device timelines: timed forward/backward/communication/idle
events, the step time, and per-device utilization. The pipeline schedule is
GPipe (all forward micro-batches, then all backward in reverse); the tensor
path replays a sharding assignment's collectives between layer computations
on every device (SPMD, so all devices carry identical event structure).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import analysis, hw_cost
from .errors import ValidationError
from .hw_cost import HardwareProfile
from .mesh import (LogicalMesh, ShardingAssignment, data_parallel_io_specs,
                   megatron_block_constraints, propagate)
from .model_ir import ModelGraph, topological_order


@dataclass(frozen=True)
class TimelineEvent:
    device: int
    start: float
    end: float
    kind: str                     # forward | backward | collective | send_recv | idle
    label: str
    micro_batch: int | None = None

    def __post_init__(self):
        if self.end < self.start:
            raise ValidationError(f"event {self.label!r} ends before it starts")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def to_json(self) -> dict:
        return {"device": self.device, "start": self.start, "end": self.end,
                "kind": self.kind, "label": self.label, "micro_batch": self.micro_batch}


@dataclass
class Timeline:
    events: list[TimelineEvent]
    step_time: float
    per_device_utilization: list[float]

    @property
    def device_count(self) -> int:
        return len(self.per_device_utilization)

    @property
    def bubble_fraction(self) -> float:
        """Fraction of device-time spent idle across the whole step."""
        if not self.per_device_utilization:
            return 0.0
        return 1.0 - sum(self.per_device_utilization) / len(self.per_device_utilization)

    def device_events(self, device: int, include_idle: bool = True) -> list[TimelineEvent]:
        return [e for e in self.events
                if e.device == device and (include_idle or e.kind != "idle")]

    def events_of_kind(self, kind: str) -> list[TimelineEvent]:
        return [e for e in self.events if e.kind == kind]

    def validate(self) -> None:
        """Events on one device must not overlap."""
        by_dev: dict[int, list[TimelineEvent]] = {}
        for e in self.events:
            by_dev.setdefault(e.device, []).append(e)
        for dev, evs in by_dev.items():
            evs.sort(key=lambda e: (e.start, e.end))
            for prev, nxt in zip(evs, evs[1:]):
                if nxt.start < prev.end - 1e-12 * max(1.0, self.step_time):
                    raise ValidationError(
                        f"device {dev}: events {prev.label!r} and {nxt.label!r} overlap")

    def to_json(self) -> dict:
        return {"step_time": self.step_time,
                "events": [e.to_json() for e in self.events]}

    def to_svg(self, width: int = 960, row_height: int = 28) -> str:
        return render_svg(self, width=width, row_height=row_height)


_COLORS = {
    "forward": "#4878a8",
    "backward": "#9ecae9",
    "collective": "#e8823c",
    "send_recv": "#999999",
    "idle": "#f2f2f2",
}


def render_svg(timeline: Timeline, width: int = 960, row_height: int = 28) -> str:
    """One row per device, events colored by kind, Fig-2 style."""
    n_dev = timeline.device_count
    pad, label_w = 8, 70
    height = pad * 2 + n_dev * row_height + 16
    span = timeline.step_time or 1.0
    scale = (width - label_w - 2 * pad) / span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for dev in range(n_dev):
        y = pad + dev * row_height
        parts.append(
            f'<text x="{pad}" y="{y + row_height * 0.65:.1f}">D{dev}</text>')
        for e in timeline.device_events(dev):
            x = label_w + pad + e.start * scale
            w = max(e.duration * scale, 0.25)
            color = _COLORS.get(e.kind, "#cccccc")
            title = f"{e.label} [{e.start:.6g}, {e.end:.6g}]"
            parts.append(
                f'<rect x="{x:.2f}" y="{y + 2}" width="{w:.2f}" height="{row_height - 6}" '
                f'fill="{color}" stroke="#555" stroke-width="0.4"><title>{title}</title></rect>')
    parts.append(
        f'<text x="{pad}" y="{height - 4}">step_time = {timeline.step_time:.6g}s</text>')
    parts.append("</svg>")
    return "\n".join(parts)


class _DeviceTape:
    """Per-device event accumulator; fills idle gaps at finalize time."""

    def __init__(self, n_devices: int):
        self.events: list[list[TimelineEvent]] = [[] for _ in range(n_devices)]

    def add(self, device: int, start: float, dur: float, kind: str, label: str,
            micro_batch: int | None = None) -> float:
        end = start + dur
        if dur > 0:
            self.events[device].append(TimelineEvent(device, start, end, kind, label, micro_batch))
        return end

    def finalize(self) -> Timeline:
        step = max((e.end for evs in self.events for e in evs), default=0.0)
        all_events: list[TimelineEvent] = []
        utilization = []
        for dev, evs in enumerate(self.events):
            evs.sort(key=lambda e: (e.start, e.end))
            busy = sum(e.duration for e in evs)
            utilization.append(busy / step if step > 0 else 1.0)
            cursor = 0.0
            for e in evs:
                if e.start > cursor:
                    all_events.append(TimelineEvent(dev, cursor, e.start, "idle", "idle"))
                all_events.append(e)
                cursor = e.end
            if step > cursor:
                all_events.append(TimelineEvent(dev, cursor, step, "idle", "idle"))
        return Timeline(all_events, step, utilization)


@dataclass(frozen=True)
class StageAssignment:
    """Ordered partition of a graph's nodes into contiguous pipeline stages."""

    stages: tuple[tuple[str, ...], ...]
    device_groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))
        if self.device_groups is None:
            object.__setattr__(self, "device_groups",
                               tuple((i,) for i in range(len(self.stages))))
        if len(self.device_groups) != len(self.stages):
            raise ValidationError(
                f"{len(self.stages)} stages but {len(self.device_groups)} device groups")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage_of(self) -> dict[str, int]:
        return {nid: i for i, stage in enumerate(self.stages) for nid in stage}

    def validate(self, g: ModelGraph) -> None:
        seen: set[str] = set()
        for stage in self.stages:
            for nid in stage:
                if nid not in g.nodes:
                    raise ValidationError(f"stage assignment references unknown node {nid!r}")
                if nid in seen:
                    raise ValidationError(f"node {nid!r} appears in more than one stage")
                seen.add(nid)
        if seen != set(g.nodes):
            missing = sorted(set(g.nodes) - seen)
            raise ValidationError(f"stage assignment does not cover nodes {missing}")
        stage_of = self.stage_of()
        for e in g.edges:
            if stage_of[e.src] > stage_of[e.dst]:
                raise ValidationError(
                    f"edge {e.src!r}->{e.dst!r} flows backward from stage "
                    f"{stage_of[e.src]} to stage {stage_of[e.dst]}")


def balance_stages(g: ModelGraph, num_stages: int) -> StageAssignment:
    """Greedy contiguous split of the topological order that keeps each
    stage's forward FLOPs near the running average of what remains."""
    order = topological_order(g)
    if num_stages < 1:
        raise ValidationError(f"num_stages must be >= 1, got {num_stages}")
    if num_stages > len(order):
        raise ValidationError(
            f"cannot split {len(order)} nodes into {num_stages} stages")
    flops = [analysis.node_forward_flops(g, nid) for nid in order]
    stages: list[tuple[str, ...]] = []
    start = 0
    remaining = sum(flops)
    for stage_idx in range(num_stages):
        stages_left = num_stages - stage_idx
        if stages_left == 1:
            stages.append(tuple(order[start:]))
            break
        target = remaining / stages_left
        end = start + 1  # at least one node per stage
        acc = flops[start]
        max_end = len(order) - (stages_left - 1)
        while end < max_end and acc + flops[end] <= target:
            acc += flops[end]
            end += 1
        stages.append(tuple(order[start:end]))
        remaining -= acc
        start = end
    return StageAssignment(tuple(stages))


def _stage_costs(g: ModelGraph, stages: StageAssignment, p: HardwareProfile,
                 micro_batches: int, batch_scale: float, tp: int,
                 assignment: ShardingAssignment | None):
    """Per-micro-batch forward/backward durations per stage, plus the
    per-micro-batch send time after each stage."""
    stage_of = stages.stage_of()
    n = stages.num_stages
    fwd = [0.0] * n
    comm_fwd = [0.0] * n
    comm_bwd = [0.0] * n
    for nid in g.nodes:
        s = stage_of[nid]
        node_flops = analysis.node_forward_flops(g, nid) * batch_scale / (micro_batches * tp)
        fwd[s] += hw_cost.matmul_time(node_flops, p)
        if assignment is not None:
            for c in assignment.collectives_at(nid, "forward"):
                n_dev = math.prod(assignment.mesh.axis_size(a) for a in c.axes)
                comm_fwd[s] += hw_cost.collective_time(
                    c.kind, c.payload_bytes * batch_scale / micro_batches, n_dev, p)
            for c in assignment.collectives_at(nid, "backward"):
                n_dev = math.prod(assignment.mesh.axis_size(a) for a in c.axes)
                comm_bwd[s] += hw_cost.collective_time(
                    c.kind, c.payload_bytes * batch_scale / micro_batches, n_dev, p)
    bwd = [2 * f + cb for f, cb in zip(fwd, comm_bwd)]
    fwd = [f + cf for f, cf in zip(fwd, comm_fwd)]

    send = [0.0] * n
    for e in g.edges:
        s_src, s_dst = stage_of[e.src], stage_of[e.dst]
        if s_src < s_dst:
            send[s_src] += (e.shape.num_bytes * batch_scale / micro_batches) / p.link_bandwidth
    return fwd, bwd, send


def simulate_pipeline(g: ModelGraph, stages: StageAssignment, micro_batches: int,
                      p: HardwareProfile, batch_scale: float = 1.0,
                      tp: int = 1, assignment: ShardingAssignment | None = None) -> Timeline:
    """GPipe schedule: all micro-batch forwards flow through the stages, then
    all backwards in reverse stage order.

    Inter-stage sends occupy the sending device for activation-bytes /
    link_bandwidth. Backward compute costs twice the forward. With balanced
    stages and free communication the idle fraction is exactly
    (p - 1) / (m + p - 1).
    """
    stages.validate(g)
    if micro_batches < 1:
        raise ValidationError(f"micro_batches must be >= 1, got {micro_batches}")
    batch = _graph_batch(g)
    if batch % micro_batches != 0:
        raise ValidationError(
            f"batch ({batch}) is not divisible by micro_batches ({micro_batches})")

    n = stages.num_stages
    m = micro_batches
    fwd, bwd, send = _stage_costs(g, stages, p, m, batch_scale, tp, assignment)

    groups = stages.device_groups
    n_devices = max(d for grp in groups for d in grp) + 1
    tape = _DeviceTape(n_devices)
    offset = p.coordination_overhead_s
    if offset > 0:
        for dev in range(n_devices):
            tape.add(dev, 0.0, offset, "collective", "coordination")
    free = [offset] * n

    def run(stage: int, start: float, dur: float, kind: str, label: str, mb: int) -> float:
        for dev in groups[stage]:
            tape.add(dev, start, dur, kind, label, mb)
        free[stage] = start + dur
        return start + dur

    arrive = [[offset] * m for _ in range(n)]
    for mb in range(m):
        for i in range(n):
            start = max(free[i], arrive[i][mb])
            end = run(i, start, fwd[i], "forward", f"F_{{{i},{mb}}}", mb)
            if i + 1 < n:
                sent = run(i, end, send[i], "send_recv", f"S_{{{i},{mb}}}", mb)
                arrive[i + 1][mb] = sent

    bwd_arrive = [[0.0] * m for _ in range(n)]
    for mb in reversed(range(m)):
        for i in reversed(range(n)):
            start = max(free[i], bwd_arrive[i][mb])
            end = run(i, start, bwd[i], "backward", f"B_{{{i},{mb}}}", mb)
            if i > 0:
                # Gradient of the boundary activation travels back; same bytes.
                sent = run(i, end, send[i - 1], "send_recv", f"G_{{{i},{mb}}}", mb)
                bwd_arrive[i - 1][mb] = sent

    timeline = tape.finalize()
    timeline.validate()
    return timeline


def _graph_batch(g: ModelGraph) -> int:
    for nid in g.inputs:
        for e in g.out_edges(nid):
            return e.shape.dims[0]
    return 1


def simulate_tensor_parallel(g: ModelGraph, mesh: LogicalMesh,
                             assignment: ShardingAssignment, p: HardwareProfile,
                             batch_scale: float = 1.0) -> Timeline:
    """Every device computes every layer's shard (flops / device count) with
    the assignment's collectives inserted between layer computations; the
    per-device timelines are structurally identical (SPMD)."""
    _check_assignment_total(g, assignment)
    tp = mesh.device_count
    order = topological_order(g)
    layer_idx = {nid: i for i, nid in enumerate(order)}

    # Single-device schedule, replicated to all devices below.
    schedule: list[tuple[float, str, str, int | None]] = []

    def comm_events(nid: str, direction: str):
        for c in assignment.collectives_at(nid, direction):
            yield c
        for e in g.out_edges(nid):
            for c in assignment.collectives_at(f"{e.src}->{e.dst}", direction):
                yield c

    if p.coordination_overhead_s > 0:
        schedule.append((p.coordination_overhead_s, "collective", "coordination", None))
    for nid in order:
        flops = analysis.node_forward_flops(g, nid) * batch_scale / tp
        schedule.append((hw_cost.matmul_time(flops, p), "forward", f"F_{{{layer_idx[nid]},j}}", None))
        for c in comm_events(nid, "forward"):
            n_dev = math.prod(mesh.axis_size(a) for a in c.axes)
            dur = hw_cost.collective_time(c.kind, c.payload_bytes * batch_scale, n_dev, p)
            schedule.append((dur, "collective", f"{c.kind}@{c.site}", None))
    for nid in reversed(order):
        flops = 2 * analysis.node_forward_flops(g, nid) * batch_scale / tp
        schedule.append((hw_cost.matmul_time(flops, p), "backward", f"B_{{{layer_idx[nid]},j}}", None))
        for c in comm_events(nid, "backward"):
            n_dev = math.prod(mesh.axis_size(a) for a in c.axes)
            dur = hw_cost.collective_time(c.kind, c.payload_bytes * batch_scale, n_dev, p)
            schedule.append((dur, "collective", f"{c.kind}@{c.site}", None))

    tape = _DeviceTape(tp)
    for dev in range(tp):
        t = 0.0
        for dur, kind, label, mb in schedule:
            t = tape.add(dev, t, dur, kind, label, mb)
    timeline = tape.finalize()
    timeline.validate()
    return timeline


def _check_assignment_total(g: ModelGraph, assignment: ShardingAssignment) -> None:
    for e in g.edges:
        if (e.src, e.dst) not in assignment.edge_specs:
            raise ValidationError(f"assignment is missing edge {e.src!r}->{e.dst!r}")
    for nid, node in g.nodes.items():
        for pname, _ in node.param_tensors:
            if (nid, pname) not in assignment.param_specs:
                raise ValidationError(f"assignment is missing parameter {nid}.{pname}")


def tensor_parallel_assignment(g: ModelGraph, tp: int,
                               model_axis: str = "model") -> tuple[LogicalMesh, ShardingAssignment]:
    """Convenience: a pure model-parallel mesh of the given order with
    column/row-parallel constraints propagated over the graph."""
    mesh = LogicalMesh(((model_axis, tp),))
    constraints = megatron_block_constraints(g, mesh, model_axis)
    io = data_parallel_io_specs(g, data_axis=None)
    return mesh, propagate(g, mesh, io, constraints)


def simulate_combined(g: ModelGraph, dp: int, tp: int, p: HardwareProfile,
                      batch: int | None = None,
                      pp_stages: StageAssignment | None = None,
                      micro_batches: int = 1) -> Timeline:
    """Tensor (and optionally pipeline) parallel step for one data-parallel
    replica of batch/dp, followed by the gradient all_reduce over the dp
    groups with payload = parameter bytes / tp."""
    if dp < 1 or tp < 1:
        raise ValidationError(f"dp and tp must be >= 1, got dp={dp}, tp={tp}")
    n_stages = pp_stages.num_stages if pp_stages is not None else 1
    if dp * tp * n_stages != p.cores_per_slice:
        raise ValidationError(
            f"dp ({dp}) x tp ({tp}) x stages ({n_stages}) != cores_per_slice "
            f"({p.cores_per_slice}) of profile {p.name!r}")
    batch = batch if batch is not None else _graph_batch(g)
    if batch % dp != 0:
        raise ValidationError(f"batch ({batch}) is not divisible by dp ({dp})")
    batch_scale = (batch / dp) / _graph_batch(g)

    if tp > 1 or pp_stages is None:
        mesh, assignment = tensor_parallel_assignment(g, tp)
    else:
        mesh, assignment = None, None

    if pp_stages is None:
        timeline = simulate_tensor_parallel(g, mesh, assignment, p, batch_scale=batch_scale)
    else:
        timeline = simulate_pipeline(g, pp_stages, micro_batches, p,
                                     batch_scale=batch_scale, tp=tp, assignment=assignment)

    param_bytes = sum(s.num_bytes for n in g.nodes.values() for _, s in n.param_tensors)
    grad_sync = hw_cost.allreduce_time(param_bytes / tp, dp, p)
    if grad_sync > 0:
        events = [e for e in timeline.events if e.kind != "idle"]
        tape = _DeviceTape(timeline.device_count)
        for e in events:
            tape.events[e.device].append(e)
        for dev in range(timeline.device_count):
            tape.add(dev, timeline.step_time, grad_sync, "collective", "all_reduce@grad_sync")
        timeline = tape.finalize()
        timeline.validate()
    return timeline
