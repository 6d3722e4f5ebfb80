"""Capacity search, parallelism-strategy comparison, and checkpoint planning.

The capacity model is deliberately linear: parameters, gradients, and Adam
state are fully sharded over the tensor-parallel axis, activations (with
per-block rematerialization) likewise. Published slice capacities deviate
from this model by roughly 25-30%, which the results report as a residual
rather than absorb into fudge factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from . import analysis, hw_cost, simulator
from .analysis import OptimizerSpec
from .errors import InfeasibleError, ValidationError
from .hw_cost import HardwareProfile
from .mesh import validate_tensor_parallel
from .model_ir import ModelGraph, TransformerConfig, build_decoder_only

# Reported capacities of TPU v4 pod slices for decoder-only training at
# batch 1, sequence length 2048, float32 Adam, maximal tensor parallelism:
# (slice, hidden dim, max trainable parameters, measured step seconds).
REFERENCE_ROWS = (
    ("v4-16", 5120, 13.7e9, 0.87),
    ("v4-128", 10240, 86.6e9, 1.52),
    ("v4-512", 16384, 340.0e9, 6.21),
)

LAYER_STEP = 10
SEARCH_CAP = 1000


@dataclass(frozen=True)
class CapacityResult:
    slice_name: str
    hidden: int
    max_layers: int
    max_params: int
    predicted_step_time: float | None
    assumptions: dict

    def to_json(self) -> dict:
        return {
            "slice_name": self.slice_name,
            "hidden": self.hidden,
            "max_layers": self.max_layers,
            "max_params": self.max_params,
            "predicted_step_time": self.predicted_step_time,
            "assumptions": self.assumptions,
        }


@dataclass(frozen=True)
class CheckpointPlan:
    interval_s: float
    interval_steps: int
    checkpoint_cost_s: float
    mtbf_s: float
    expected_overhead_fraction: float
    warning: str | None = None

    def to_json(self) -> dict:
        return {
            "interval_s": self.interval_s,
            "interval_steps": self.interval_steps,
            "checkpoint_cost_s": self.checkpoint_cost_s,
            "mtbf_s": self.mtbf_s,
            "expected_overhead_fraction": self.expected_overhead_fraction,
            "warning": self.warning,
        }


def capacity_heads(hidden: int, tp: int) -> int:
    """Head count for capacity configs: 128-wide heads when that is
    compatible with tp-way head sharding, otherwise the nearest multiple of
    tp that divides the hidden dim (head width stays near 128)."""
    if hidden % tp != 0:
        raise InfeasibleError(
            f"hidden dim {hidden} is not shardable {tp} ways (not divisible)")
    base = max(1, hidden // 128)
    if base % tp == 0 and hidden % base == 0:
        return base
    k = max(1, round(base / tp))
    while k > 1 and (hidden // tp) % k != 0:
        k -= 1
    return k * tp


def _capacity_config(hidden: int, layers: int, tp: int, seq: int, batch: int,
                     vocab: int, dtype: str) -> TransformerConfig:
    return TransformerConfig(hidden=hidden, layers=layers, heads=capacity_heads(hidden, tp),
                             vocab=vocab, seq_len=seq, batch=batch, dtype=dtype)


def _per_core_bytes(g: ModelGraph, tp: int, opt: OptimizerSpec, dtype: str,
                    remat: str) -> float:
    """Per-core footprint: fully sharded params/grads/optimizer state plus
    sharded per-block activations."""
    n = analysis.param_count(g)
    state = n * analysis.bytes_per_param(dtype, opt, grads=True)
    act = analysis.activation_bytes(g, remat)
    return state / tp + act / tp


def max_layers(hidden: int, profile: HardwareProfile, seq: int = 2048, batch: int = 1,
               opt: OptimizerSpec | None = None, tp: int | None = None,
               vocab: int = 32000, dtype: str = "float32", remat: str = "per_block",
               predict_step_time: bool = True) -> CapacityResult:
    """Largest layer count (in steps of 10) whose training state fits the
    per-core memory under maximal tensor parallelism.

    Returns the result together with its maximality witness: the check
    re-run at max_layers + 10 must fail (unless the search hit its cap).
    """
    opt = opt or OptimizerSpec.adam()
    tp = tp if tp is not None else profile.cores_per_slice
    heads = capacity_heads(hidden, tp)
    validate_tensor_parallel(
        _capacity_config(hidden, 0, tp, seq, batch, vocab, dtype), tp)

    def fits(layers: int) -> bool:
        cfg = _capacity_config(hidden, layers, tp, seq, batch, vocab, dtype)
        g = build_decoder_only(cfg)
        return _per_core_bytes(g, tp, opt, dtype, remat) <= profile.hbm_bytes_per_core

    if not fits(LAYER_STEP):
        raise InfeasibleError(
            f"model does not fit: h={hidden}, {LAYER_STEP} layers need more than "
            f"{profile.hbm_bytes_per_core:.3e} bytes/core on {profile.name!r} at tp={tp}")

    layers = LAYER_STEP
    while layers + LAYER_STEP <= SEARCH_CAP and fits(layers + LAYER_STEP):
        layers += LAYER_STEP
    capped = layers + LAYER_STEP > SEARCH_CAP

    cfg = _capacity_config(hidden, layers, tp, seq, batch, vocab, dtype)
    g = build_decoder_only(cfg)
    params = analysis.param_count(g)
    embed = sum(s.num_elements for nid in ("embed", "unembed")
                for _, s in g.nodes[nid].param_tensors)

    step_time = None
    if predict_step_time:
        mesh, assignment = simulator.tensor_parallel_assignment(g, tp)
        step_time = simulator.simulate_tensor_parallel(g, mesh, assignment, profile).step_time

    assumptions = {
        "profile": profile.to_json(),
        "tp": tp,
        "heads": heads,
        "seq_len": seq,
        "batch": batch,
        "vocab": vocab,
        "dtype": dtype,
        "optimizer": opt.kind,
        "remat": remat,
        "bytes_per_param": analysis.bytes_per_param(dtype, opt, grads=True),
        "params_excluding_embedding": params - embed,
        "search_capped": capped,
        "witness_layers": None if capped else layers + LAYER_STEP,
        "witness_fits": None if capped else fits(layers + LAYER_STEP),
    }
    return CapacityResult(profile.name, hidden, layers, params, step_time, assumptions)


def calibrate_hbm(hidden: int, target_params: float, profile: HardwareProfile,
                  tp: int | None = None, seq: int = 2048, batch: int = 1,
                  opt: OptimizerSpec | None = None, vocab: int = 32000,
                  dtype: str = "float32", remat: str = "per_block") -> float:
    """Per-core HBM bytes that make the capacity search at `hidden` top out at
    the largest 10-layer multiple not exceeding target_params."""
    opt = opt or OptimizerSpec.adam()
    tp = tp if tp is not None else profile.cores_per_slice
    layers = LAYER_STEP
    while layers + LAYER_STEP <= SEARCH_CAP:
        cfg = _capacity_config(hidden, layers + LAYER_STEP, tp, seq, batch, vocab, dtype)
        if analysis.param_count(build_decoder_only(cfg)) > target_params:
            break
        layers += LAYER_STEP
    cfg = _capacity_config(hidden, layers, tp, seq, batch, vocab, dtype)
    return _per_core_bytes(build_decoder_only(cfg), tp, opt, dtype, remat)


def capacity_table(rows=REFERENCE_ROWS, base_profile: str = "v4",
                   hbm_bytes_per_core: float | None = None,
                   calibrate_to_first: bool = True,
                   predict_step_time: bool = True,
                   **model_kwargs) -> list[CapacityResult]:
    """Capacity results for a list of (slice_name, hidden, reference_params,
    reference_step_time) rows, with one global HBM calibration taken from the
    first row unless an explicit value is given. Residuals against the
    reference values are reported per row."""
    if not rows:
        return []
    profiles = [hw_cost.load_profile(name) for name, *_ in rows]
    if hbm_bytes_per_core is None and calibrate_to_first:
        first_profile, (_, first_hidden, first_params, _) = profiles[0], rows[0]
        hbm_bytes_per_core = calibrate_hbm(first_hidden, first_params, first_profile,
                                           **model_kwargs)
    results = []
    for profile, (name, hidden, ref_params, ref_step) in zip(profiles, rows):
        if hbm_bytes_per_core is not None:
            profile = replace(profile, hbm_bytes_per_core=hbm_bytes_per_core)
        result = max_layers(hidden, profile, predict_step_time=predict_step_time,
                            **model_kwargs)
        extras = {
            "reference_params": ref_params,
            "reference_step_time": ref_step,
            "params_residual": result.max_params / ref_params - 1.0,
            "hbm_calibrated_bytes": hbm_bytes_per_core,
        }
        results.append(replace(result, assumptions={**result.assumptions, **extras}))
    return results


@dataclass(frozen=True)
class ComparisonReport:
    tensor_step_time: float | None
    pipeline_step_time: float | None
    pipeline_micro_batches: int | None
    pipeline_stages: int
    tensor_parallelism: int
    winner: str            # "tensor" | "pipeline" | "tie"
    infeasible: dict       # strategy -> reason, for strategies that could not run

    def to_json(self) -> dict:
        return {
            "tensor_step_time": self.tensor_step_time,
            "pipeline_step_time": self.pipeline_step_time,
            "pipeline_micro_batches": self.pipeline_micro_batches,
            "pipeline_stages": self.pipeline_stages,
            "tensor_parallelism": self.tensor_parallelism,
            "winner": self.winner,
            "infeasible": self.infeasible,
        }


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def compare_parallelism(g: ModelGraph, profile: HardwareProfile,
                        micro_batch_sweep: list[int] | None = None) -> ComparisonReport:
    """Best pipeline step time (over the micro-batch sweep) versus the tensor
    parallel step time on the same slice.

    The sweep defaults to every divisor of the graph's batch. A strategy that
    cannot run (e.g. head divisibility) is reported infeasible, not raised.
    """
    cores = profile.cores_per_slice
    infeasible: dict[str, str] = {}

    tensor_time = None
    try:
        mesh, assignment = simulator.tensor_parallel_assignment(g, cores)
        tensor_time = simulator.simulate_tensor_parallel(g, mesh, assignment, profile).step_time
    except ValidationError as exc:
        infeasible["tensor"] = str(exc)

    batch = simulator._graph_batch(g)
    sweep = micro_batch_sweep or _divisors(batch)
    n_stages = min(cores, len(g.nodes))
    stages = simulator.balance_stages(g, n_stages)
    pipeline_time, best_m = None, None
    for m in sweep:
        if batch % m != 0:
            continue
        t = simulator.simulate_pipeline(g, stages, m, profile).step_time
        if pipeline_time is None or t < pipeline_time:
            pipeline_time, best_m = t, m
    if pipeline_time is None:
        infeasible["pipeline"] = f"no feasible micro-batch count in sweep {sweep} for batch {batch}"

    if tensor_time is None and pipeline_time is None:
        raise InfeasibleError(f"neither strategy is feasible: {infeasible}")
    if tensor_time is None:
        winner = "pipeline"
    elif pipeline_time is None:
        winner = "tensor"
    elif math.isclose(tensor_time, pipeline_time, rel_tol=1e-12):
        winner = "tie"
    else:
        winner = "tensor" if tensor_time < pipeline_time else "pipeline"
    return ComparisonReport(tensor_time, pipeline_time, best_m, n_stages, cores,
                            winner, infeasible)


def checkpoint_overhead(interval_s: float, checkpoint_cost_s: float, mtbf_s: float) -> float:
    """Expected fraction of time lost to checkpoint writes plus recomputation
    after failures, for a given checkpoint interval."""
    if interval_s <= 0:
        raise ValidationError(f"interval must be positive, got {interval_s}")
    return checkpoint_cost_s / interval_s + interval_s / (2 * mtbf_s)


def checkpoint_interval(step_time_s: float, checkpoint_cost_s: float,
                        mtbf_s: float) -> CheckpointPlan:
    """Interval minimizing checkpoint_overhead: sqrt(2 * cost * MTBF), rounded
    to a whole number of training steps.

    A zero checkpoint cost returns the degenerate zero-interval plan. When
    the cost reaches the MTBF the quadratic model is outside its regime and
    the plan carries a warning instead of failing.
    """
    if step_time_s <= 0 or mtbf_s <= 0 or checkpoint_cost_s < 0:
        raise ValidationError(
            f"expected step_time > 0, mtbf > 0, cost >= 0; got "
            f"step={step_time_s}, cost={checkpoint_cost_s}, mtbf={mtbf_s}")
    if checkpoint_cost_s == 0:
        return CheckpointPlan(0.0, 0, 0.0, mtbf_s, 0.0)

    ideal = math.sqrt(2 * checkpoint_cost_s * mtbf_s)
    steps = max(1, round(ideal / step_time_s))
    interval = steps * step_time_s
    overhead = checkpoint_overhead(interval, checkpoint_cost_s, mtbf_s)
    warning = None
    if checkpoint_cost_s >= mtbf_s:
        warning = (f"checkpoint cost ({checkpoint_cost_s}s) is not small against MTBF "
                   f"({mtbf_s}s); the quadratic overhead model is outside its regime")
    return CheckpointPlan(interval, steps, checkpoint_cost_s, mtbf_s, overhead, warning)
