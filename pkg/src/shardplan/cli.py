"""Configuration parsing and subcommand dispatch.

Configs are strict JSON documents: unknown keys are rejected (with a
best-effort line number), defaults are applied and recorded, and identical
config + profile inputs produce byte-identical JSON reports.

Exit codes: 0 ok, 2 config error, 3 infeasible plan, 4 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import __version__, analysis, hw_cost, planner, simulator
from .analysis import OptimizerSpec
from .errors import ConfigError, InfeasibleError, ShardPlanError
from .mesh import LogicalMesh, data_parallel_io_specs, megatron_block_constraints, propagate
from .model_ir import ModelGraph, TransformerConfig, build_decoder_only

SUBCOMMANDS = ("analyze", "shard", "simulate", "compare", "capacity", "checkpoint")

_MODEL_KEYS = {"hidden", "layers", "heads", "ffn_hidden", "vocab", "seq_len",
               "batch", "dtype", "path"}
_TOP_KEYS = {"model", "mesh", "profile", "profile_overrides", "strategy",
             "micro_batches", "dp", "tp", "stages", "capacity", "checkpoint"}
_CAPACITY_KEYS = {"rows", "hbm_bytes_per_core"}
_CHECKPOINT_KEYS = {"step_time_s", "checkpoint_cost_s", "mtbf_s"}
_PROFILE_KEYS = {"peak_flops_per_core", "cores_per_slice", "hbm_bytes_per_core",
                 "link_bandwidth", "link_latency", "mfu", "coordination_overhead_s"}
_STRATEGIES = ("pipeline", "tensor", "combined")


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def _check_keys(obj: dict, allowed: set[str], context: str, text: str) -> None:
    for key in obj:
        if key not in allowed:
            line = _line_of(text, key)
            where = f" (line {line})" if line else ""
            raise ConfigError(f"unknown key {key!r} in {context}{where}")


@dataclasses.dataclass
class ExperimentConfig:
    model_cfg: TransformerConfig | None
    model_path: str | None
    mesh_axes: list[tuple[str, int]] | None
    profile: str
    profile_overrides: dict
    strategy: str | None
    micro_batches: int | None
    dp: int | None
    tp: int | None
    stages: int | None
    capacity: dict | None
    checkpoint: dict | None
    defaults: dict          # defaults that were filled in during parsing
    raw: dict               # document as given, echoed into reports

    def to_json(self) -> dict:
        """Fully defaulted document; parsing it again is a fixed point."""
        doc: dict = {}
        if self.model_path is not None:
            doc["model"] = {"path": self.model_path}
        elif self.model_cfg is not None:
            c = self.model_cfg
            doc["model"] = {"hidden": c.hidden, "layers": c.layers, "heads": c.heads,
                            "ffn_hidden": c.ffn_hidden, "vocab": c.vocab,
                            "seq_len": c.seq_len, "batch": c.batch, "dtype": c.dtype}
        if self.mesh_axes is not None:
            doc["mesh"] = [[n, s] for n, s in self.mesh_axes]
        doc["profile"] = self.profile
        if self.profile_overrides:
            doc["profile_overrides"] = dict(self.profile_overrides)
        if self.strategy is not None:
            doc["strategy"] = self.strategy
        for key in ("micro_batches", "dp", "tp", "stages", "capacity", "checkpoint"):
            value = getattr(self, key)
            if value is not None:
                doc[key] = value
        return doc


def parse_config(text: str) -> ExperimentConfig:
    """Strictly parse a JSON experiment config, applying recorded defaults."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config: {exc.msg} (line {exc.lineno}, column {exc.colno})")
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "config", text)

    defaults: dict = {}
    model_cfg = model_path = None
    if "model" in doc:
        model = doc["model"]
        if not isinstance(model, dict):
            raise ConfigError("'model' must be an object")
        _check_keys(model, _MODEL_KEYS, "model", text)
        if "path" in model:
            if len(model) > 1:
                raise ConfigError("'model' must give either a path or inline dimensions, not both")
            model_path = model["path"]
        else:
            for req in ("hidden", "layers", "heads"):
                if req not in model:
                    raise ConfigError(f"model is missing required key {req!r}")
            for key, value in (("ffn_hidden", 4 * model["hidden"]), ("vocab", 32000),
                               ("seq_len", 2048), ("batch", 1), ("dtype", "float32")):
                if key not in model:
                    defaults[f"model.{key}"] = value
            try:
                model_cfg = TransformerConfig(**model)
            except (TypeError, ShardPlanError) as exc:
                raise ConfigError(f"invalid model config: {exc}")

    mesh_axes = None
    if "mesh" in doc:
        try:
            mesh_axes = [(str(n), int(s)) for n, s in doc["mesh"]]
            LogicalMesh(tuple(mesh_axes))  # validates
        except (TypeError, ValueError, ShardPlanError) as exc:
            raise ConfigError(f"invalid mesh: {exc}")

    profile = doc.get("profile", "v4")
    if "profile" not in doc:
        defaults["profile"] = profile
    overrides = doc.get("profile_overrides", {})
    if overrides:
        _check_keys(overrides, _PROFILE_KEYS, "profile_overrides", text)

    strategy = doc.get("strategy")
    if strategy is not None and strategy not in _STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {_STRATEGIES}")

    micro_batches = doc.get("micro_batches")
    dp, tp, stages = doc.get("dp"), doc.get("tp"), doc.get("stages")
    if strategy == "pipeline":
        if dp is not None or tp is not None:
            raise ConfigError("strategy 'pipeline' does not take dp/tp parameters")
        if micro_batches is None:
            defaults["micro_batches"] = "sweep"
    elif strategy == "tensor":
        if dp is not None or stages is not None or micro_batches is not None:
            raise ConfigError("strategy 'tensor' only takes the tp parameter")
    elif strategy == "combined":
        if dp is None or tp is None:
            raise ConfigError("strategy 'combined' requires both dp and tp")

    capacity = doc.get("capacity")
    if capacity is not None:
        _check_keys(capacity, _CAPACITY_KEYS, "capacity", text)
    checkpoint = doc.get("checkpoint")
    if checkpoint is not None:
        _check_keys(checkpoint, _CHECKPOINT_KEYS, "checkpoint", text)
        missing = _CHECKPOINT_KEYS - set(checkpoint)
        if missing:
            raise ConfigError(f"checkpoint section is missing {sorted(missing)}")

    return ExperimentConfig(
        model_cfg=model_cfg, model_path=model_path, mesh_axes=mesh_axes,
        profile=profile, profile_overrides=dict(overrides), strategy=strategy,
        micro_batches=micro_batches, dp=dp, tp=tp, stages=stages,
        capacity=capacity, checkpoint=checkpoint, defaults=defaults, raw=doc)


def _resolve_profile(cfg: ExperimentConfig, override: str | None) -> hw_cost.HardwareProfile:
    profile = hw_cost.load_profile(override or cfg.profile)
    if cfg.profile_overrides:
        profile = dataclasses.replace(profile, **cfg.profile_overrides)
    return profile


def _resolve_graph(cfg: ExperimentConfig) -> ModelGraph:
    if cfg.model_path:
        with open(cfg.model_path) as f:
            return ModelGraph.loads(f.read())
    if cfg.model_cfg is None:
        raise ConfigError("this subcommand requires a 'model' section")
    return build_decoder_only(cfg.model_cfg)


def _cmd_analyze(cfg, profile, fmt, out_dir):
    g = _resolve_graph(cfg)
    params = analysis.param_count(g)
    mem = analysis.memory_bytes(params, "float32", OptimizerSpec.adam(), grads=True)
    mem = analysis.MemoryBreakdown.build(
        mem.param_bytes, mem.grad_bytes, mem.optimizer_bytes,
        analysis.activation_bytes(g, "none"))
    return {
        "param_count": params,
        "memory": mem.to_json(),
        "flops_per_step": analysis.flops_per_step(g),
        "activation_bytes_per_block_remat": analysis.activation_bytes(g, "per_block"),
    }


def _cmd_shard(cfg, profile, fmt, out_dir):
    g = _resolve_graph(cfg)
    if cfg.mesh_axes is None:
        raise ConfigError("'shard' requires a mesh section")
    mesh = LogicalMesh(tuple(cfg.mesh_axes))
    model_axis = "model" if "model" in mesh.axis_names else mesh.axes[-1][0]
    data_axis = "data" if "data" in mesh.axis_names else None
    assignment = propagate(g, mesh, data_parallel_io_specs(g, data_axis),
                           megatron_block_constraints(g, mesh, model_axis))
    return assignment.to_json()


def _cmd_simulate(cfg, profile, fmt, out_dir):
    g = _resolve_graph(cfg)
    if cfg.strategy is None:
        raise ConfigError("'simulate' requires a strategy")
    if cfg.strategy == "tensor":
        tp = cfg.tp or profile.cores_per_slice
        mesh, assignment = simulator.tensor_parallel_assignment(g, tp)
        timeline = simulator.simulate_tensor_parallel(g, mesh, assignment, profile)
        chosen = {"tp": tp}
    elif cfg.strategy == "pipeline":
        n_stages = cfg.stages or min(profile.cores_per_slice, len(g.nodes))
        stages = simulator.balance_stages(g, n_stages)
        batch = simulator._graph_batch(g)
        sweep = [cfg.micro_batches] if cfg.micro_batches else planner._divisors(batch)
        best = None
        for m in sweep:
            t = simulator.simulate_pipeline(g, stages, m, profile)
            if best is None or t.step_time < best[0].step_time:
                best = (t, m)
        timeline, best_m = best
        chosen = {"stages": n_stages, "micro_batches": best_m}
    else:
        stages = simulator.balance_stages(g, cfg.stages) if cfg.stages else None
        timeline = simulator.simulate_combined(
            g, cfg.dp, cfg.tp, profile, pp_stages=stages,
            micro_batches=cfg.micro_batches or 1)
        chosen = {"dp": cfg.dp, "tp": cfg.tp, "stages": cfg.stages}

    if fmt == "svg" or out_dir:
        svg_path = os.path.join(out_dir or ".", "timeline.svg")
        with open(svg_path, "w") as f:
            f.write(timeline.to_svg())
    return {"strategy": cfg.strategy, "parameters": chosen,
            "bubble_fraction": timeline.bubble_fraction, **timeline.to_json()}


def _cmd_compare(cfg, profile, fmt, out_dir):
    g = _resolve_graph(cfg)
    sweep = [cfg.micro_batches] if cfg.micro_batches else None
    return planner.compare_parallelism(g, profile, sweep).to_json()


def _cmd_capacity(cfg, profile, fmt, out_dir):
    section = cfg.capacity or {}
    rows = [tuple(r) for r in section.get("rows", planner.REFERENCE_ROWS)]
    results = planner.capacity_table(
        rows, hbm_bytes_per_core=section.get("hbm_bytes_per_core"))
    return {"rows": [r.to_json() for r in results]}


def _cmd_checkpoint(cfg, profile, fmt, out_dir):
    if cfg.checkpoint is None:
        raise ConfigError("'checkpoint' requires a checkpoint section")
    plan = planner.checkpoint_interval(
        cfg.checkpoint["step_time_s"], cfg.checkpoint["checkpoint_cost_s"],
        cfg.checkpoint["mtbf_s"])
    return plan.to_json()


_DISPATCH = {
    "analyze": _cmd_analyze,
    "shard": _cmd_shard,
    "simulate": _cmd_simulate,
    "compare": _cmd_compare,
    "capacity": _cmd_capacity,
    "checkpoint": _cmd_checkpoint,
}


def _capacity_text(result: dict) -> str:
    lines = [f"{'slice':<10}{'hidden':>8}{'layers':>8}{'params':>12}{'step_s':>10}"
             f"{'ref_params':>12}{'residual':>10}"]
    for row in result["rows"]:
        a = row["assumptions"]
        ref = a.get("reference_params")
        resid = a.get("params_residual")
        step = row["predicted_step_time"]
        lines.append(
            f"{row['slice_name']:<10}{row['hidden']:>8}{row['max_layers']:>8}"
            f"{row['max_params']:>12.3e}{step if step is not None else float('nan'):>10.3f}"
            f"{ref if ref is not None else float('nan'):>12.3e}"
            f"{(f'{resid:+.1%}' if resid is not None else '-'):>10}")
    return "\n".join(lines)


def run(subcommand: str, cfg: ExperimentConfig, out_dir: str = ".",
        fmt: str = "json", profile_override: str | None = None) -> int:
    """Dispatch a subcommand; write the report; return the exit code."""
    try:
        if subcommand not in _DISPATCH:
            raise ConfigError(f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}")
        profile = _resolve_profile(cfg, profile_override)
        result = _DISPATCH[subcommand](cfg, profile, fmt, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3
    except ShardPlanError as exc:
        print(f"error in {subcommand}: {exc}", file=sys.stderr)
        return 4

    report = {"tool_version": __version__, "config_echo": cfg.raw, "result": result}
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, f"{subcommand}.json")
    with open(report_path, "w") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")

    if fmt == "text" and subcommand == "capacity":
        print(_capacity_text(result))
    elif fmt == "text":
        for key, value in result.items():
            if not isinstance(value, (list, dict)):
                print(f"{key}: {value}")
    else:
        print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="shardplan",
        description="Planner and schedule simulator for distributed transformer training")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="path to a JSON experiment config")
    parser.add_argument("--profile", default=None, help="profile name or JSON path override")
    parser.add_argument("--out", default=".", help="directory for report artifacts")
    parser.add_argument("--format", default="json", choices=("json", "text", "svg"))
    parser.add_argument("--seed", type=int, default=0,
                        help="reserved; all current operations are deterministic")
    args = parser.parse_args(argv)

    try:
        with open(args.config) as f:
            cfg = parse_config(f.read())
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return run(args.subcommand, cfg, out_dir=args.out, fmt=args.format,
               profile_override=args.profile)


if __name__ == "__main__":
    sys.exit(main())
