"""Hardware profiles and analytic cost primitives.

Peak per-core FLOP rates for the v4 (275 TFLOPS) and v3 (122 TFLOPS)
generations are the only measured constants here. Memory size, link
bandwidth, link latency, and achievable-FLOP fraction are uncalibrated
placeholders: every capacity or step-time result echoes them, and the CLI
accepts overrides.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, replace
from importlib import resources

from .errors import ConfigError, ValidationError

_SLICE_RE = re.compile(r"^(?P<base>[A-Za-z][\w]*?)-(?P<cores>\d+)$")


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    peak_flops_per_core: float
    cores_per_slice: int
    hbm_bytes_per_core: float
    link_bandwidth: float          # bytes/s per core
    link_latency: float            # seconds per collective hop
    mfu: float                     # achievable fraction of peak, (0, 1]
    coordination_overhead_s: float = 0.0  # fixed per-step host coordination cost

    def __post_init__(self):
        positive = ("peak_flops_per_core", "cores_per_slice", "hbm_bytes_per_core",
                    "link_bandwidth", "mfu")
        for f in positive:
            if getattr(self, f) <= 0:
                raise ValidationError(f"profile {self.name!r}: {f} must be positive")
        if self.link_latency < 0 or self.coordination_overhead_s < 0:
            raise ValidationError(f"profile {self.name!r}: latencies must be >= 0")
        if self.mfu > 1:
            raise ValidationError(f"profile {self.name!r}: mfu must be <= 1, got {self.mfu}")

    def with_cores(self, cores: int) -> "HardwareProfile":
        return replace(self, cores_per_slice=cores, name=f"{self.name.split('-')[0]}-{cores}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "peak_flops_per_core": self.peak_flops_per_core,
            "cores_per_slice": self.cores_per_slice,
            "hbm_bytes_per_core": self.hbm_bytes_per_core,
            "link_bandwidth": self.link_bandwidth,
            "link_latency": self.link_latency,
            "mfu": self.mfu,
            "coordination_overhead_s": self.coordination_overhead_s,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "HardwareProfile":
        required = {"name", "peak_flops_per_core", "cores_per_slice", "hbm_bytes_per_core",
                    "link_bandwidth", "link_latency", "mfu"}
        missing = required - set(doc)
        if missing:
            raise ConfigError(f"profile document missing fields: {sorted(missing)}")
        unknown = set(doc) - required - {"coordination_overhead_s"}
        if unknown:
            raise ConfigError(f"profile document has unknown fields: {sorted(unknown)}")
        return cls(**doc)


def _builtin_profiles() -> dict[str, dict]:
    with resources.files("shardplan").joinpath("data/profiles.json").open() as f:
        return {p["name"]: p for p in json.load(f)}


def load_profile(name_or_path: str, cores: int | None = None) -> HardwareProfile:
    """Load a profile by built-in name ("v4", "v3", or "v4-32" style, where the
    suffix sets cores_per_slice) or from a JSON file path."""
    if os.path.exists(name_or_path):
        with open(name_or_path) as f:
            profile = HardwareProfile.from_json(json.load(f))
        return profile.with_cores(cores) if cores else profile

    builtin = _builtin_profiles()
    name = name_or_path
    m = _SLICE_RE.match(name)
    if name not in builtin and m and m.group("base") in builtin:
        name, cores = m.group("base"), int(m.group("cores"))
    if name not in builtin:
        raise ConfigError(
            f"unknown profile {name_or_path!r}; built-ins: {sorted(builtin)} (a '-N' suffix sets the core count)")
    profile = HardwareProfile.from_json(builtin[name])
    return profile.with_cores(cores) if cores else profile


@dataclass(frozen=True)
class CostEstimate:
    """Compute/communication split with its composition rule recorded."""

    compute_s: float
    comm_s: float
    total_s: float
    overlap: bool
    breakdown: tuple[tuple[str, str, float], ...] = ()  # (site, kind, seconds)

    @classmethod
    def combine(cls, compute_s: float, comm_s: float, overlap: bool = False,
                breakdown: tuple[tuple[str, str, float], ...] = ()) -> "CostEstimate":
        if compute_s < 0 or comm_s < 0:
            raise ValidationError("cost components must be >= 0")
        total = max(compute_s, comm_s) if overlap else compute_s + comm_s
        return cls(compute_s, comm_s, total, overlap, breakdown)


def matmul_time(flops: float, p: HardwareProfile) -> float:
    """Seconds to execute a FLOP count at the profile's achievable rate."""
    if flops < 0:
        raise ValidationError(f"flops must be >= 0, got {flops}")
    return flops / (p.peak_flops_per_core * p.mfu)


def allreduce_time(nbytes: float, n: int, p: HardwareProfile) -> float:
    """Ring all-reduce: 2*(n-1)/n bandwidth passes plus 2*(n-1) latency hops."""
    if n < 1:
        raise ValidationError(f"device count must be >= 1, got {n}")
    if n == 1:
        return 0.0
    return 2 * nbytes * (n - 1) / (n * p.link_bandwidth) + 2 * (n - 1) * p.link_latency


def collective_time(kind: str, nbytes: float, n: int, p: HardwareProfile) -> float:
    """all_gather / reduce_scatter / all_to_all move half the all-reduce volume."""
    if n <= 1:
        return 0.0
    if kind == "all_reduce":
        return allreduce_time(nbytes, n, p)
    if kind in ("all_gather", "reduce_scatter", "all_to_all"):
        return nbytes * (n - 1) / (n * p.link_bandwidth) + (n - 1) * p.link_latency
    raise ValidationError(f"unknown collective kind {kind!r}")


def speedup_from_comm_fraction(c: float, flops_ratio: float) -> float:
    """Speedup model: compute scales by the FLOP ratio, communication does not."""
    return 1.0 / ((1.0 - c) / flops_ratio + c)


def infer_comm_fraction(observed_speedup: float, flops_ratio: float) -> float:
    """Solve the speedup model for the communication fraction c in [0, 1].

    1/s = (1-c)/r + c, assuming interconnect time unchanged across the two
    hardware generations.
    """
    if flops_ratio <= 1:
        raise ValidationError(f"flops_ratio must exceed 1, got {flops_ratio}")
    if observed_speedup < 1:
        raise ValidationError(f"observed speedup must be >= 1, got {observed_speedup}")
    if observed_speedup > flops_ratio:
        raise ValidationError(
            f"observed speedup {observed_speedup} exceeds the FLOP ratio {flops_ratio}; "
            "constant-communication model cannot explain it")
    return (1.0 / observed_speedup - 1.0 / flops_ratio) / (1.0 - 1.0 / flops_ratio)


def combined_speedup(phase_speedups: list[float], phase_weights: list[float]) -> float:
    """Total speedup when phases with given baseline time weights each speed up
    by their own factor."""
    if len(phase_speedups) != len(phase_weights):
        raise ValidationError("phase_speedups and phase_weights must have equal length")
    total_w = sum(phase_weights)
    if total_w <= 0:
        raise ValidationError("phase weights must sum to a positive value")
    return total_w / sum(w / s for s, w in zip(phase_speedups, phase_weights))


# Paper-reported peak rates, used by tests and the Fig 4 decomposition.
V4_PEAK_FLOPS = 275e12
V3_PEAK_FLOPS = 122e12
V4_V3_FLOPS_RATIO = V4_PEAK_FLOPS / V3_PEAK_FLOPS


def zero_comm(p: HardwareProfile) -> HardwareProfile:
    """Variant of a profile where communication is free (infinite bandwidth,
    zero latency). Useful for isolating schedule structure."""
    return replace(p, link_bandwidth=math.inf, link_latency=0.0)
