"""
Cost-aware recomputation planning for the device-side layer chain.

The chain is cut into checkpoint segments. Each segment is either recomputed
once keeping its intermediates (speed-centric) or recomputed prefix by prefix
during backprop (memory-centric). The planner picks speed-centric whenever
its memory cost fits under the cap.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from src.services.model_graph import (
    ModelGraph,
    check_cut,
    device_side_memory,
    parameter_state_bytes,
)


class Strategy(str, Enum):
    SPEED = "speed_centric"
    MEMORY = "memory_centric"


class DeviceStrategy(str, Enum):
    NONE = "none"
    SPEED = "speed"
    MEMORY = "memory"
    COST_AWARE = "cost_aware"


class InfeasiblePlanError(ValueError):
    def __init__(self, layer_id: int, required_bytes: float, cap_bytes: float):
        self.layer_id = layer_id
        self.required_bytes = required_bytes
        self.cap_bytes = cap_bytes
        super().__init__(
            f"layer {layer_id} needs {required_bytes:.0f} B but only {cap_bytes:.0f} B are available"
        )


@dataclass(frozen=True)
class SegmentSpec:
    start_layer: int
    end_layer: int
    forward_bytes: tuple[float, ...]
    backward_bytes: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.start_layer > self.end_layer:
            raise ValueError("segment start must not exceed end")
        size = self.end_layer - self.start_layer + 1
        object.__setattr__(self, "forward_bytes", tuple(float(x) for x in self.forward_bytes))
        object.__setattr__(self, "backward_bytes", tuple(float(x) for x in self.backward_bytes))
        if len(self.forward_bytes) != size or len(self.backward_bytes) != size:
            raise ValueError(f"segment {self.start_layer}..{self.end_layer} needs {size} memory entries")
        if min(self.forward_bytes) < 0 or min(self.backward_bytes) < 0:
            raise ValueError("layer memories must be >= 0")

    @property
    def size(self) -> int:
        return self.end_layer - self.start_layer + 1

    @property
    def layer_ids(self) -> range:
        return range(self.start_layer, self.end_layer + 1)


@dataclass(frozen=True)
class PlannedSegment:
    segment: SegmentSpec
    strategy: Strategy
    peak_bytes: float
    extra_forward_flops: float


@dataclass(frozen=True)
class RecomputationPlan:
    segments: tuple[PlannedSegment, ...]
    cap_bytes: float

    @property
    def peak_memory_bytes(self) -> float:
        return max(s.peak_bytes for s in self.segments)

    @property
    def extra_forward_flops(self) -> float:
        return sum(s.extra_forward_flops for s in self.segments)

    def count(self, strategy: Strategy) -> int:
        return sum(1 for s in self.segments if s.strategy is strategy)


@dataclass(frozen=True)
class DeviceMemoryPlan:
    """Memory decision for one device at one cut."""

    strategy: DeviceStrategy
    retained: bool
    plan: RecomputationPlan | None
    static_bytes: float
    activation_peak_bytes: float
    extra_forward_flops: float
    budget_bytes: float

    @property
    def peak_memory_bytes(self) -> float:
        return self.static_bytes + self.activation_peak_bytes

    @property
    def fits(self) -> bool:
        return self.peak_memory_bytes <= self.budget_bytes

    def count(self, strategy: Strategy) -> int:
        return self.plan.count(strategy) if self.plan else 0


def _layer_peak(segment: SegmentSpec) -> tuple[float, int]:
    best, where = -1.0, segment.start_layer
    for layer_id, f, b in zip(segment.layer_ids, segment.forward_bytes, segment.backward_bytes):
        if max(f, b) > best:
            best, where = max(f, b), layer_id
    return best, where


def peak_layer_memory(segments: Sequence[SegmentSpec]) -> float:
    if not segments:
        raise ValueError("no segments to measure")
    return max(_layer_peak(s)[0] for s in segments)


def speed_centric_cost(segment: SegmentSpec) -> float:
    return sum(segment.forward_bytes) + segment.backward_bytes[-1]


def memory_centric_cost(segment: SegmentSpec) -> float:
    return _layer_peak(segment)[0]


def _segment_flops(chain: Sequence[SegmentSpec], flops: Sequence[float]) -> list[list[float]]:
    total = sum(s.size for s in chain)
    if len(flops) != total:
        raise ValueError(f"expected {total} per-layer FLOP counts, got {len(flops)}")
    out, pos = [], 0
    for s in chain:
        out.append([float(x) for x in flops[pos:pos + s.size]])
        pos += s.size
    return out


def _plan_segment(segment: SegmentSpec, flops: list[float], strategy: Strategy) -> PlannedSegment:
    n = len(flops)
    floor = memory_centric_cost(segment)
    if strategy is Strategy.SPEED:
        # one forward replay up to the last layer
        overhead = sum(flops[: n - 1])
        peak = max(speed_centric_cost(segment), floor)
    else:
        # layer k replays the prefix 1..k-1
        overhead = sum((n - i) * f for i, f in enumerate(flops[: n - 1], start=1))
        peak = floor
    return PlannedSegment(segment, strategy, peak, overhead)


def plan_recomputation(
    device_chain: Sequence[SegmentSpec],
    flops: Sequence[float],
    l_peak_cap: float,
) -> RecomputationPlan:
    if not device_chain:
        raise ValueError("device chain is empty")
    per_segment = _segment_flops(device_chain, flops)
    for segment in device_chain:
        need, layer_id = _layer_peak(segment)
        if need > l_peak_cap:
            raise InfeasiblePlanError(layer_id, need, l_peak_cap)
    planned = []
    for segment, seg_flops in zip(device_chain, per_segment):
        strategy = Strategy.SPEED if speed_centric_cost(segment) <= l_peak_cap else Strategy.MEMORY
        planned.append(_plan_segment(segment, seg_flops, strategy))
    return RecomputationPlan(tuple(planned), float(l_peak_cap))


def uniform_plan(
    device_chain: Sequence[SegmentSpec],
    flops: Sequence[float],
    strategy: Strategy,
) -> RecomputationPlan:
    """Same strategy for every segment, no cap."""
    if not device_chain:
        raise ValueError("device chain is empty")
    per_segment = _segment_flops(device_chain, flops)
    planned = tuple(_plan_segment(s, f, strategy) for s, f in zip(device_chain, per_segment))
    return RecomputationPlan(planned, math.inf)


def default_segment_size(cut: int) -> int:
    return max(1, math.ceil(math.sqrt(cut)))


def build_device_chain(
    graph: ModelGraph,
    cut: int,
    batch: int,
    segment_size: int | None = None,
) -> tuple[list[SegmentSpec], list[float]]:
    """Segments over layers 1..cut and their per-batch forward FLOPs."""
    check_cut(graph, cut)
    size = segment_size or default_segment_size(cut)
    if size < 1:
        raise ValueError("segment_size must be >= 1")
    act = graph.activation_bytes[:cut] * batch
    backward = act * graph.backward_memory_fraction
    forward = act - backward
    chain = []
    for start in range(1, cut + 1, size):
        end = min(cut, start + size - 1)
        chain.append(SegmentSpec(start, end, tuple(forward[start - 1:end]), tuple(backward[start - 1:end])))
    flops = [float(x) for x in graph.flops_forward[:cut] * batch]
    return chain, flops


def minimum_device_memory(graph: ModelGraph, cut: int, batch: int, segment_size: int | None = None) -> float:
    chain, _ = build_device_chain(graph, cut, batch, segment_size)
    return parameter_state_bytes(graph, cut) + peak_layer_memory(chain)


def replan_on_budget_change(
    current_plan: RecomputationPlan | None,
    budget_bytes: float,
    graph: ModelGraph,
    cut: int,
    batch: int,
    segment_size: int | None = None,
) -> RecomputationPlan:
    cap = budget_bytes - parameter_state_bytes(graph, cut)
    if current_plan is not None and current_plan.cap_bytes == cap:
        return current_plan
    chain, flops = build_device_chain(graph, cut, batch, segment_size)
    plan = plan_recomputation(chain, flops, cap)
    if current_plan is not None:
        flips = sum(
            1 for old, new in zip(current_plan.segments, plan.segments) if old.strategy is not new.strategy
        )
        if flips:
            logging.debug("replan cut=%s budget=%.0f: %s segment(s) changed strategy", cut, budget_bytes, flips)
    return plan


def plan_device_memory(
    graph: ModelGraph,
    cut: int,
    batch: int,
    budget_bytes: float,
    strategy: DeviceStrategy | str = DeviceStrategy.COST_AWARE,
    segment_size: int | None = None,
    current_plan: RecomputationPlan | None = None,
) -> DeviceMemoryPlan:
    """
    Decide how a device holds its training state for one round.

    If the retained state (all activations kept) fits the budget, every
    strategy keeps it and pays no recompute. Otherwise ``speed`` and
    ``memory`` apply their uniform plan regardless of the budget, and
    ``cost_aware`` plans under the cap (raising InfeasiblePlanError when even
    the single-layer peak does not fit).
    """
    strategy = DeviceStrategy(strategy)
    static = parameter_state_bytes(graph, cut)
    retained = device_side_memory(graph, cut, batch)
    if strategy is DeviceStrategy.NONE or retained <= budget_bytes:
        return DeviceMemoryPlan(strategy, True, None, static, retained - static, 0.0, budget_bytes)
    if strategy is DeviceStrategy.COST_AWARE:
        plan = replan_on_budget_change(current_plan, budget_bytes, graph, cut, batch, segment_size)
    else:
        chain, flops = build_device_chain(graph, cut, batch, segment_size)
        uniform = Strategy.SPEED if strategy is DeviceStrategy.SPEED else Strategy.MEMORY
        plan = uniform_plan(chain, flops, uniform)
    return DeviceMemoryPlan(
        strategy, False, plan, static, plan.peak_memory_bytes, plan.extra_forward_flops, budget_bytes
    )
