"""Per-layer time, split-round latency, system latency and traffic volume."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from src.services.device_profile import DeviceProfile
from src.services.model_graph import (
    LayerProfile,
    ModelGraph,
    check_cut,
    cut_activation_bytes,
    device_param_bytes,
)


@dataclass(frozen=True)
class ExecutionContext:
    compute_flops_per_second: float
    io_bytes_per_second: float
    batch: int = 1
    training: bool = True

    def __post_init__(self) -> None:
        if not self.compute_flops_per_second > 0 or not self.io_bytes_per_second > 0:
            raise ValueError("execution rates must be > 0")
        if int(self.batch) != self.batch or self.batch < 1:
            raise ValueError(f"batch must be a positive integer, got {self.batch}")


@dataclass(frozen=True)
class SplitLatencyBreakdown:
    device_compute_seconds: float
    transfer_seconds: float
    server_compute_seconds: float

    @property
    def total_seconds(self) -> float:
        return self.device_compute_seconds + self.transfer_seconds + self.server_compute_seconds


def _compute_multiplier(graph: ModelGraph, ctx: ExecutionContext) -> float:
    return 1.0 + (graph.backward_flops_factor if ctx.training else 0.0)


def layer_time(layer: LayerProfile, graph: ModelGraph, ctx: ExecutionContext) -> float:
    """Fetch inputs, compute, write output."""
    if layer.id > graph.depth or graph.layers[layer.id - 1] != layer:
        raise ValueError(f"layer {layer.id} does not belong to graph {graph.name!r}")
    read = ctx.batch * graph.predecessor_activation_bytes[layer.id - 1] / ctx.io_bytes_per_second
    compute = ctx.batch * layer.flops_forward * _compute_multiplier(graph, ctx) / ctx.compute_flops_per_second
    write = ctx.batch * layer.activation_bytes / ctx.io_bytes_per_second
    return float(read + compute + write)


def split_round_latency(
    graph: ModelGraph,
    cut: int,
    device: DeviceProfile,
    server_ctx: ExecutionContext,
    batch: int,
    u_split: bool = True,
    link_bytes_per_second: float | None = None,
) -> SplitLatencyBreakdown:
    """One training iteration split at ``cut``: device layers, crossing, server layers."""
    check_cut(graph, cut)
    device_ctx = ExecutionContext(
        device.flops_per_second, device.local_io_bytes_per_second, batch, server_ctx.training
    )
    server_ctx = replace(server_ctx, batch=batch)
    device_seconds = sum(layer_time(layer, graph, device_ctx) for layer in graph.layers[:cut])
    server_seconds = sum(layer_time(layer, graph, server_ctx) for layer in graph.layers[cut:])
    transfer = 0.0
    if cut < graph.depth:
        link = link_bytes_per_second or device.uplink_bytes_per_second
        transfer = cut_activation_bytes(graph, cut, batch) * (2 if u_split else 1) / link
    return SplitLatencyBreakdown(float(device_seconds), float(transfer), float(server_seconds))


def system_latency(per_device_latencies: Sequence[float]) -> float:
    if len(per_device_latencies) == 0:
        raise ValueError("system latency needs at least one participant")
    return float(max(per_device_latencies))


def round_comm_bytes(
    graph: ModelGraph,
    cut: int,
    batch: int,
    iterations: int,
    u_split: bool = True,
    model_upload: bool = True,
) -> float:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    per_iteration = 0.0
    if cut < graph.depth:
        per_iteration = cut_activation_bytes(graph, cut, batch) * (2 if u_split else 1)
    upload = device_param_bytes(graph, cut) if model_upload else 0.0
    return float(iterations * per_iteration + upload)


def latency_table(
    graph: ModelGraph,
    devices: Sequence[DeviceProfile],
    server_ctx: ExecutionContext,
    batch: int,
    u_split: bool,
    links: Sequence[float] | np.ndarray,
) -> np.ndarray:
    """Per-iteration split latency for every (device, cut), shape (N, V)."""
    mult = _compute_multiplier(graph, server_ctx)
    flops = batch * graph.flops_forward * mult
    io = batch * (graph.predecessor_activation_bytes + graph.activation_bytes)
    cum_flops = np.cumsum(flops)
    cum_io = np.cumsum(io)
    speed = np.array([d.flops_per_second for d in devices], dtype=float)[:, None]
    local_io = np.array([d.local_io_bytes_per_second for d in devices], dtype=float)[:, None]
    links = np.asarray(links, dtype=float)[:, None]

    device_part = cum_flops[None, :] / speed + cum_io[None, :] / local_io
    server_part = (
        (cum_flops[-1] - cum_flops) / server_ctx.compute_flops_per_second
        + (cum_io[-1] - cum_io) / server_ctx.io_bytes_per_second
    )
    server_part[-1] = 0.0
    crossing = batch * graph.activation_bytes * (2 if u_split else 1)
    crossing[-1] = 0.0
    return device_part + server_part[None, :] + crossing[None, :] / links
