"""Layer graph with per-layer costs and the training/inference memory model."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError


class LayerProfile(BaseModel):
    """Per-layer costs. Byte and FLOP counts are per sample except params."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    id: int = Field(ge=1)
    name: str = ""
    flops_forward: float = Field(ge=0)
    param_bytes: float = Field(ge=0)
    activation_bytes: float = Field(ge=0)
    grad_state_multiplier: float = Field(default=1.0, ge=0)


class ProfileFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = ""
    backward_flops_factor: float = Field(default=2.0, ge=0)
    backward_memory_fraction: float = Field(default=0.5, ge=0, le=1)
    reference_cut: int | None = Field(default=None, ge=1)
    edges: dict[int, list[int]] = Field(default_factory=dict)
    layers: list[LayerProfile]


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerProfile, ...]
    edges: Mapping[int, tuple[int, ...]] = field(default_factory=dict)
    backward_flops_factor: float = 2.0
    backward_memory_fraction: float = 0.5
    name: str = ""
    reference_cut: int | None = None

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("model graph needs at least one layer")
        for expected, layer in enumerate(layers, start=1):
            if layer.id != expected:
                raise ValueError(f"layer ids must be contiguous from 1, got {layer.id} at position {expected}")
        depth = len(layers)
        if self.backward_flops_factor < 0:
            raise ValueError("backward_flops_factor must be >= 0")
        if not 0 <= self.backward_memory_fraction <= 1:
            raise ValueError("backward_memory_fraction must be in [0, 1]")

        preds: dict[int, tuple[int, ...]] = {}
        for v in range(1, depth + 1):
            if v in self.edges:
                ps = tuple(sorted(set(int(p) for p in self.edges[v])))
            else:
                ps = (v - 1,) if v > 1 else ()
            for p in ps:
                # ids are a topological order, which rules out cycles
                if not 1 <= p < v:
                    raise ValueError(f"layer {v}: predecessor {p} must be an earlier layer")
            if v > 1 and not ps:
                raise ValueError(f"layer {v} has no predecessor")
            preds[v] = ps
        unknown = set(self.edges) - set(preds)
        if unknown:
            raise ValueError(f"edges reference unknown layers: {sorted(unknown)}")
        if self.reference_cut is not None and not 1 <= self.reference_cut <= depth:
            raise ValueError(f"reference_cut {self.reference_cut} out of range 1..{depth}")

        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "edges", preds)

        act = np.array([layer.activation_bytes for layer in layers], dtype=float)
        params = np.array([layer.param_bytes for layer in layers], dtype=float)
        mult = np.array([layer.grad_state_multiplier for layer in layers], dtype=float)
        pred_act = np.array([sum(act[p - 1] for p in preds[v]) for v in range(1, depth + 1)], dtype=float)
        object.__setattr__(self, "_activation", act)
        object.__setattr__(self, "_params", params)
        object.__setattr__(self, "_state", params * (1.0 + mult))
        object.__setattr__(self, "_flops", np.array([layer.flops_forward for layer in layers], dtype=float))
        object.__setattr__(self, "_pred_activation", pred_act)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer(self, layer_id: int) -> LayerProfile:
        check_cut(self, layer_id)
        return self.layers[layer_id - 1]

    def predecessors(self, layer_id: int) -> tuple[int, ...]:
        return self.edges[layer_id]

    @property
    def activation_bytes(self) -> np.ndarray:
        return self._activation

    @property
    def param_bytes(self) -> np.ndarray:
        return self._params

    @property
    def state_bytes(self) -> np.ndarray:
        """Parameters plus gradient/optimizer state per layer."""
        return self._state

    @property
    def flops_forward(self) -> np.ndarray:
        return self._flops

    @property
    def predecessor_activation_bytes(self) -> np.ndarray:
        return self._pred_activation


def _check_batch(batch: int) -> None:
    if int(batch) != batch or batch < 1:
        raise ValueError(f"batch must be a positive integer, got {batch}")


def check_cut(graph: ModelGraph, cut: int) -> None:
    if int(cut) != cut or not 1 <= cut <= graph.depth:
        raise ValueError(f"cut {cut} out of range 1..{graph.depth}")


def inference_memory(graph: ModelGraph, batch: int) -> float:
    _check_batch(batch)
    return float(graph.param_bytes.sum() + batch * graph.activation_bytes.max())


def training_memory(graph: ModelGraph, batch: int) -> float:
    _check_batch(batch)
    return float(graph.state_bytes.sum() + batch * graph.activation_bytes.sum())


def parameter_state_bytes(graph: ModelGraph, cut: int) -> float:
    check_cut(graph, cut)
    return float(graph.state_bytes[:cut].sum())


def device_side_memory(graph: ModelGraph, cut: int, batch: int) -> float:
    """Training memory of layers 1..cut, the part a device must hold."""
    check_cut(graph, cut)
    _check_batch(batch)
    return float(graph.state_bytes[:cut].sum() + batch * graph.activation_bytes[:cut].sum())


def cut_activation_bytes(graph: ModelGraph, cut: int, batch: int) -> float:
    check_cut(graph, cut)
    _check_batch(batch)
    return float(batch * graph.activation_bytes[cut - 1])


def device_param_bytes(graph: ModelGraph, cut: int) -> float:
    check_cut(graph, cut)
    return float(graph.param_bytes[:cut].sum())


def graph_from_layers(
    layers: list[dict] | list[LayerProfile],
    edges: Mapping[int, list[int]] | None = None,
    **kwargs,
) -> ModelGraph:
    built = tuple(layer if isinstance(layer, LayerProfile) else LayerProfile(**layer) for layer in layers)
    return ModelGraph(layers=built, edges={int(k): tuple(v) for k, v in (edges or {}).items()}, **kwargs)


def load_model_graph(path: str | Path) -> ModelGraph:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: profile must be a mapping")
    try:
        parsed = ProfileFile.model_validate(raw)
    except ValidationError as e:
        raise ValueError(f"{path}: invalid model profile: {e}") from e
    return graph_from_layers(
        parsed.layers,
        parsed.edges,
        backward_flops_factor=parsed.backward_flops_factor,
        backward_memory_fraction=parsed.backward_memory_fraction,
        name=parsed.name or path.stem,
        reference_cut=parsed.reference_cut,
    )
