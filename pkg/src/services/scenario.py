"""Scenario documents: YAML on disk, pydantic models in memory."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.config import DATA_DIR

PolicyName = Literal[
    "fedavg", "fgc", "fga", "flp", "splitfl_static", "sft", "d_sft", "smd", "r_smd",
    "n_smd", "s_smd", "m_smd", "smartsplit", "tifl", "oort", "fedadapt",
]

MB = 1024 * 1024


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DeviceClassConfig(_Section):
    name: str
    flops_per_second: float = Field(gt=0)
    local_io_bytes_per_second: float = Field(gt=0)
    lan_bytes_per_second: float = Field(gt=0)
    wan_bytes_per_second: float = Field(gt=0)
    memory_budget_bytes: float = Field(ge=0)
    share: float = Field(default=1.0, gt=0)


def _default_classes() -> list[DeviceClassConfig]:
    rows = [
        ("low", 0.5e9, 2e9, 20 * MB, 1 * MB, 192 * MB),
        ("mid_low", 1.5e9, 4e9, 40 * MB, 2 * MB, 384 * MB),
        ("mid", 3e9, 6e9, 60 * MB, 3 * MB, 640 * MB),
        ("mid_high", 6e9, 8e9, 80 * MB, 4 * MB, 896 * MB),
        ("high", 10e9, 10e9, 100 * MB, 5 * MB, 1280 * MB),
    ]
    return [
        DeviceClassConfig(
            name=n, flops_per_second=f, local_io_bytes_per_second=io,
            lan_bytes_per_second=lan, wan_bytes_per_second=wan, memory_budget_bytes=mem,
        )
        for n, f, io, lan, wan, mem in rows
    ]


class ModelSection(_Section):
    profile: str = "profiles/lenet5.yaml"
    batch: int = Field(default=32, ge=1)


class FleetSection(_Section):
    devices: int = Field(default=100, ge=1)
    classes: int = Field(default=10, ge=2)
    samples_per_device: int = Field(default=600, ge=1)
    dirichlet: float = Field(default=0.1, gt=0)
    file: str | None = None
    mecs: int = Field(default=5, ge=1)
    aux_samples: int = Field(default=300, ge=1)
    device_classes: list[DeviceClassConfig] = Field(default_factory=_default_classes)


class BoSection(_Section):
    eval_budget: int = Field(default=60, ge=1)
    initial_design: int = Field(default=10, ge=1)
    candidates: int = Field(default=512, ge=2)
    refit_every: int = Field(default=10, ge=1)
    noise: float = Field(default=1e-6, ge=0)
    xi: float = Field(default=0.0, ge=0)
    warm_start: bool = True
    greedy_seed: bool = True
    penalty_weight: float = Field(default=1e3, gt=0)

    @model_validator(mode="after")
    def _budget_covers_design(self):
        if self.eval_budget < self.initial_design:
            raise ValueError("eval_budget must be >= initial_design")
        return self


class BaselineSection(_Section):
    fgc_time: float = Field(default=1.4, gt=0)
    fgc_memory: float = Field(default=0.649, gt=0)
    fga_time: float = Field(default=1.1, gt=0)
    fga_memory: float = Field(default=0.431, gt=0)
    flp_time: float = Field(default=1.0, gt=0)
    flp_memory: float = Field(default=0.25, gt=0)
    tifl_tiers: int = Field(default=5, ge=1)
    oort_alpha: float = Field(default=2.0, ge=0)
    oort_preferred_quantile: float = Field(default=0.8, ge=0, le=1)


class PolicySection(_Section):
    name: PolicyName = "smartsplit"
    rounds: int = Field(default=50, ge=1)
    local_epochs: int = Field(default=5, ge=1)
    k: int = Field(default=10, ge=1)
    over_selection: float = Field(default=0.2, ge=0)
    epsilon: float = Field(default=0.1, ge=0, le=1)
    sigma_prune: float = Field(default=0.8, ge=0, le=1)
    prune_ramp: int = Field(default=4, ge=1)
    lam: float = Field(default=1.0, ge=0)
    d_threshold: float | None = Field(default=None, ge=0)
    d_threshold_fraction: float = Field(default=0.05, ge=0, le=1)
    u_split: bool = True
    static_cut: int | None = Field(default=None, ge=1)
    per_device_latency: bool = False
    segment_size: int | None = Field(default=None, ge=1)
    bo: BoSection = Field(default_factory=BoSection)
    baselines: BaselineSection = Field(default_factory=BaselineSection)


class DynamicsSection(_Section):
    round_period_seconds: float = Field(default=600.0, gt=0)
    budget_event_rate: float = Field(default=2.0, ge=0)
    budget_amplitude: float = Field(default=0.4, ge=0, le=1)
    budget_event_seconds: float = Field(default=1800.0, gt=0)
    loss_mean: float = Field(default=2.3, gt=0)
    loss_sigma: float = Field(default=0.5, ge=0)
    loss_floor: float = Field(default=0.05, ge=0)
    floor_coupling: float = Field(default=0.2, ge=0)
    gamma: float = Field(default=0.7, gt=0, lt=1)
    loss_noise: float = Field(default=0.0, ge=0)
    distribution_noise: float = Field(default=1.0, ge=0)


class ServerSection(_Section):
    flops_per_second: float = Field(default=1e13, gt=0)
    io_bytes_per_second: float = Field(default=5e11, gt=0)


class ScenarioConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    fleet: FleetSection = Field(default_factory=FleetSection)
    policy: PolicySection = Field(default_factory=PolicySection)
    dynamics: DynamicsSection = Field(default_factory=DynamicsSection)
    server: ServerSection = Field(default_factory=ServerSection)
    seed: int = Field(default=7, ge=0)
    base_dir: str = "."

    @model_validator(mode="after")
    def _k_within_fleet(self):
        if self.fleet.file is None and self.policy.k > self.fleet.devices:
            raise ValueError(f"policy.k ({self.policy.k}) exceeds fleet.devices ({self.fleet.devices})")
        return self

    def resolve(self, reference: str) -> Path:
        """Scenario-relative path, falling back to the data directory."""
        candidate = Path(reference)
        if candidate.is_absolute():
            return candidate
        local = Path(self.base_dir) / candidate
        if local.exists():
            return local
        return Path(DATA_DIR) / candidate


class DeviceRecord(_Section):
    id: int
    device_class: str = ""
    flops_per_second: float = Field(gt=0)
    local_io_bytes_per_second: float = Field(gt=0)
    lan_bytes_per_second: float = Field(gt=0)
    wan_bytes_per_second: float = Field(gt=0)
    memory_budget_bytes: float = Field(ge=0)
    budget_trace: list[tuple[float, float]] | None = None
    class_histogram: list[int]
    mec_id: int = 0


class FleetFile(_Section):
    classes: int = Field(ge=2)
    devices: list[DeviceRecord]


def _split_key(key: str) -> list[str]:
    if key == "policy":
        return ["policy", "name"]
    return key.split(".")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides; the path must exist in the schema."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        parts = _split_key(key.strip())
        model: type[BaseModel] = ScenarioConfig
        node = out
        for i, part in enumerate(parts):
            fields = model.model_fields
            if part not in fields:
                raise ConfigError(key, "unknown configuration key")
            if i == len(parts) - 1:
                node[part] = yaml.safe_load(value)
                break
            annotation = fields[part].annotation
            if not (isinstance(annotation, type) and issubclass(annotation, BaseModel)):
                raise ConfigError(key, "is not a section")
            model = annotation
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "is not a section")
    return out


def _first_error_key(error: ValidationError) -> str:
    errors = error.errors()
    if not errors:
        return "scenario"
    return ".".join(str(p) for p in errors[0]["loc"]) or "scenario"


def build_scenario(raw: dict | None, overrides: list[str] | None = None, base_dir: str | Path = ".") -> ScenarioConfig:
    raw = apply_overrides(raw or {}, overrides or [])
    raw.setdefault("base_dir", str(base_dir))
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_first_error_key(e), e.errors()[0]["msg"]) from e


def load_scenario(path: str | Path, overrides: list[str] | None = None) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "scenario file not found")
    try:
        with path.open("r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"cannot parse YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "scenario must be a mapping")
    return build_scenario(raw, overrides, path.parent)


def load_fleet_file(path: str | Path) -> FleetFile:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "fleet file not found")
    with path.open("r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    try:
        return FleetFile.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"fleet.{_first_error_key(e)}", e.errors()[0]["msg"]) from e


def dump_config(config: ScenarioConfig) -> dict[str, Any]:
    return config.model_dump(mode="json", exclude={"base_dir"})
