"""Edge-tier state: loss and profile caches, probing estimates, re-selection, pruning."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from src.services.device_profile import DeviceProfile, class_distribution, utility_from_summary

DEFAULT_HISTORY = 5


@dataclass(frozen=True)
class LossSummary:
    count: int
    mean: float
    rms: float


@dataclass
class LossCacheEntry:
    latest: LossSummary
    history: deque = field(default_factory=lambda: deque(maxlen=DEFAULT_HISTORY))


class LossCache:
    def __init__(self, history: int = DEFAULT_HISTORY):
        if history < 1:
            raise ValueError("loss history length must be >= 1")
        self.history = history
        self._entries: dict[int, LossCacheEntry] = {}

    def update(self, device_id: int, losses) -> LossCacheEntry:
        losses = np.asarray(losses, dtype=float)
        if (losses < 0).any():
            raise ValueError("losses must be >= 0")
        count = int(losses.size)
        summary = LossSummary(
            count,
            float(losses.mean()) if count else 0.0,
            float(np.sqrt(np.mean(losses ** 2))) if count else 0.0,
        )
        entry = self._entries.get(device_id)
        if entry is None:
            entry = LossCacheEntry(summary, deque(maxlen=self.history))
            self._entries[device_id] = entry
        entry.latest = summary
        entry.history.append(summary)
        return entry

    def get(self, device_id: int) -> LossCacheEntry | None:
        return self._entries.get(device_id)

    def __contains__(self, device_id: int) -> bool:
        return device_id in self._entries

    def items(self):
        return sorted(self._entries.items())


@dataclass(frozen=True)
class ProfileEntry:
    flops_per_second: float
    uplink_bytes_per_second: float
    budget_bytes: float
    timestamp: float


class ProfileCache:
    def __init__(self):
        self._entries: dict[int, ProfileEntry] = {}

    def observe(self, device: DeviceProfile, budget_bytes: float, timestamp: float) -> ProfileEntry:
        previous = self._entries.get(device.id)
        if previous is not None and timestamp < previous.timestamp:
            raise ValueError(
                f"device {device.id}: profile timestamp {timestamp} is older than {previous.timestamp}"
            )
        entry = ProfileEntry(device.flops_per_second, device.uplink_bytes_per_second, float(budget_bytes), float(timestamp))
        self._entries[device.id] = entry
        return entry

    def get(self, device_id: int) -> ProfileEntry | None:
        return self._entries.get(device_id)


@dataclass(frozen=True)
class AuxiliaryDataset:
    size: int
    classes: int

    def __post_init__(self) -> None:
        if self.size < 1 or self.classes < 1:
            raise ValueError("auxiliary dataset needs >= 1 sample and >= 1 class")


def estimate_distribution(device: DeviceProfile, aux: AuxiliaryDataset, noise_level: float, seed) -> np.ndarray:
    """
    Simulated probing of a device's class mix.

    The exact distribution is perturbed by Dirichlet noise whose concentration
    grows with the auxiliary set size; noise_level 0 returns it unchanged.
    Classes the device does not hold stay at zero.
    """
    p = class_distribution(device.class_histogram)
    if noise_level <= 0:
        return p
    rng = np.random.default_rng(seed)
    support = p > 0
    concentration = p[support] * aux.size / noise_level
    sample = rng.dirichlet(concentration)
    if not np.isfinite(sample).all() or sample.sum() <= 0:
        return p
    out = np.zeros_like(p)
    out[support] = sample / sample.sum()
    return out


class MecManager:
    def __init__(self, aux: AuxiliaryDataset, total_samples: int | None = None, history: int = DEFAULT_HISTORY):
        if total_samples is not None and aux.size > 0.01 * total_samples:
            raise ValueError(
                f"auxiliary dataset ({aux.size}) must be at most 1% of the fleet's {total_samples} samples"
            )
        self.aux = aux
        self.loss_cache = LossCache(history)
        self.profile_cache = ProfileCache()

    def update_loss_cache(self, device_id: int, losses) -> LossCacheEntry:
        return self.loss_cache.update(device_id, losses)

    def estimate_importance(self, device_id: int) -> float:
        entry = self.loss_cache.get(device_id)
        if entry is None:
            raise ValueError(f"device {device_id} has no cached losses")
        if entry.latest.count == 0:
            return 0.0
        return utility_from_summary(entry.latest.count, entry.latest.rms)

    def importance_schedule(self, candidates: Iterable[int], epsilon: float, k: int, seed) -> list[int]:
        """Top-K by cached importance, or K uniformly at random with probability epsilon."""
        pool = sorted(set(int(c) for c in candidates))
        if not pool:
            raise ValueError("importance scheduling needs candidates")
        if not 0 <= epsilon <= 1:
            raise ValueError("epsilon must be in [0, 1]")
        take = min(k, len(pool))
        rng = np.random.default_rng(seed)
        if rng.random() < epsilon:
            return sorted(int(d) for d in rng.choice(pool, size=take, replace=False))
        ranked = sorted(pool, key=lambda d: (-self.estimate_importance(d), d))
        return ranked[:take]

    def snapshot(self, devices: Sequence[DeviceProfile]) -> list[dict]:
        rows = []
        for device in devices:
            loss = self.loss_cache.get(device.id)
            profile = self.profile_cache.get(device.id)
            rows.append({
                "device": device.id,
                "mec": device.mec_id,
                "loss_count": loss.latest.count if loss else 0,
                "loss_mean": loss.latest.mean if loss else 0.0,
                "loss_rms": loss.latest.rms if loss else 0.0,
                "flops_per_second": profile.flops_per_second if profile else device.flops_per_second,
                "uplink_bytes_per_second": profile.uplink_bytes_per_second if profile else device.uplink_bytes_per_second,
                "budget_bytes": profile.budget_bytes if profile else float("nan"),
                "timestamp": profile.timestamp if profile else float("nan"),
            })
        return rows


def prune_learned_samples(device: DeviceProfile, sigma: float, ramp: int = 1) -> int:
    """
    Deactivate the lowest-loss active samples down to this step's target.

    The target active share falls by sigma/ramp per step until 1 - sigma,
    and at least one sample always stays active.
    """
    if not 0 <= sigma <= 1:
        raise ValueError("sigma must be in [0, 1]")
    if ramp < 1:
        raise ValueError("ramp must be >= 1")
    device.prune_steps += 1
    n = device.dataset_size
    share = 1.0 - sigma * min(1.0, device.prune_steps / ramp)
    target = max(1, int(round(n * share)))
    active = np.flatnonzero(device.active_mask)
    excess = active.size - target
    if excess <= 0:
        return 0
    order = active[np.argsort(device.per_sample_loss[active], kind="stable")]
    device.active_mask[order[:excess]] = False
    return int(excess)
