"""Device capabilities, memory budget traces and the two data utilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr


@dataclass(frozen=True)
class MemoryBudgetTrace:
    """Piecewise-constant budget, left-closed intervals."""

    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        points = tuple((float(t), float(b)) for t, b in self.breakpoints)
        if not points:
            raise ValueError("budget trace needs at least one breakpoint")
        if points[0][0] != 0.0:
            raise ValueError("first budget breakpoint must be at t = 0")
        for (t0, _), (t1, _) in zip(points, points[1:]):
            if t1 <= t0:
                raise ValueError("budget breakpoint times must be strictly increasing")
        if any(b < 0 for _, b in points):
            raise ValueError("budgets must be >= 0")
        object.__setattr__(self, "breakpoints", points)

    @classmethod
    def constant(cls, budget_bytes: float) -> MemoryBudgetTrace:
        return cls(((0.0, budget_bytes),))

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.breakpoints])


@dataclass(eq=False)
class DeviceProfile:
    id: int
    flops_per_second: float
    local_io_bytes_per_second: float
    uplink_bytes_per_second: float
    memory_budget_trace: MemoryBudgetTrace
    class_histogram: np.ndarray
    per_sample_loss: np.ndarray
    active_mask: np.ndarray | None = None
    wan_bytes_per_second: float | None = None
    device_class: str = ""
    mec_id: int = 0
    loss_floor: np.ndarray | float = 0.0
    prune_steps: int = 0

    def __post_init__(self) -> None:
        for name in ("flops_per_second", "local_io_bytes_per_second", "uplink_bytes_per_second"):
            if not getattr(self, name) > 0:
                raise ValueError(f"device {self.id}: {name} must be > 0")
        if self.wan_bytes_per_second is None:
            self.wan_bytes_per_second = self.uplink_bytes_per_second
        elif not self.wan_bytes_per_second > 0:
            raise ValueError(f"device {self.id}: wan_bytes_per_second must be > 0")
        self.class_histogram = np.asarray(self.class_histogram, dtype=np.int64)
        self.per_sample_loss = np.asarray(self.per_sample_loss, dtype=float)
        if (self.class_histogram < 0).any():
            raise ValueError(f"device {self.id}: negative class count")
        if int(self.class_histogram.sum()) != self.per_sample_loss.size:
            raise ValueError(
                f"device {self.id}: histogram total {int(self.class_histogram.sum())} "
                f"!= loss vector length {self.per_sample_loss.size}"
            )
        if (self.per_sample_loss < 0).any():
            raise ValueError(f"device {self.id}: losses must be >= 0")
        if self.active_mask is None:
            self.active_mask = np.ones(self.per_sample_loss.size, dtype=bool)
        else:
            self.active_mask = np.asarray(self.active_mask, dtype=bool)
            if self.active_mask.size != self.per_sample_loss.size:
                raise ValueError(f"device {self.id}: active mask length mismatch")

    @property
    def dataset_size(self) -> int:
        return int(self.per_sample_loss.size)

    @property
    def active_count(self) -> int:
        return int(self.active_mask.sum())

    def active_losses(self) -> np.ndarray:
        return self.per_sample_loss[self.active_mask]


def kld(p, q) -> float:
    """KL divergence with natural log and the 0·ln(0/q) = 0 convention."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("kld needs two vectors of the same length")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("probabilities must be >= 0")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("kld inputs must sum to 1")
    if ((p > 0) & (q == 0)).any():
        raise ValueError("q must be positive wherever p is positive")
    return float(max(rel_entr(p, q).sum(), 0.0))


def class_distribution(histogram) -> np.ndarray:
    histogram = np.asarray(histogram, dtype=float)
    total = histogram.sum()
    if histogram.size == 0 or total <= 0:
        raise ValueError("empty dataset has no class distribution")
    return histogram / total


def distribution_utility(device: DeviceProfile) -> float:
    """Dis: divergence of the device's class mix from uniform over all classes."""
    p = class_distribution(device.class_histogram)
    return kld(p, np.full(p.size, 1.0 / p.size))


def statistical_utility(device: DeviceProfile) -> float:
    """Stat: active sample count times RMS of active losses."""
    losses = device.active_losses()
    return utility_from_summary(losses.size, _rms(losses))


def utility_from_summary(count: int, rms: float) -> float:
    if count <= 0:
        raise ValueError("statistical utility needs at least one active sample")
    return float(count * rms)


def _rms(losses: np.ndarray) -> float:
    if losses.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(np.square(losses))))


def budget_at(trace: MemoryBudgetTrace, t: float) -> float:
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    idx = int(np.searchsorted(trace.times, t, side="right")) - 1
    return trace.breakpoints[idx][1]
