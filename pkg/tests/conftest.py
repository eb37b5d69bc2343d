from pathlib import Path

import numpy as np
import pytest

from src.services.device_profile import DeviceProfile, MemoryBudgetTrace

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).resolve().parent / "fixtures"
PROFILES = ROOT / "data" / "profiles"
SCENARIOS = ROOT / "data" / "scenarios"


def make_device(
    device_id=0,
    flops=1e9,
    io=1e9,
    uplink=1e7,
    budget=1e9,
    histogram=(5, 5),
    losses=None,
    **kwargs,
) -> DeviceProfile:
    histogram = np.asarray(histogram)
    if losses is None:
        losses = np.ones(int(histogram.sum()))
    return DeviceProfile(
        id=device_id,
        flops_per_second=flops,
        local_io_bytes_per_second=io,
        uplink_bytes_per_second=uplink,
        memory_budget_trace=MemoryBudgetTrace.constant(budget),
        class_histogram=histogram,
        per_sample_loss=np.asarray(losses, dtype=float),
        **kwargs,
    )


@pytest.fixture
def device_factory():
    return make_device
