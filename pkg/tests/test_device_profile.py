"""Budget traces, KL divergence and the two data utilities."""
import math

import numpy as np
import pytest

from src.services.device_profile import (
    MemoryBudgetTrace,
    budget_at,
    distribution_utility,
    kld,
    statistical_utility,
    utility_from_summary,
)
from tests.conftest import make_device


def test_kld_one_hot_vs_uniform():
    p = np.zeros(10)
    p[3] = 1.0
    assert kld(p, np.full(10, 0.1)) == pytest.approx(math.log(10), abs=1e-9)


def test_kld_nonnegative_and_zero_on_equal():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = rng.dirichlet(np.ones(6))
        q = rng.dirichlet(np.ones(6))
        assert kld(p, q) >= 0
        assert kld(p, p) == pytest.approx(0.0, abs=1e-9)
        if not np.allclose(p, q):
            assert kld(p, q) > 0


def test_kld_rejects_bad_input():
    with pytest.raises(ValueError):
        kld([0.5, 0.5], [1.0])
    with pytest.raises(ValueError, match="sum to 1"):
        kld([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError, match="positive"):
        kld([0.5, 0.5], [1.0, 0.0])


def test_statistical_utility_two_samples():
    device = make_device(histogram=(1, 1), losses=[3.0, 4.0])
    assert statistical_utility(device) == pytest.approx(7.0711, abs=1e-4)


def test_statistical_utility_counts_active_only():
    device = make_device(histogram=(2, 2), losses=[3.0, 4.0, 100.0, 100.0])
    device.active_mask[2:] = False
    assert statistical_utility(device) == pytest.approx(7.0711, abs=1e-4)


def test_utility_needs_samples():
    with pytest.raises(ValueError):
        utility_from_summary(0, 1.0)
    assert utility_from_summary(4, 1.0) == 4.0


def test_distribution_utility_uniform_is_zero():
    assert distribution_utility(make_device(histogram=(3, 3, 3))) == pytest.approx(0.0, abs=1e-12)
    skewed = distribution_utility(make_device(histogram=(6, 0, 0)))
    assert skewed == pytest.approx(math.log(3))


def test_device_validation():
    with pytest.raises(ValueError, match="histogram total"):
        make_device(histogram=(2, 2), losses=[1.0, 1.0, 1.0])
    with pytest.raises(ValueError, match="losses"):
        make_device(histogram=(1, 1), losses=[1.0, -1.0])
    with pytest.raises(ValueError, match="flops_per_second"):
        make_device(flops=0)


def test_wan_defaults_to_uplink():
    device = make_device(uplink=5e6)
    assert device.wan_bytes_per_second == 5e6
    assert device.dataset_size == 10
    assert device.active_count == 10


def test_budget_lookup_is_left_closed():
    trace = MemoryBudgetTrace(((0, 100.0), (10, 50.0), (20, 80.0)))
    assert budget_at(trace, 0) == 100.0
    assert budget_at(trace, 9.999) == 100.0
    assert budget_at(trace, 10) == 50.0
    assert budget_at(trace, 1e9) == 80.0
    with pytest.raises(ValueError):
        budget_at(trace, -1)


def test_budget_trace_validation():
    with pytest.raises(ValueError, match="t = 0"):
        MemoryBudgetTrace(((5, 1.0),))
    with pytest.raises(ValueError, match="increasing"):
        MemoryBudgetTrace(((0, 1.0), (3, 2.0), (3, 4.0)))
    with pytest.raises(ValueError, match=">= 0"):
        MemoryBudgetTrace(((0, -1.0),))
    assert MemoryBudgetTrace.constant(7.0).breakpoints == ((0.0, 7.0),)
