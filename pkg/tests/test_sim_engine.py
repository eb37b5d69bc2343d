"""Fleet generation, loss dynamics and round execution."""
import dataclasses
import math

import numpy as np
import pytest

from src.services import sim_engine
from src.services.central_manager import SelectionInfeasibleError
from src.services.device_profile import budget_at, class_distribution, kld
from src.services.latency_model import split_round_latency
from src.services.model_graph import device_param_bytes
from src.services.scenario import DynamicsSection, build_scenario, load_scenario
from src.services.sim_engine import (
    AllDropoutError,
    POLICIES,
    PolicySpec,
    build_selection_scenario,
    fleet_records,
    generate_budget_trace,
    generate_fleet,
    get_policy,
    init_state,
    load_fleet,
    partition_histograms,
    run_round,
    run_simulation,
    step_losses,
)
from src.services.reporting import rounds_frame, write_yaml
from tests.conftest import SCENARIOS, make_device


def _small(policy="fedavg", budget=5e8, rounds=2, **extra):
    raw = {
        "model": {"profile": "profiles/lenet5.yaml", "batch": 8},
        "fleet": {
            "devices": 6,
            "classes": 4,
            "samples_per_device": 64,
            "mecs": 2,
            "aux_samples": 3,
            "device_classes": [{
                "name": "only",
                "flops_per_second": 2e9,
                "local_io_bytes_per_second": 4e9,
                "lan_bytes_per_second": 4e7,
                "wan_bytes_per_second": 2e6,
                "memory_budget_bytes": budget,
            }],
        },
        "policy": {"name": policy, "rounds": rounds, "local_epochs": 1, "k": 3, "bo": {"eval_budget": 20}},
        "dynamics": {"budget_event_rate": 0.0},
    }
    for key, value in extra.items():
        section, name = key.split("__")
        raw.setdefault(section, {})[name] = value
    return build_scenario(raw)


def _mean_dis(histograms):
    uniform = np.full(histograms.shape[1], 1.0 / histograms.shape[1])
    return float(np.mean([kld(class_distribution(h), uniform) for h in histograms]))


def test_partition_is_deterministic_and_complete():
    a = partition_histograms(20, 10, 600, 0.1, seed=4)
    b = partition_histograms(20, 10, 600, 0.1, seed=4)
    assert (a == b).all()
    assert (a.sum(axis=1) == 600).all()
    assert not (a == partition_histograms(20, 10, 600, 0.1, seed=5)).all()


def test_partition_argument_checks():
    with pytest.raises(ValueError):
        partition_histograms(5, 10, 100, 0.0, seed=0)
    with pytest.raises(ValueError):
        partition_histograms(5, 1, 100, 1.0, seed=0)


def test_skewed_partitions_diverge_more():
    for seed in range(20):
        skewed = _mean_dis(partition_histograms(30, 10, 600, 0.1, seed))
        flat = _mean_dis(partition_histograms(30, 10, 600, 100.0, seed))
        assert skewed > flat


def test_huge_concentration_is_near_uniform():
    assert _mean_dis(partition_histograms(50, 10, 600, 1e6, seed=1)) < 0.01


def test_tiny_concentration_is_near_one_hot():
    means = [_mean_dis(partition_histograms(50, 10, 600, 0.01, seed)) for seed in range(20)]
    assert np.mean(means) == pytest.approx(math.log(10), rel=0.1)


def test_budget_trace_without_events_is_constant():
    trace = generate_budget_trace(1e8, 3600, DynamicsSection(budget_event_rate=0.0), np.random.default_rng(0))
    assert trace.breakpoints == ((0.0, 1e8),)


def test_budget_trace_dips_stay_in_range():
    dynamics = DynamicsSection(budget_event_rate=20.0, budget_amplitude=0.4)
    trace = generate_budget_trace(1e8, 36_000, dynamics, np.random.default_rng(1))
    budgets = [b for _, b in trace.breakpoints]
    assert len(budgets) > 1
    assert budgets[0] == 1e8
    assert all(0 <= b <= 1e8 for b in budgets)
    assert min(budgets) < 1e8


def test_fleet_classes_follow_shares():
    config = load_scenario(SCENARIOS / "golden.yaml")
    devices = generate_fleet(config.fleet, config.dynamics, 7, 3600)
    names = [d.device_class for d in devices]
    assert {n: names.count(n) for n in set(names)} == {"low": 20, "mid_low": 20, "mid": 20, "mid_high": 20, "high": 20}
    assert [d.mec_id for d in devices[:6]] == [0, 1, 2, 3, 4, 0]
    again = generate_fleet(config.fleet, config.dynamics, 7, 3600)
    assert all((a.per_sample_loss == b.per_sample_loss).all() for a, b in zip(devices, again))


def test_fleet_records_reload(tmp_path):
    config = _small(dynamics__budget_event_rate=30.0)
    devices = generate_fleet(config.fleet, config.dynamics, 3, 7200)
    path = write_yaml({"classes": 4, "devices": fleet_records(devices)}, tmp_path / "fleet.yaml")
    loaded, classes = load_fleet(path, config.dynamics, 3, 7200)
    assert classes == 4
    for a, b in zip(devices, loaded):
        assert (a.class_histogram == b.class_histogram).all()
        assert a.memory_budget_trace == b.memory_budget_trace
        assert (a.per_sample_loss == b.per_sample_loss).all()


def test_step_losses():
    device = make_device(histogram=(1, 1), losses=[4.0, 4.0])
    step_losses(device, False, 0.5)
    assert device.per_sample_loss.tolist() == [4.0, 4.0]
    step_losses(device, True, 1.0)
    assert device.per_sample_loss.tolist() == [4.0, 4.0]
    device.active_mask[1] = False
    step_losses(device, True, 0.5)
    assert device.per_sample_loss.tolist() == [2.0, 4.0]


def test_losses_approach_floor():
    device = make_device(histogram=(2, 1), losses=[3.0, 2.0, 1.5], loss_floor=1.0)
    for _ in range(60):
        before = device.per_sample_loss.copy()
        step_losses(device, True, DynamicsSection(gamma=0.7))
        assert (device.per_sample_loss <= before).all()
    assert device.per_sample_loss == pytest.approx([1.0, 1.0, 1.0], abs=1e-6)


def test_policy_lookup():
    assert get_policy("sft").name == "splitfl_static"
    assert get_policy("smartsplit").reselect
    with pytest.raises(ValueError):
        get_policy("fedsgd")


def test_fedavg_on_homogeneous_fleet():
    config = _small("fedavg", rounds=1)
    result = run_simulation(config)
    state = init_state(config)
    device = state.devices[0]
    graph = state.graph
    per_iteration = split_round_latency(graph, graph.depth, device, state.server_ctx, 8, link_bytes_per_second=2e6)
    expected = 8 * per_iteration.total_seconds + device_param_bytes(graph, graph.depth) / 2e6
    report = result.reports[0]
    assert report.t_system_seconds == pytest.approx(expected, rel=1e-9)
    assert set(report.cuts) == {graph.depth}
    assert report.comm_bytes == pytest.approx(3 * device_param_bytes(graph, graph.depth))
    assert result.summary["t_system_mean"] == report.t_system_seconds


@pytest.mark.parametrize("name,time,memory", [("fgc", 1.4, 0.649), ("fga", 1.1, 0.431), ("flp", 1.0, 0.25)])
def test_baseline_multipliers(name, time, memory):
    plain = run_simulation(_small("fedavg", rounds=1)).reports[0]
    other = run_simulation(_small(name, rounds=1)).reports[0]
    assert other.selected == plain.selected
    for a, b in zip(plain.devices, other.devices):
        assert b.device_compute_seconds == pytest.approx(time * a.device_compute_seconds)
        assert b.peak_memory_bytes == pytest.approx(memory * a.peak_memory_bytes)
    assert other.peak_memory_bytes == pytest.approx(memory * plain.peak_memory_bytes)
    if time > 1:
        assert other.t_system_seconds > plain.t_system_seconds


def test_same_seed_same_csv():
    config = load_scenario(SCENARIOS / "toy.yaml", ["policy=smartsplit"])
    first = rounds_frame(run_simulation(config).reports).to_csv(index=False)
    second = rounds_frame(run_simulation(config).reports).to_csv(index=False)
    assert first == second


def test_smartsplit_round_invariants():
    config = load_scenario(SCENARIOS / "toy.yaml", ["policy=smartsplit", "policy.rounds=4"])
    result = run_simulation(config, trace_mec=True)
    active = [r.active_samples for r in result.reports]
    assert all(b <= a for a, b in zip(active, active[1:]))
    assert active[-1] < 770
    for report in result.reports:
        assert len(report.participants) <= config.policy.k
        ran = [d for d in report.devices if not d.dropped]
        assert report.t_system_seconds == max(d.total_seconds for d in ran)
        for d in ran:
            assert d.peak_memory_bytes <= d.budget_bytes
            assert not d.violation
            assert d.lan_bytes > 0
    assert {row["round"] for row in result.mec_trace} == {0, 1, 2, 3}


def test_fedavg_keeps_every_sample():
    result = run_simulation(load_scenario(SCENARIOS / "toy.yaml", ["policy=fedavg"]))
    assert {r.active_samples for r in result.reports} == {770}


def test_all_dropouts_fail_the_round():
    state = init_state(_small(budget=1000))
    strict = PolicySpec("strict", enforce_memory=True)
    with pytest.raises(AllDropoutError):
        run_round(state, strict, 0)


def test_unenforced_policy_records_violations():
    report = run_simulation(_small("fedavg", budget=1000, rounds=1)).reports[0]
    assert report.memory_violations == len(report.participants) == 3
    assert report.dropouts == ()


def test_bo_policy_without_room_is_infeasible():
    with pytest.raises(SelectionInfeasibleError):
        run_simulation(_small("d_sft", budget=1000, rounds=1))


def test_budgets_are_read_at_round_start():
    config = _small("smartsplit", rounds=1, dynamics__budget_event_rate=30.0)
    state = init_state(config)
    report = run_round(state, "smartsplit", 0)
    for d in report.devices:
        device = next(x for x in state.devices if x.id == d.device_id)
        assert d.budget_bytes == budget_at(device.memory_budget_trace, 0.0)
    assert state.mec.profile_cache.get(report.devices[0].device_id).timestamp == 0.0


@pytest.mark.parametrize("policy", sorted(POLICIES))
def test_every_policy_runs(policy):
    config = load_scenario(SCENARIOS / "toy.yaml", [f"policy={policy}", "policy.rounds=2"])
    result = run_simulation(config)
    assert [r.round for r in result.reports] == [0, 1]
    for report in result.reports:
        assert report.policy == policy
        assert 1 <= len(report.participants) <= config.policy.k
        assert report.t_system_seconds > 0


def test_tiered_policy_draws_from_one_tier():
    config = load_scenario(
        SCENARIOS / "golden.yaml",
        ["policy=tifl", "fleet.devices=20", "fleet.aux_samples=100", "policy.k=3", "policy.rounds=3"],
    )
    state = init_state(config)
    spec = get_policy("tifl")
    for r in range(3):
        t = r * config.dynamics.round_period_seconds
        budgets = np.array([budget_at(d.memory_budget_trace, t) for d in state.devices])
        scenario = build_selection_scenario(state, spec, budgets)
        order = np.argsort(scenario.latency[:, -1], kind="stable")
        tiers = [set(g.tolist()) for g in np.array_split(order, config.policy.baselines.tifl_tiers)]
        report = run_round(state, spec, r)
        assert any(set(report.selected) <= tier for tier in tiers)


def test_latency_greedy_policy_uses_each_fastest_cut():
    config = _small("fedadapt", rounds=1)
    state = init_state(config)
    spec = get_policy("fedadapt")
    budgets = np.array([budget_at(d.memory_budget_trace, 0.0) for d in state.devices])
    fastest = np.argmin(build_selection_scenario(state, spec, budgets).latency, axis=1) + 1
    report = run_round(state, spec, 0)
    for d in report.devices:
        assert d.cut == fastest[d.device_id]
    assert state.graph.reference_cut not in report.cuts

    static = run_simulation(_small("sft", rounds=1)).reports[0]
    assert static.selected == report.selected
    assert report.t_system_seconds < static.t_system_seconds


def test_round_peak_ignores_dropped_devices(monkeypatch):
    victim = run_simulation(_small("fedavg", rounds=1)).reports[0].selected[0]
    real = sim_engine._execute_device

    def execute(state, spec, device, cut, budget):
        result = real(state, spec, device, cut, budget)
        if device.id == victim:
            return dataclasses.replace(result, dropped=True, peak_memory_bytes=1e15)
        return result

    monkeypatch.setattr(sim_engine, "_execute_device", execute)
    report = run_simulation(_small("fedavg", rounds=1)).reports[0]
    assert report.dropouts == (victim,)
    ran = [d.peak_memory_bytes for d in report.devices if not d.dropped]
    assert report.peak_memory_bytes == max(ran)
    assert report.mean_peak_memory_bytes == pytest.approx(np.mean(ran))
