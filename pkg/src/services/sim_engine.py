"""
Round-by-round simulation of split federated training.

Each round: the profiler reads budgets, the central manager picks devices and
cuts for the policy, the edge tier optionally re-selects by importance, every
scheduled device gets a memory plan and a latency/traffic account, and losses
evolve for those who trained.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.services.central_manager import (
    CentralManager,
    SelectionScenario,
    SplitAssignment,
    latency_greedy_cuts,
    random_select,
    tiered_select,
    utility_select,
)
from src.services.device_profile import (
    DeviceProfile,
    MemoryBudgetTrace,
    budget_at,
    distribution_utility,
    kld,
    statistical_utility,
)
from src.services.latency_model import (
    ExecutionContext,
    latency_table,
    round_comm_bytes,
    split_round_latency,
    system_latency,
)
from src.services.mec_manager import (
    AuxiliaryDataset,
    MecManager,
    estimate_distribution,
    prune_learned_samples,
)
from src.services.memory_reducer import (
    DeviceStrategy,
    InfeasiblePlanError,
    RecomputationPlan,
    Strategy,
    minimum_device_memory,
    plan_device_memory,
)
from src.services.model_graph import ModelGraph, device_param_bytes, device_side_memory, load_model_graph
from src.services.scenario import (
    DeviceRecord,
    DynamicsSection,
    FleetSection,
    ScenarioConfig,
    load_fleet_file,
)

STREAM_PARTITION = 0
STREAM_LOSS = 1
STREAM_BUDGET = 2
STREAM_ESTIMATE = 3
STREAM_SELECT = 4
STREAM_MEC = 5
STREAM_UPLOAD = 6


class AllDropoutError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    name: str
    selection: str = "random"  # random | bo | tiered | utility
    split: str = "none"  # none | static | dynamic | greedy
    tier: str = "wan"  # wan | mec
    reselect: bool = False
    selection_memory: str = "oblivious"  # oblivious | retained | cost_aware
    device_memory: DeviceStrategy = DeviceStrategy.NONE
    enforce_memory: bool = False
    baseline: str | None = None


_SMART = dict(selection="bo", split="dynamic", tier="mec", reselect=True, selection_memory="cost_aware")

POLICIES: dict[str, PolicySpec] = {
    "fedavg": PolicySpec("fedavg"),
    "fgc": PolicySpec("fgc", baseline="fgc"),
    "fga": PolicySpec("fga", baseline="fga"),
    "flp": PolicySpec("flp", baseline="flp"),
    "splitfl_static": PolicySpec("splitfl_static", split="static"),
    "d_sft": PolicySpec("d_sft", selection="bo", split="dynamic", selection_memory="retained", enforce_memory=True),
    "smd": PolicySpec("smd", selection="bo", split="dynamic", tier="mec", selection_memory="retained", enforce_memory=True),
    "r_smd": PolicySpec(
        "r_smd", selection="bo", split="dynamic", tier="mec", reselect=True,
        selection_memory="retained", enforce_memory=True,
    ),
    "smartsplit": PolicySpec("smartsplit", device_memory=DeviceStrategy.COST_AWARE, enforce_memory=True, **_SMART),
    "n_smd": PolicySpec("n_smd", device_memory=DeviceStrategy.NONE, enforce_memory=False, **_SMART),
    "s_smd": PolicySpec("s_smd", device_memory=DeviceStrategy.SPEED, enforce_memory=False, **_SMART),
    "m_smd": PolicySpec("m_smd", device_memory=DeviceStrategy.MEMORY, enforce_memory=True, **_SMART),
    "tifl": PolicySpec("tifl", selection="tiered"),
    "oort": PolicySpec("oort", selection="utility"),
    "fedadapt": PolicySpec("fedadapt", split="greedy"),
}
POLICY_ALIASES = {"sft": "splitfl_static"}


def get_policy(name: str) -> PolicySpec:
    name = POLICY_ALIASES.get(name, name)
    if name not in POLICIES:
        raise ValueError(f"unknown policy {name!r}")
    return POLICIES[name]


@dataclass(frozen=True)
class DeviceRoundResult:
    device_id: int
    cut: int
    iterations: int
    budget_bytes: float
    peak_memory_bytes: float
    memory_mode: str
    speed_segments: int
    memory_segments: int
    extra_forward_flops: float
    dropped: bool
    violation: bool
    device_compute_seconds: float = 0.0
    recompute_seconds: float = 0.0
    transfer_seconds: float = 0.0
    server_compute_seconds: float = 0.0
    upload_seconds: float = 0.0
    comm_bytes: float = 0.0
    lan_bytes: float = 0.0

    @property
    def total_seconds(self) -> float:
        return (
            self.device_compute_seconds + self.recompute_seconds + self.transfer_seconds
            + self.server_compute_seconds + self.upload_seconds
        )


@dataclass(frozen=True)
class RoundReport:
    round: int
    policy: str
    selected: tuple[int, ...]
    participants: tuple[int, ...]
    cuts: tuple[int, ...]
    dropouts: tuple[int, ...]
    memory_violations: int
    t_system_seconds: float
    mean_device_seconds: float
    peak_memory_bytes: float
    mean_peak_memory_bytes: float
    extra_forward_flops: float
    comm_bytes: float
    lan_bytes: float
    sum_dis: float
    sum_stat: float
    active_samples: int
    speed_segments: int
    memory_segments: int
    devices: tuple[DeviceRoundResult, ...] = field(default=(), repr=False)


@dataclass
class SimulationState:
    config: ScenarioConfig
    graph: ModelGraph
    devices: list[DeviceProfile]
    mec: MecManager
    central: CentralManager
    server_ctx: ExecutionContext
    dis_true: np.ndarray
    dis_estimated: np.ndarray
    retained_memory: np.ndarray
    minimum_memory: np.ndarray
    plans: dict[int, RecomputationPlan] = field(default_factory=dict)

    @property
    def total_samples(self) -> int:
        return sum(d.dataset_size for d in self.devices)

    @property
    def active_samples(self) -> int:
        return sum(d.active_count for d in self.devices)


@dataclass
class SimulationResult:
    reports: list[RoundReport]
    summary: dict
    mec_trace: list[dict] = field(default_factory=list)


def _rng(seed: int, round_index: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, stream, *extra])


def _dirichlet(rng: np.random.Generator, concentration: float, classes: int) -> np.ndarray:
    for _ in range(10):
        p = rng.dirichlet(np.full(classes, concentration))
        if np.isfinite(p).all() and p.sum() > 0:
            return p
    # tiny concentrations can underflow every component
    p = np.zeros(classes)
    p[rng.integers(0, classes)] = 1.0
    return p


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_histograms(devices: int, classes: int, samples: int, concentration: float, seed: int) -> np.ndarray:
    """Per-device class counts with proportions drawn from a symmetric Dirichlet."""
    if concentration <= 0:
        raise ValueError("Dirichlet concentration must be > 0")
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = _rng(seed, 0, STREAM_PARTITION)
    return np.vstack([_largest_remainder(_dirichlet(rng, concentration, classes), samples) for _ in range(devices)])


def generate_budget_trace(
    base_bytes: float,
    horizon_seconds: float,
    dynamics: DynamicsSection,
    rng: np.random.Generator,
) -> MemoryBudgetTrace:
    """Base budget with app-launch dips arriving as a Poisson process."""
    rate = dynamics.budget_event_rate / 3600.0
    dips: list[tuple[float, float, float]] = []
    if rate > 0 and dynamics.budget_amplitude > 0:
        t = rng.exponential(1.0 / rate)
        while t < horizon_seconds:
            duration = rng.exponential(dynamics.budget_event_seconds)
            depth = rng.uniform(0.0, dynamics.budget_amplitude) * base_bytes
            dips.append((t, t + duration, depth))
            t += rng.exponential(1.0 / rate)
    edges = sorted({0.0, *(s for s, _, _ in dips), *(e for _, e, _ in dips)})
    points = []
    for t in edges:
        budget = max(0.0, base_bytes - sum(d for s, e, d in dips if s <= t < e))
        if not points or points[-1][1] != budget:
            points.append((t, budget))
    return MemoryBudgetTrace(tuple(points))


def _class_for(index: int, count: int, shares: np.ndarray) -> int:
    cumulative = np.cumsum(shares) / shares.sum()
    return int(min(np.searchsorted(cumulative, (index + 0.5) / count), shares.size - 1))


def _initial_losses(
    histogram: np.ndarray, dynamics: DynamicsSection, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    p = histogram / histogram.sum()
    floor = dynamics.loss_floor + dynamics.floor_coupling * kld(p, np.full(p.size, 1.0 / p.size))
    n = int(histogram.sum())
    losses = floor + rng.lognormal(math.log(dynamics.loss_mean), dynamics.loss_sigma, size=n)
    return losses, floor


def _device_from_parts(
    index: int,
    record: DeviceRecord,
    trace: MemoryBudgetTrace,
    dynamics: DynamicsSection,
    seed: int,
) -> DeviceProfile:
    histogram = np.asarray(record.class_histogram, dtype=np.int64)
    losses, floor = _initial_losses(histogram, dynamics, _rng(seed, 0, STREAM_LOSS, index))
    return DeviceProfile(
        id=record.id,
        flops_per_second=record.flops_per_second,
        local_io_bytes_per_second=record.local_io_bytes_per_second,
        uplink_bytes_per_second=record.lan_bytes_per_second,
        wan_bytes_per_second=record.wan_bytes_per_second,
        memory_budget_trace=trace,
        class_histogram=histogram,
        per_sample_loss=losses,
        device_class=record.device_class,
        mec_id=record.mec_id,
        loss_floor=floor,
    )


def generate_fleet(
    fleet: FleetSection,
    dynamics: DynamicsSection,
    seed: int,
    horizon_seconds: float,
) -> list[DeviceProfile]:
    """Dirichlet-partitioned fleet with device classes, budget traces and initial losses."""
    histograms = partition_histograms(fleet.devices, fleet.classes, fleet.samples_per_device, fleet.dirichlet, seed)
    shares = np.array([c.share for c in fleet.device_classes], dtype=float)
    devices = []
    for i in range(fleet.devices):
        template = fleet.device_classes[_class_for(i, fleet.devices, shares)]
        record = DeviceRecord(
            id=i,
            device_class=template.name,
            flops_per_second=template.flops_per_second,
            local_io_bytes_per_second=template.local_io_bytes_per_second,
            lan_bytes_per_second=template.lan_bytes_per_second,
            wan_bytes_per_second=template.wan_bytes_per_second,
            memory_budget_bytes=template.memory_budget_bytes,
            class_histogram=histograms[i].tolist(),
            mec_id=i % fleet.mecs,
        )
        trace = generate_budget_trace(template.memory_budget_bytes, horizon_seconds, dynamics, _rng(seed, 0, STREAM_BUDGET, i))
        devices.append(_device_from_parts(i, record, trace, dynamics, seed))
    return devices


def load_fleet(path, dynamics: DynamicsSection, seed: int, horizon_seconds: float) -> tuple[list[DeviceProfile], int]:
    parsed = load_fleet_file(path)
    devices = []
    for i, record in enumerate(parsed.devices):
        if len(record.class_histogram) != parsed.classes:
            raise ValueError(f"device {record.id}: histogram must have {parsed.classes} entries")
        if record.budget_trace:
            trace = MemoryBudgetTrace(tuple(record.budget_trace))
        else:
            trace = generate_budget_trace(record.memory_budget_bytes, horizon_seconds, dynamics, _rng(seed, 0, STREAM_BUDGET, i))
        devices.append(_device_from_parts(i, record, trace, dynamics, seed))
    return devices, parsed.classes


def fleet_records(devices: Sequence[DeviceProfile]) -> list[dict]:
    """Serializable records for a generated fleet."""
    return [
        {
            "id": d.id,
            "device_class": d.device_class,
            "flops_per_second": d.flops_per_second,
            "local_io_bytes_per_second": d.local_io_bytes_per_second,
            "lan_bytes_per_second": d.uplink_bytes_per_second,
            "wan_bytes_per_second": d.wan_bytes_per_second,
            "memory_budget_bytes": d.memory_budget_trace.breakpoints[0][1],
            "budget_trace": [list(p) for p in d.memory_budget_trace.breakpoints],
            "class_histogram": [int(x) for x in d.class_histogram],
            "mec_id": d.mec_id,
        }
        for d in devices
    ]


def step_losses(device: DeviceProfile, participated: bool, dynamics: DynamicsSection | float) -> np.ndarray:
    """Move every active loss a fraction (1 - gamma) of the way to the device floor."""
    gamma = dynamics if isinstance(dynamics, (int, float)) else dynamics.gamma
    if participated:
        mask = device.active_mask
        floor = device.loss_floor
        device.per_sample_loss[mask] = floor + (device.per_sample_loss[mask] - floor) * gamma
    return device.per_sample_loss


def _uploaded_losses(device: DeviceProfile, noise: float, rng: np.random.Generator) -> np.ndarray:
    losses = device.active_losses()
    if noise > 0:
        losses = losses * rng.lognormal(0.0, noise, size=losses.size)
    return losses


def init_state(config: ScenarioConfig) -> SimulationState:
    graph = load_model_graph(config.resolve(config.model.profile))
    horizon = (config.policy.rounds + 1) * config.dynamics.round_period_seconds
    if config.fleet.file:
        devices, classes = load_fleet(config.resolve(config.fleet.file), config.dynamics, config.seed, horizon)
    else:
        devices = generate_fleet(config.fleet, config.dynamics, config.seed, horizon)
        classes = config.fleet.classes
    if config.policy.k > len(devices):
        raise ValueError(f"policy.k ({config.policy.k}) exceeds the fleet size ({len(devices)})")
    total = sum(d.dataset_size for d in devices)
    aux = AuxiliaryDataset(config.fleet.aux_samples, classes)
    mec = MecManager(aux, total_samples=total)

    dis_true = np.array([distribution_utility(d) for d in devices])
    dis_est = []
    for d in devices:
        p = estimate_distribution(d, aux, config.dynamics.distribution_noise, [config.seed, 0, STREAM_ESTIMATE, d.id])
        dis_est.append(kld(p, np.full(p.size, 1.0 / p.size)))
        mec.update_loss_cache(d.id, _uploaded_losses(d, config.dynamics.loss_noise, _rng(config.seed, 0, STREAM_UPLOAD, d.id)))

    batch = config.model.batch
    bo = config.policy.bo
    return SimulationState(
        config=config,
        graph=graph,
        devices=devices,
        mec=mec,
        central=CentralManager(
            eval_budget=bo.eval_budget,
            initial_design=bo.initial_design,
            candidates=bo.candidates,
            refit_every=bo.refit_every,
            noise=bo.noise,
            xi=bo.xi,
            warm_start=bo.warm_start,
            greedy_seed=bo.greedy_seed,
        ),
        server_ctx=ExecutionContext(config.server.flops_per_second, config.server.io_bytes_per_second, batch, True),
        dis_true=dis_true,
        dis_estimated=np.array(dis_est),
        retained_memory=np.array([device_side_memory(graph, j, batch) for j in range(1, graph.depth + 1)]),
        minimum_memory=np.array([
            minimum_device_memory(graph, j, batch, config.policy.segment_size) for j in range(1, graph.depth + 1)
        ]),
    )


def _iterations(device: DeviceProfile, local_epochs: int, batch: int) -> int:
    return local_epochs * max(1, math.ceil(device.active_count / batch))


def _links(state: SimulationState, spec: PolicySpec) -> np.ndarray:
    if spec.tier == "mec":
        return np.array([d.uplink_bytes_per_second for d in state.devices])
    return np.array([d.wan_bytes_per_second for d in state.devices])


def _baseline_multipliers(state: SimulationState, spec: PolicySpec) -> tuple[float, float]:
    if spec.baseline is None:
        return 1.0, 1.0
    b = state.config.policy.baselines
    return getattr(b, f"{spec.baseline}_time"), getattr(b, f"{spec.baseline}_memory")


def build_selection_scenario(
    state: SimulationState,
    spec: PolicySpec,
    budgets: np.ndarray,
) -> SelectionScenario:
    config, graph = state.config, state.graph
    batch, policy = config.model.batch, config.policy
    links = _links(state, spec)
    iterations = np.array([_iterations(d, policy.local_epochs, batch) for d in state.devices], dtype=float)
    per_iteration = latency_table(graph, state.devices, state.server_ctx, batch, policy.u_split, links)
    upload = np.cumsum(graph.param_bytes)[None, :] / links[:, None]
    latency = iterations[:, None] * per_iteration + upload

    n, depth = len(state.devices), graph.depth
    if spec.selection_memory == "retained":
        memory = np.broadcast_to(state.retained_memory, (n, depth)).copy()
    elif spec.selection_memory == "cost_aware":
        memory = np.broadcast_to(state.minimum_memory, (n, depth)).copy()
        for i, device in enumerate(state.devices):
            budget = budgets[i]
            needs_plan = (state.retained_memory > budget) & (state.minimum_memory <= budget)
            for j in np.flatnonzero(needs_plan) + 1:
                plan = plan_device_memory(graph, int(j), batch, budget, DeviceStrategy.COST_AWARE, policy.segment_size)
                latency[i, j - 1] += iterations[i] * plan.extra_forward_flops / device.flops_per_second
    else:
        memory = np.zeros((n, depth))

    k = policy.k
    if spec.reselect:
        k = min(n, math.ceil(policy.k * (1.0 + policy.over_selection)))
    d_threshold = policy.d_threshold
    if d_threshold is None:
        d_threshold = policy.d_threshold_fraction * state.total_samples
    return SelectionScenario(
        device_ids=np.array([d.id for d in state.devices]),
        latency=latency,
        memory_required=memory,
        budgets=budgets,
        dis=state.dis_estimated,
        dataset_sizes=np.array([d.dataset_size for d in state.devices], dtype=float),
        k=k,
        lam=policy.lam,
        d_threshold=d_threshold,
        per_device_latency=policy.per_device_latency,
        penalty_weight=policy.bo.penalty_weight,
    )


def _fixed_cuts(state: SimulationState, spec: PolicySpec, scenario: SelectionScenario):
    depth = state.graph.depth
    if spec.split == "static":
        cut = state.config.policy.static_cut or state.graph.reference_cut or 1
        return min(cut, depth)
    if spec.split == "greedy":
        return latency_greedy_cuts(scenario)
    return depth


def central_select(
    state: SimulationState,
    spec: PolicySpec,
    scenario: SelectionScenario,
    round_index: int,
) -> SplitAssignment:
    seed = state.config.seed
    if spec.selection == "bo":
        return state.central.select(scenario, seed=[seed, round_index, STREAM_SELECT])
    rng = _rng(seed, round_index, STREAM_SELECT)
    cuts = _fixed_cuts(state, spec, scenario)
    if spec.selection == "tiered":
        return tiered_select(scenario, rng, state.config.policy.baselines.tifl_tiers, cuts)
    if spec.selection == "utility":
        b = state.config.policy.baselines
        stat = np.array([state.mec.estimate_importance(d.id) for d in state.devices])
        return utility_select(
            scenario, stat, rng, state.config.policy.epsilon, b.oort_alpha, b.oort_preferred_quantile, cuts
        )
    return random_select(scenario, rng, cuts)


def _execute_device(
    state: SimulationState,
    spec: PolicySpec,
    device: DeviceProfile,
    cut: int,
    budget: float,
) -> DeviceRoundResult:
    config, graph = state.config, state.graph
    batch, policy = config.model.batch, config.policy
    time_mult, mem_mult = _baseline_multipliers(state, spec)
    iterations = _iterations(device, policy.local_epochs, batch)

    try:
        plan = plan_device_memory(
            graph, cut, batch, budget, spec.device_memory, policy.segment_size, state.plans.get(device.id)
        )
    except InfeasiblePlanError as e:
        logging.warning("device %s dropped: cut %s infeasible under %.0f B (%s)", device.id, cut, budget, e)
        return DeviceRoundResult(
            device.id, cut, iterations, budget, float(state.minimum_memory[cut - 1]), "infeasible",
            0, 0, 0.0, dropped=True, violation=False,
        )
    if plan.plan is not None and spec.device_memory is DeviceStrategy.COST_AWARE:
        state.plans[device.id] = plan.plan

    peak = plan.peak_memory_bytes * mem_mult
    over = peak > budget
    mode = "retain" if plan.retained else spec.device_memory.value
    speed = plan.count(Strategy.SPEED)
    memory = plan.count(Strategy.MEMORY)
    if over and spec.enforce_memory:
        logging.warning("device %s dropped: needs %.0f B, budget %.0f B", device.id, peak, budget)
        return DeviceRoundResult(
            device.id, cut, iterations, budget, peak, mode, speed, memory, plan.extra_forward_flops,
            dropped=True, violation=False,
        )

    link = device.uplink_bytes_per_second if spec.tier == "mec" else device.wan_bytes_per_second
    breakdown = split_round_latency(graph, cut, device, state.server_ctx, batch, policy.u_split, link)
    traffic = round_comm_bytes(graph, cut, batch, iterations, policy.u_split, model_upload=True)
    if spec.tier == "mec":
        comm, lan = float(graph.param_bytes.sum()), traffic
    else:
        comm, lan = traffic, 0.0
    return DeviceRoundResult(
        device_id=device.id,
        cut=cut,
        iterations=iterations,
        budget_bytes=budget,
        peak_memory_bytes=peak,
        memory_mode=mode,
        speed_segments=speed,
        memory_segments=memory,
        extra_forward_flops=iterations * plan.extra_forward_flops,
        dropped=False,
        violation=over,
        device_compute_seconds=iterations * breakdown.device_compute_seconds * time_mult,
        recompute_seconds=iterations * plan.extra_forward_flops / device.flops_per_second,
        transfer_seconds=iterations * breakdown.transfer_seconds,
        server_compute_seconds=iterations * breakdown.server_compute_seconds,
        upload_seconds=device_param_bytes(graph, cut) / link,
        comm_bytes=comm,
        lan_bytes=lan,
    )


def run_round(state: SimulationState, policy: PolicySpec | str, round_index: int) -> RoundReport:
    spec = get_policy(policy) if isinstance(policy, str) else policy
    config = state.config
    t = round_index * config.dynamics.round_period_seconds
    budgets = np.array([budget_at(d.memory_budget_trace, t) for d in state.devices])
    for device, budget in zip(state.devices, budgets):
        state.mec.profile_cache.observe(device, budget, t)

    scenario = build_selection_scenario(state, spec, budgets)
    assignment = central_select(state, spec, scenario, round_index)
    selected = assignment.selected_ids
    if spec.reselect:
        scheduled = state.mec.importance_schedule(
            selected, config.policy.epsilon, config.policy.k, [config.seed, round_index, STREAM_MEC]
        )
    else:
        scheduled = sorted(selected)

    by_id = {d.id: (i, d) for i, d in enumerate(state.devices)}
    results = []
    for device_id in scheduled:
        i, device = by_id[device_id]
        results.append(_execute_device(state, spec, device, assignment.cut_of(device_id), float(budgets[i])))
    ran = [r for r in results if not r.dropped]
    if not ran:
        raise AllDropoutError(f"round {round_index}: all {len(results)} scheduled devices dropped out")

    sum_dis = float(sum(state.dis_true[by_id[r.device_id][0]] for r in ran))
    sum_stat = float(sum(statistical_utility(by_id[r.device_id][1]) for r in ran))

    upload_rng = _rng(config.seed, round_index + 1, STREAM_UPLOAD)
    for r in ran:
        device = by_id[r.device_id][1]
        step_losses(device, True, config.dynamics)
        if spec.reselect:
            prune_learned_samples(device, config.policy.sigma_prune, config.policy.prune_ramp)
        state.mec.update_loss_cache(device.id, _uploaded_losses(device, config.dynamics.loss_noise, upload_rng))

    totals = [r.total_seconds for r in ran]
    peaks = [r.peak_memory_bytes for r in ran]
    report = RoundReport(
        round=round_index,
        policy=spec.name,
        selected=tuple(sorted(selected)),
        participants=tuple(r.device_id for r in ran),
        cuts=tuple(r.cut for r in ran),
        dropouts=tuple(r.device_id for r in results if r.dropped),
        memory_violations=sum(1 for r in ran if r.violation),
        t_system_seconds=system_latency(totals),
        mean_device_seconds=float(np.mean(totals)),
        peak_memory_bytes=float(max(peaks)),
        mean_peak_memory_bytes=float(np.mean(peaks)),
        extra_forward_flops=float(sum(r.extra_forward_flops for r in ran)),
        comm_bytes=float(sum(r.comm_bytes for r in ran)),
        lan_bytes=float(sum(r.lan_bytes for r in ran)),
        sum_dis=sum_dis,
        sum_stat=sum_stat,
        active_samples=state.active_samples,
        speed_segments=sum(r.speed_segments for r in ran),
        memory_segments=sum(r.memory_segments for r in ran),
        devices=tuple(results),
    )
    logging.info(
        "round %s [%s]: T_system=%.3fs participants=%s dropouts=%s violations=%s",
        round_index, spec.name, report.t_system_seconds, len(ran), len(report.dropouts), report.memory_violations,
    )
    return report


def summarize(reports: Sequence[RoundReport], seed: int | None = None) -> dict:
    if not reports:
        raise ValueError("no rounds to summarize")
    t = np.array([r.t_system_seconds for r in reports])
    return {
        "policy": reports[0].policy,
        "seed": seed,
        "rounds": len(reports),
        "t_system_mean": float(t.mean()),
        "t_system_median": float(np.median(t)),
        "t_system_p95": float(np.percentile(t, 95)),
        "total_comm_bytes": float(sum(r.comm_bytes for r in reports)),
        "total_lan_bytes": float(sum(r.lan_bytes for r in reports)),
        "total_dropouts": int(sum(len(r.dropouts) for r in reports)),
        "total_violations": int(sum(r.memory_violations for r in reports)),
        "final_active_samples": int(reports[-1].active_samples),
        "max_peak_memory_bytes": float(max(r.peak_memory_bytes for r in reports)),
        "mean_peak_memory_bytes": float(np.mean([r.peak_memory_bytes for r in reports])),
        "mean_extra_forward_flops": float(np.mean([r.extra_forward_flops for r in reports])),
        "mean_sum_dis": float(np.mean([r.sum_dis for r in reports])),
    }


def run_simulation(config: ScenarioConfig, trace_mec: bool = False) -> SimulationResult:
    state = init_state(config)
    spec = get_policy(config.policy.name)
    logging.info(
        "simulating %s on %s: %s devices, %s rounds, seed %s",
        spec.name, state.graph.name, len(state.devices), config.policy.rounds, config.seed,
    )
    reports, trace = [], []
    for r in range(config.policy.rounds):
        reports.append(run_round(state, spec, r))
        if trace_mec:
            trace.extend({"round": r, **row} for row in state.mec.snapshot(state.devices))
    return SimulationResult(reports, summarize(reports, config.seed), trace)


def plan_selection(config: ScenarioConfig) -> tuple[SplitAssignment, SelectionScenario]:
    """Round-0 central selection for the configured policy, without training."""
    state = init_state(config)
    spec = get_policy(config.policy.name)
    budgets = np.array([budget_at(d.memory_budget_trace, 0.0) for d in state.devices])
    scenario = build_selection_scenario(state, spec, budgets)
    return central_select(state, spec, scenario, 0), scenario
