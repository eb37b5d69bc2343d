"""
Device selection and cut-layer assignment at the central server.

``bo_select`` searches the joint (participants, cut layers) space with a
Gaussian-process surrogate and expected improvement. Each device is one box
dimension in [0, V]: the K largest coordinates are selected and a value in
(k-1, k] means cut k. ``brute_force_select`` enumerates the same space for
small fleets and serves as the exact reference.

Baseline selectors (random, tiered, utility-driven, latency-greedy cuts) live
here as well so every policy draws its participants from one place.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm, qmc
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF

DEFAULT_PENALTY_WEIGHT = 1e3
BRUTE_FORCE_MAX_DEVICES = 8
BRUTE_FORCE_MAX_DEPTH = 10
BRUTE_FORCE_MAX_POINTS = 10_000_000


class SelectionInfeasibleError(ValueError):
    def __init__(self, constraints: list[str]):
        self.constraints = constraints
        super().__init__("no feasible assignment: " + "; ".join(constraints))


@dataclass(frozen=True)
class AssignmentEntry:
    device_id: int
    selected: bool
    cut: int


@dataclass(frozen=True)
class SplitAssignment:
    entries: tuple[AssignmentEntry, ...]
    predicted_objective: float | None = None

    @property
    def selected_ids(self) -> list[int]:
        return [e.device_id for e in self.entries if e.selected]

    @property
    def cuts(self) -> dict[int, int]:
        return {e.device_id: e.cut for e in self.entries if e.selected}

    def cut_of(self, device_id: int) -> int:
        return self.cuts[device_id]


@dataclass(frozen=True)
class SelectionScenario:
    """
    Everything the selector needs about one round, as dense tables.

    ``latency[i, j-1]`` is device i's full round time at cut j and
    ``memory_required[i, j-1]`` the memory it would need there.
    """

    device_ids: np.ndarray
    latency: np.ndarray
    memory_required: np.ndarray
    budgets: np.ndarray
    dis: np.ndarray
    dataset_sizes: np.ndarray
    k: int
    lam: float = 1.0
    d_threshold: float = 0.0
    dis_scale: float | None = None
    latency_scale: float | None = None
    per_device_latency: bool = False
    penalty_weight: float = DEFAULT_PENALTY_WEIGHT

    def __post_init__(self) -> None:
        ids = np.asarray(self.device_ids, dtype=np.int64)
        latency = np.atleast_2d(np.asarray(self.latency, dtype=float))
        memory = np.atleast_2d(np.asarray(self.memory_required, dtype=float))
        n = ids.size
        if n == 0:
            raise ValueError("selection needs at least one device")
        if latency.shape[0] != n or memory.shape != latency.shape:
            raise ValueError("latency and memory tables must be (devices, cuts)")
        vectors = {}
        for name in ("budgets", "dis", "dataset_sizes"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have one entry per device")
            vectors[name] = arr
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        for name, value in (("device_ids", ids), ("latency", latency), ("memory_required", memory), *vectors.items()):
            object.__setattr__(self, name, value)

        if self.dis_scale is None:
            mean_dis = float(vectors["dis"].mean())
            object.__setattr__(self, "dis_scale", mean_dis if mean_dis > 0 else 1.0)
        if self.latency_scale is None:
            feasible = memory <= vectors["budgets"][:, None]
            masked = np.where(feasible, latency, np.inf).min(axis=1)
            masked = np.where(np.isfinite(masked), masked, latency.min(axis=1))
            scale = float(masked.mean())
            object.__setattr__(self, "latency_scale", scale if scale > 0 else 1.0)

    @property
    def n_devices(self) -> int:
        return int(self.device_ids.size)

    @property
    def depth(self) -> int:
        return int(self.latency.shape[1])

    @property
    def k_effective(self) -> int:
        return min(self.k, self.n_devices)


def evaluate_batch(scenario: SelectionScenario, sel: np.ndarray, cuts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Penalized objective and violation for rows of (device indices, cuts)."""
    sel = np.atleast_2d(sel)
    cuts = np.atleast_2d(cuts)
    lat = scenario.latency[sel, cuts - 1]
    mem = scenario.memory_required[sel, cuts - 1]
    budgets = scenario.budgets[sel]
    dis_term = scenario.dis[sel].sum(axis=1) / scenario.dis_scale
    if scenario.per_device_latency:
        lat_term = scenario.lam * lat.sum(axis=1) / scenario.latency_scale
    else:
        lat_term = scenario.lam * sel.shape[1] * lat.max(axis=1) / scenario.latency_scale
    violation = (np.maximum(mem - budgets, 0.0) / np.maximum(budgets, 1.0)).sum(axis=1)
    if scenario.d_threshold > 0:
        shortfall = scenario.d_threshold - scenario.dataset_sizes[sel].sum(axis=1)
        violation = violation + np.maximum(shortfall, 0.0) / scenario.d_threshold
    value = dis_term + lat_term + scenario.penalty_weight * violation
    return value, violation


def _assignment_arrays(assignment: SplitAssignment, scenario: SelectionScenario) -> tuple[np.ndarray, np.ndarray]:
    index = {int(d): i for i, d in enumerate(scenario.device_ids)}
    chosen = sorted(index[e.device_id] for e in assignment.entries if e.selected)
    if not chosen:
        raise ValueError("assignment selects no device")
    cut_by_index = {index[e.device_id]: e.cut for e in assignment.entries}
    cuts = [cut_by_index[i] for i in chosen]
    if min(cuts) < 1 or max(cuts) > scenario.depth:
        raise ValueError(f"cuts must lie in 1..{scenario.depth}")
    return np.array(chosen), np.array(cuts)


def objective(assignment: SplitAssignment, scenario: SelectionScenario) -> float:
    sel, cuts = _assignment_arrays(assignment, scenario)
    value, _ = evaluate_batch(scenario, sel, cuts)
    return float(value[0])


def assignment_violation(assignment: SplitAssignment, scenario: SelectionScenario) -> float:
    sel, cuts = _assignment_arrays(assignment, scenario)
    _, violation = evaluate_batch(scenario, sel, cuts)
    return float(violation[0])


def make_assignment(
    scenario: SelectionScenario,
    sel: Sequence[int],
    cuts: Sequence[int],
    predicted: float | None = None,
) -> SplitAssignment:
    cut_of = {int(i): int(c) for i, c in zip(sel, cuts)}
    entries = tuple(
        AssignmentEntry(int(d), i in cut_of, cut_of.get(i, 1)) for i, d in enumerate(scenario.device_ids)
    )
    return SplitAssignment(entries, predicted)


def encode(assignment: SplitAssignment, scenario: SelectionScenario) -> np.ndarray:
    x = np.zeros(scenario.n_devices)
    index = {int(d): i for i, d in enumerate(scenario.device_ids)}
    for e in assignment.entries:
        if e.selected and e.device_id in index:
            x[index[e.device_id]] = e.cut - 0.5
    return x


def decode_batch(X: np.ndarray, k: int, depth: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(X)
    order = np.argsort(-X, axis=1, kind="stable")[:, :k]
    sel = np.sort(order, axis=1)
    cuts = np.clip(np.ceil(np.take_along_axis(X, sel, axis=1)), 1, depth).astype(np.int64)
    return sel, cuts


def decode(x: np.ndarray, scenario: SelectionScenario) -> SplitAssignment:
    sel, cuts = decode_batch(x, scenario.k_effective, scenario.depth)
    return make_assignment(scenario, sel[0], cuts[0])


class SurrogateModel:
    """
    Gaussian process with a squared-exponential kernel and per-dimension
    length scales, fit on standardized targets.

    Length scales are tuned by coordinate search over a fixed grid on the
    log marginal likelihood; the regressor's own optimizer stays off.
    """

    LENGTH_SCALE_GRID = 10.0 ** np.linspace(-1.0, 1.0, 11)

    def __init__(self, dims: int, noise: float = 1e-6, jitter: float = 1e-10, length_scale: float = 1.0):
        if dims < 1:
            raise ValueError("surrogate needs at least one dimension")
        if noise < 0 or length_scale <= 0:
            raise ValueError("noise must be >= 0 and length scales > 0")
        self.dims = dims
        self.noise = noise
        self.jitter = jitter
        self.length_scales = np.full(dims, float(length_scale))
        self.X = np.empty((0, dims))
        self.y = np.empty(0)
        self._gp: GaussianProcessRegressor | None = None

    @property
    def observation_count(self) -> int:
        return int(self.y.size)

    def observe(self, x: np.ndarray, y: float) -> None:
        self.X = np.vstack([self.X, np.asarray(x, dtype=float).reshape(1, -1)])
        self.y = np.append(self.y, float(y))

    def _regressor(self, length_scales: np.ndarray, alpha: float) -> GaussianProcessRegressor:
        return GaussianProcessRegressor(
            kernel=RBF(length_scale=np.array(length_scales, dtype=float)),
            alpha=alpha,
            optimizer=None,
            normalize_y=True,
        )

    def _fitted(self, length_scales: np.ndarray) -> GaussianProcessRegressor:
        if self.observation_count == 0:
            raise ValueError("cannot fit a surrogate without observations")
        try:
            return self._regressor(length_scales, self.noise + self.jitter).fit(self.X, self.y)
        except np.linalg.LinAlgError:
            logging.debug("surrogate: kernel matrix not positive definite, raising alpha to 1e-6")
            return self._regressor(length_scales, max(self.noise, 1e-6)).fit(self.X, self.y)

    def log_marginal_likelihood(self) -> float:
        return float(self._fitted(self.length_scales).log_marginal_likelihood_value_)

    def fit(self, optimize: bool = False, sweeps: int = 1) -> None:
        gp = self._fitted(self.length_scales)
        if optimize and self.observation_count > 1:
            # RBF theta is the log of the length scales
            theta = gp.kernel_.theta.copy()
            best = gp.log_marginal_likelihood(theta)
            grid = np.log(self.LENGTH_SCALE_GRID)
            for _ in range(sweeps):
                for k in range(self.dims):
                    for g in grid:
                        trial = theta.copy()
                        trial[k] = g
                        score = gp.log_marginal_likelihood(trial)
                        if score > best:
                            theta, best = trial, score
            self.length_scales = np.exp(theta)
            gp = self._fitted(self.length_scales)
        self._gp = gp

    def predict(self, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._gp is None:
            raise ValueError("surrogate is not fitted")
        mean, std = self._gp.predict(np.atleast_2d(Xs), return_std=True)
        return np.asarray(mean, dtype=float), np.asarray(std, dtype=float)


def expected_improvement(mean, std, best: float, xi: float = 0.0) -> np.ndarray:
    """EI for minimization; zero where the prediction is certain and no better."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    improvement = best - mean - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = improvement / std
        ei = improvement * norm.cdf(z) + std * norm.pdf(z)
    return np.where(std > 0, np.maximum(ei, 0.0), np.maximum(improvement, 0.0))


def binding_constraints(scenario: SelectionScenario) -> list[str]:
    feasible = scenario.memory_required <= scenario.budgets[:, None]
    usable = feasible.any(axis=1)
    out = []
    blocked = scenario.device_ids[~usable]
    if blocked.size:
        shown = ", ".join(str(d) for d in blocked[:10])
        out.append(f"memory: {blocked.size} device(s) fit no cut within budget ({shown})")
    k = scenario.k_effective
    if usable.sum() < k:
        out.append(f"memory: only {int(usable.sum())} device(s) can host any cut, {k} required")
    if scenario.d_threshold > 0:
        best_data = np.sort(scenario.dataset_sizes[usable])[-k:].sum() if usable.any() else 0.0
        if best_data < scenario.d_threshold:
            out.append(f"data: at most {best_data:.0f} samples selectable, threshold {scenario.d_threshold:.0f}")
    if not out:
        out.append("search: no feasible assignment found within the evaluation budget")
    return out


def _neighbours(parents: np.ndarray, count: int, k: int, depth: int, rng: np.random.Generator) -> np.ndarray:
    """Assignment-level moves around the best points, re-encoded canonically."""
    n = parents.shape[1]
    sel, cuts = decode_batch(parents, k, depth)
    moves = 3 if k < n else 2
    out = np.zeros((count, n))
    for row, p in enumerate(rng.integers(0, parents.shape[0], size=count)):
        s, c = sel[p].copy(), cuts[p].copy()
        slot = int(rng.integers(0, k))
        move = int(rng.integers(0, moves))
        if move == 2:
            s[slot] = rng.choice(np.setdiff1d(np.arange(n), s))
        elif move == 1:
            c[int(rng.integers(0, k))] = rng.integers(1, depth + 1)
        c[slot] = rng.integers(1, depth + 1)
        out[row, s] = c - 0.5
    return out


def bo_select(
    scenario: SelectionScenario,
    eval_budget: int = 100,
    seed=0,
    initial_design: int = 10,
    candidates: int = 512,
    refit_every: int = 10,
    noise: float = 1e-6,
    xi: float = 0.0,
    warm_start: Sequence[SplitAssignment] = (),
) -> SplitAssignment:
    if initial_design < 1 or eval_budget < initial_design:
        raise ValueError(f"eval_budget ({eval_budget}) must be >= initial design size ({initial_design})")
    rng = np.random.default_rng(seed)
    n, depth, k = scenario.n_devices, scenario.depth, scenario.k_effective

    design = qmc.LatinHypercube(d=n, seed=rng).random(initial_design) * depth
    for row, assignment in enumerate(list(warm_start)[:initial_design]):
        design[row] = encode(assignment, scenario)

    gp = SurrogateModel(n, noise=noise)
    seen: set[bytes] = set()
    best_value, best_point = np.inf, None

    def evaluate(x: np.ndarray, sel: np.ndarray, cuts: np.ndarray) -> None:
        nonlocal best_value, best_point
        value, violation = evaluate_batch(scenario, sel, cuts)
        seen.add(np.concatenate([sel, cuts]).tobytes())
        gp.observe(x / depth, math.log1p(float(value[0])))
        if violation[0] == 0 and value[0] < best_value:
            best_value, best_point = float(value[0]), (sel.copy(), cuts.copy())

    sels, cutss = decode_batch(design, k, depth)
    for x, sel, cuts in zip(design, sels, cutss):
        evaluate(x, sel, cuts)
    observed = [x for x in design]

    for step in range(eval_budget - initial_design):
        gp.fit(optimize=step % refit_every == 0)
        order = np.argsort(gp.y, kind="stable")[:5]
        parents = np.array([observed[i] for i in order])
        n_random = candidates // 2
        pool = np.vstack([
            rng.uniform(0.0, depth, size=(n_random, n)),
            _neighbours(parents, candidates - n_random, k, depth, rng),
        ])
        pool_sel, pool_cuts = decode_batch(pool, k, depth)
        fresh = np.array([
            np.concatenate([s, c]).tobytes() not in seen for s, c in zip(pool_sel, pool_cuts)
        ])
        if not fresh.any():
            break
        mean, std = gp.predict(pool[fresh] / depth)
        ei = expected_improvement(mean, std, float(gp.y.min()), xi)
        pick = np.flatnonzero(fresh)[int(np.argmax(ei))]
        evaluate(pool[pick], pool_sel[pick], pool_cuts[pick])
        observed.append(pool[pick])

    if best_point is None:
        raise SelectionInfeasibleError(binding_constraints(scenario))
    assignment = make_assignment(scenario, best_point[0], best_point[1], best_value)
    if assignment_violation(assignment, scenario) != 0:
        raise AssertionError("selected assignment violates a hard constraint")
    return assignment


def brute_force_select(scenario: SelectionScenario) -> SplitAssignment:
    n, depth, k = scenario.n_devices, scenario.depth, scenario.k_effective
    points = math.comb(n, k) * depth ** k
    if n > BRUTE_FORCE_MAX_DEVICES or depth > BRUTE_FORCE_MAX_DEPTH or points > BRUTE_FORCE_MAX_POINTS:
        raise ValueError(
            f"exhaustive search refused for N={n}, V={depth}, K={k} "
            f"(limits N<={BRUTE_FORCE_MAX_DEVICES}, V<={BRUTE_FORCE_MAX_DEPTH})"
        )
    grid = np.array(list(itertools.product(range(1, depth + 1), repeat=k)), dtype=np.int64)
    best_value, best_point = np.inf, None
    for combo in itertools.combinations(range(n), k):
        sel = np.broadcast_to(np.array(combo, dtype=np.int64), grid.shape)
        values, violations = evaluate_batch(scenario, sel, grid)
        values = np.where(violations == 0, values, np.inf)
        i = int(np.argmin(values))
        if values[i] < best_value:
            best_value, best_point = float(values[i]), (np.array(combo), grid[i].copy())
    if best_point is None:
        raise SelectionInfeasibleError(binding_constraints(scenario))
    return make_assignment(scenario, best_point[0], best_point[1], best_value)


def greedy_assignment(scenario: SelectionScenario) -> SplitAssignment:
    """K best devices by their own objective share, each at its fastest feasible cut."""
    feasible = scenario.memory_required <= scenario.budgets[:, None]
    masked = np.where(feasible, scenario.latency, np.inf)
    cuts = np.argmin(masked, axis=1) + 1
    k = scenario.k_effective
    score = scenario.dis / scenario.dis_scale + scenario.lam * k * masked.min(axis=1) / scenario.latency_scale
    sel = np.sort(np.lexsort((np.arange(scenario.n_devices), score))[:k])
    return make_assignment(scenario, sel, cuts[sel])


@dataclass
class CentralManager:
    """Round-to-round selector state: BO settings and the last incumbent."""

    eval_budget: int = 60
    initial_design: int = 10
    candidates: int = 512
    refit_every: int = 10
    noise: float = 1e-6
    xi: float = 0.0
    warm_start: bool = True
    greedy_seed: bool = True
    incumbent: SplitAssignment | None = field(default=None, repr=False)

    def select(self, scenario: SelectionScenario, seed) -> SplitAssignment:
        warm = [self.incumbent] if self.warm_start and self.incumbent is not None else []
        if self.greedy_seed:
            warm.append(greedy_assignment(scenario))
        assignment = bo_select(
            scenario,
            eval_budget=self.eval_budget,
            seed=seed,
            initial_design=self.initial_design,
            candidates=self.candidates,
            refit_every=self.refit_every,
            noise=self.noise,
            xi=self.xi,
            warm_start=warm,
        )
        self.incumbent = assignment
        logging.debug("bo_select: %s devices, objective %.4f", len(assignment.selected_ids), assignment.predicted_objective)
        return assignment


def random_select(scenario: SelectionScenario, rng: np.random.Generator, cuts: Sequence[int] | int) -> SplitAssignment:
    """K devices uniformly at random; ``cuts`` is one cut for all or a per-device table."""
    k = scenario.k_effective
    sel = np.sort(rng.choice(scenario.n_devices, size=k, replace=False))
    return make_assignment(scenario, sel, _cuts_for(sel, cuts))


def _cuts_for(sel: np.ndarray, cuts: Sequence[int] | int) -> list[int]:
    if isinstance(cuts, (int, np.integer)):
        return [int(cuts)] * len(sel)
    return [int(cuts[i]) for i in sel]


def latency_greedy_cuts(scenario: SelectionScenario) -> np.ndarray:
    """Each device's fastest cut, ignoring memory."""
    return np.argmin(scenario.latency, axis=1) + 1


def tiered_select(
    scenario: SelectionScenario,
    rng: np.random.Generator,
    tiers: int,
    cuts: Sequence[int] | int,
) -> SplitAssignment:
    """Group devices into latency tiers, draw one tier uniformly, pick K inside it."""
    full = scenario.latency[:, -1]
    order = np.argsort(full, kind="stable")
    groups = [g for g in np.array_split(order, max(1, min(tiers, scenario.n_devices))) if g.size]
    k = scenario.k_effective
    tier = groups[int(rng.integers(0, len(groups)))]
    if tier.size >= k:
        sel = rng.choice(tier, size=k, replace=False)
    else:
        rest = np.setdiff1d(np.arange(scenario.n_devices), tier)
        sel = np.concatenate([tier, rng.choice(rest, size=k - tier.size, replace=False)])
    sel = np.sort(sel)
    return make_assignment(scenario, sel, _cuts_for(sel, cuts))


def utility_select(
    scenario: SelectionScenario,
    stat: np.ndarray,
    rng: np.random.Generator,
    epsilon: float,
    alpha: float,
    preferred_quantile: float,
    cuts: Sequence[int] | int,
) -> SplitAssignment:
    """Statistical utility discounted by a latency penalty, plus random exploration."""
    k = scenario.k_effective
    duration = scenario.latency[np.arange(scenario.n_devices), np.asarray(_cuts_for(np.arange(scenario.n_devices), cuts)) - 1]
    preferred = float(np.quantile(duration, preferred_quantile))
    penalty = np.where(duration > preferred, (preferred / duration) ** alpha, 1.0)
    utility = np.asarray(stat, dtype=float) * penalty
    explore = int(round(epsilon * k))
    exploit = k - explore
    ranked = np.lexsort((np.arange(scenario.n_devices), -utility))
    chosen = list(ranked[:exploit])
    if explore:
        rest = np.setdiff1d(np.arange(scenario.n_devices), chosen)
        chosen.extend(rng.choice(rest, size=explore, replace=False))
    sel = np.sort(np.array(chosen, dtype=np.int64))
    return make_assignment(scenario, sel, _cuts_for(sel, cuts))
