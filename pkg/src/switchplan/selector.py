"""Heuristic layer-wise strategy selection under a memory budget.

The search follows the reference selection procedure line by line: prune
dominated strategies, return the fastest uniform plan when it fits,
otherwise collect feasible uniform plans and the mixed plans produced by
rolling lighter strategies into the tail of the layer list, and pick the
fastest. Costs are per layer; a plan costs the sum over its layers.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Protocol, Sequence

from .layouts import ModelConfig
from .strategies import STRATEGY_ORDER, Strategy

Label = Hashable


class LayerCostSource(Protocol):
    version: int

    def layer_costs(self, b: int, s: int) -> Mapping[Label, tuple[float, float]]:
        """Per-layer (time, memory) for every available strategy."""


@dataclass
class CallCounter:
    predictions: int = 0  # strategy cost-model queries
    layer_evals: int = 0  # per-layer cost lookups while scoring plans

    @property
    def total(self) -> int:
        return self.predictions + self.layer_evals


@dataclass(frozen=True)
class StrategyPlan:
    per_layer: tuple[Label, ...]
    predicted_time_s: float
    predicted_mem_bytes: float

    def __len__(self) -> int:
        return len(self.per_layer)

    @property
    def switches(self) -> int:
        return sum(a != b for a, b in zip(self.per_layer, self.per_layer[1:]))

    def to_json(self, b: int, s: int) -> dict:
        return {"b": b, "s": s, "layers": [_label_name(x) for x in self.per_layer],
                "time_s": self.predicted_time_s, "mem_bytes": self.predicted_mem_bytes}

    def dumps(self, b: int, s: int) -> str:
        return json.dumps(self.to_json(b, s), sort_keys=True)


@dataclass
class PlanCache:
    """Plans keyed by (b, s), invalidated when the cost models are refitted."""

    plans: dict[tuple[int, int], StrategyPlan] = field(default_factory=dict)
    version: int | None = None

    def get(self, b: int, s: int, version: int) -> StrategyPlan | None:
        if version != self.version:
            self.plans.clear()
            self.version = version
        return self.plans.get((b, s))

    def put(self, b: int, s: int, plan: StrategyPlan) -> None:
        self.plans[(b, s)] = plan


class TableCosts:
    """Fixed per-layer costs, independent of (b, s); handy for synthetic studies."""

    def __init__(self, table: Mapping[Label, tuple[float, float]], version: int = 0) -> None:
        self.table = dict(table)
        self.version = version

    def layer_costs(self, b: int, s: int) -> Mapping[Label, tuple[float, float]]:
        return self.table


def _label_name(x: Label) -> str:
    return x.value if isinstance(x, Strategy) else str(x)


def _name_key(x: Label) -> tuple:
    if isinstance(x, Strategy):
        return (0, STRATEGY_ORDER[x], "")
    return (1, 0, str(x))


@dataclass(frozen=True)
class RankedStrategy:
    strategy: Label
    time: float
    mem: float


def pop_useless(candidates: Mapping[Label, tuple[float, float]]) -> list[RankedStrategy]:
    """Drop strategies beaten on both time and memory; sort the rest by time."""
    if not candidates:
        raise ValueError("no candidate strategies")
    items = [RankedStrategy(k, float(t), float(m)) for k, (t, m) in candidates.items()]
    kept = []
    for a in items:
        dominated = any(
            b.time <= a.time and b.mem <= a.mem and (b.time < a.time or b.mem < a.mem)
            for b in items)
        if not dominated:
            kept.append(a)
    kept.sort(key=lambda r: (r.time, r.mem, _name_key(r.strategy)))
    return kept


def plan_time(plan: Sequence[Label], costs: Mapping[Label, tuple[float, float]],
              counter: CallCounter | None = None) -> float:
    total = 0.0
    for st in plan:
        total += costs[st][0]
    if counter is not None:
        counter.layer_evals += len(plan)
    return total


def plan_mem(plan: Sequence[Label], costs: Mapping[Label, tuple[float, float]]) -> float:
    total = 0.0
    for st in plan:
        total += costs[st][1]
    return total


def plan_feasible(plan: Sequence[Label], costs: Mapping[Label, tuple[float, float]],
                  capacity: float, counter: CallCounter | None = None) -> bool:
    """Strict ``sum of layer memory < capacity``, stopping at the first prefix that fails."""
    total = 0.0
    for i, st in enumerate(plan):
        total += costs[st][1]
        if total >= capacity:
            if counter is not None:
                counter.layer_evals += i + 1
            return False
    if counter is not None:
        counter.layer_evals += len(plan)
    return True


def _make_plan(layers: Sequence[Label], costs) -> StrategyPlan:
    return StrategyPlan(tuple(layers), plan_time(layers, costs), plan_mem(layers, costs))


def candidate_plans(ranked: Sequence[RankedStrategy], L: int,
                    costs: Mapping[Label, tuple[float, float]], capacity: float,
                    counter: CallCounter | None = None) -> tuple[list[list[Label]], list[Label] | None]:
    """Run the search loop; returns (feasible candidates, early winner or None)."""
    P = [r.strategy for r in ranked]
    options: list[list[Label]] = []
    for i in range(len(P)):
        strategies = [P[i]] * L
        fits = plan_feasible(strategies, costs, capacity, counter)
        if i == 0 and fits:
            return options, strategies
        if fits:
            options.append(list(strategies))
            continue
        # The list is not reset between k iterations: after k's sweep it is
        # uniformly P[k], which becomes the prefix for k + 1.
        for k in range(i + 1, len(P)):
            for _ in range(L):
                strategies.pop(0)
                strategies.append(P[k])
                if plan_feasible(strategies, costs, capacity, counter):
                    options.append(list(strategies))
    return options, None


def select_plan(b: int, s: int, config: ModelConfig, models: LayerCostSource,
                cache: PlanCache | None, capacity_bytes: float, gamma: float = 0.05,
                prev_plan: StrategyPlan | None = None,
                counter: CallCounter | None = None) -> StrategyPlan:
    L = config.L
    if L <= 0:
        raise ValueError("model has no layers")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    counter = counter if counter is not None else CallCounter()
    if cache is not None:
        hit = cache.get(b, s, models.version)
        if hit is not None:
            return hit

    costs = dict(models.layer_costs(b, s))
    counter.predictions += 2 * len(costs)
    ranked = pop_useless(costs)
    options, early = candidate_plans(ranked, L, costs, capacity_bytes, counter)
    if early is not None:
        best = early
    elif options:
        times = [plan_time(o, costs, counter) for o in options]
        best = options[min(range(len(options)), key=times.__getitem__)]
    else:
        lightest = min(ranked, key=lambda r: r.mem).strategy
        best = [lightest] * L
    plan = _make_plan(best, costs)
    if cache is not None:
        cache.put(b, s, plan)

    if (prev_plan is not None and len(prev_plan) == L and prev_plan.per_layer != plan.per_layer
            and all(st in costs for st in prev_plan.per_layer)):
        if plan_feasible(prev_plan.per_layer, costs, capacity_bytes, counter):
            prev_time = plan_time(prev_plan.per_layer, costs, counter)
            if prev_time <= (1.0 + gamma) * plan.predicted_time_s:
                return _make_plan(prev_plan.per_layer, costs)
    return plan


def brute_force_plan(b: int, s: int, config: ModelConfig, models: LayerCostSource,
                     capacity_bytes: float, limit: int = 10 ** 5) -> StrategyPlan | None:
    """Exact constrained minimum over all layer assignments.

    Plan cost is a sum over layers, so layer order never matters and it is
    enough to visit each multiset of strategies once.
    """
    costs = dict(models.layer_costs(b, s))
    labels = sorted(costs, key=_name_key)
    n_sets = math.comb(len(labels) + config.L - 1, config.L)
    if n_sets > limit:
        raise ValueError(f"{n_sets} strategy multisets exceed the limit of {limit}")
    best, best_time = None, float("inf")
    for layers in itertools.combinations_with_replacement(labels, config.L):
        if plan_mem(layers, costs) < capacity_bytes:
            t = plan_time(layers, costs)
            if t < best_time:
                best, best_time = layers, t
    return None if best is None else _make_plan(best, costs)
