"""Training-loop simulation with per-sequence plan selection and hot switching.

Sequences are visited short-to-long. Each one gets a plan from the selector
and is executed layer by layer through the function registry, either
numerically on a small grid or with the closed-form costs at full scale.
Because every executor reads and writes the unified layouts, consecutive
layers never need a redistribution step; numeric runs check this against
the comm log.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .costmodel import CostModelSet, GridParams
from .costmodel.analytic import (RETAINED_UNITS, collective_schedule, comm_time, layer_flops,
                                 layer_time, working_set_elems)
from .layouts import ModelConfig, Role, compatible, shard, spec_layout, unshard
from .selector import LayerCostSource, PlanCache, StrategyPlan, select_plan
from .simgrid import DeviceGrid, SimTensor
from .strategies import (REGISTRY, DenseWeights, FunctionRegistry, LayerWeights, OpKind,
                         Strategy, io_layouts, layer_norm, reference_ffn, reference_mha)

K = 1024
INF = math.inf
# numeric mode refuses runs where b * s * h * L or h * h * L exceeds this many elements
NUMERIC_MAX_ELEMS = 1 << 21


# -- datasets ------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    """Explicit lengths, or a bucket histogram sampled ``count`` times."""

    lengths: tuple[int, ...] | None = None
    buckets: tuple[tuple[float, float, float], ...] = ()  # (lo, hi, probability)
    max_len: int | None = None
    count: int = 0
    name: str = "custom"

    def __post_init__(self) -> None:
        if self.lengths is not None:
            if any(int(s) < 1 for s in self.lengths):
                raise ValueError("explicit lengths must be >= 1")
            return
        if not self.buckets:
            raise ValueError("dataset needs explicit lengths or a histogram")
        total = sum(prob for _, _, prob in self.buckets)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"bucket probabilities sum to {total!r}, not 1")
        if any(prob < 0 for _, _, prob in self.buckets):
            raise ValueError("negative bucket probability")
        if self.max_len is None or self.max_len < 1:
            raise ValueError("histogram datasets need a positive max_len")
        for lo, hi, _ in self.buckets:
            if not lo < hi:
                raise ValueError(f"empty bucket [{lo}, {hi})")
            if lo > self.max_len or (hi != INF and hi > self.max_len + 1):
                raise ValueError(f"bucket [{lo}, {hi}) exceeds max length {self.max_len}")
        if self.count < 0:
            raise ValueError("sample count must be non-negative")

    def to_json(self) -> dict:
        out: dict = {"name": self.name}
        if self.lengths is not None:
            out["lengths"] = list(self.lengths)
        else:
            out["buckets"] = [[lo, None if hi == INF else hi, prob]
                              for lo, hi, prob in self.buckets]
            out["max_len"] = self.max_len
            out["count"] = self.count
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "DatasetSpec":
        if "lengths" in obj:
            return cls(lengths=tuple(int(s) for s in obj["lengths"]), name=obj.get("name", "custom"))
        buckets = tuple((float(lo), INF if hi is None else float(hi), float(prob))
                        for lo, hi, prob in obj["buckets"])
        return cls(buckets=buckets, max_len=int(obj["max_len"]), count=int(obj["count"]),
                   name=obj.get("name", "custom"))


BUCKET_EDGES = (0, 4 * K, 8 * K, 16 * K, 32 * K, 64 * K, 128 * K, INF)


def histogram_spec(name: str, percents: Sequence[float], max_len: int, count: int) -> DatasetSpec:
    """Dataset over the standard length buckets; percentages are renormalized."""
    total = sum(percents)
    buckets = tuple((lo, hi, pct / total)
                    for lo, hi, pct in zip(BUCKET_EDGES, BUCKET_EDGES[1:], percents))
    return DatasetSpec(buckets=buckets, max_len=max_len, count=count, name=name)


GITHUBCODE_PERCENTS = (65.7, 14.5, 9.8, 5.1, 2.7, 1.1, 1.1)
GRCH38_PERCENTS = (3.5, 26.4, 28.7, 21.2, 11.9, 5.5, 1.9)


def githubcode(count: int = 1000) -> DatasetSpec:
    return histogram_spec("GitHubCode", GITHUBCODE_PERCENTS, 309 * K, count)


def grch38(count: int = 1000) -> DatasetSpec:
    return histogram_spec("GRCh38", GRCH38_PERCENTS, 624 * K, count)


DATASETS = {"githubcode": githubcode, "grch38": grch38}


def load_dataset(spec: DatasetSpec, seed: int = 42, multiple: int = 1) -> list[int]:
    """Sample lengths; histogram draws are rounded up to ``multiple`` and capped at max_len."""
    if spec.lengths is not None:
        return [int(s) for s in spec.lengths]
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    rng = np.random.default_rng(seed)
    probs = np.array([prob for _, _, prob in spec.buckets])
    which = rng.choice(len(probs), size=spec.count, p=probs / probs.sum())
    cap = spec.max_len // multiple * multiple
    if cap < 1:
        raise ValueError(f"max length {spec.max_len} is below the alignment {multiple}")
    out = []
    for i in which:
        lo, hi, _ = spec.buckets[i]
        lo = max(int(lo), 1)
        hi = spec.max_len + 1 if hi == INF else min(int(hi), spec.max_len + 1)
        s = int(rng.integers(lo, hi))
        s = -(-s // multiple) * multiple
        out.append(min(s, cap))
    return out


def curriculum_sort(lengths: Iterable[int]) -> list[int]:
    return sorted(lengths)


# -- transformer layers --------------------------------------------------

def reference_layer(x: np.ndarray, weights: DenseWeights, n: int) -> np.ndarray:
    """Pre-norm residual block on dense activations."""
    x1 = x + reference_mha(layer_norm(x), weights, n)
    return x1 + reference_ffn(layer_norm(x1), weights)


def reference_stack(x: np.ndarray, layers: Sequence[DenseWeights], n: int) -> np.ndarray:
    for w in layers:
        x = reference_layer(x, w, n)
    return x


def _local(grid: DeviceGrid, xs: Sequence[SimTensor], fn) -> list[SimTensor]:
    return [grid.put(t.device, fn(t.data)) for t in xs]


def layer_forward(strategy: Strategy, grid: DeviceGrid, x: Sequence[SimTensor],
                  weights: LayerWeights, config: ModelConfig,
                  registry: FunctionRegistry = REGISTRY) -> list[SimTensor]:
    """One residual block; layer norm and residual adds are per-token and local."""
    ln = _local(grid, x, layer_norm)
    a = registry.lookup(strategy, OpKind.MHA)(grid, ln, weights, config)
    grid.release(*ln)
    x1 = [grid.put(t.device, t.data + u.data) for t, u in zip(x, a)]
    grid.release(*a)
    ln = _local(grid, x1, layer_norm)
    z = registry.lookup(strategy, OpKind.FFN)(grid, ln, weights, config)
    grid.release(*ln)
    out = [grid.put(t.device, t.data + u.data) for t, u in zip(x1, z)]
    grid.release(*z, *x1)
    return out


def run_layers(plan: Sequence[Strategy], grid: DeviceGrid, x: Sequence[SimTensor],
               weights: Sequence[LayerWeights], config: ModelConfig,
               registry: FunctionRegistry = REGISTRY) -> list[SimTensor]:
    if len(plan) != len(weights):
        raise ValueError(f"plan has {len(plan)} layers, weights have {len(weights)}")
    cur = list(x)
    for strategy, w in zip(plan, weights):
        nxt = layer_forward(strategy, grid, cur, w, config, registry)
        if cur is not x:
            grid.release(*cur)
        cur = nxt
    return cur


def expected_comm(plan: Sequence[Strategy], b: int, s: int, h: int, p: int,
                  bytes_per_elem: int) -> list[tuple[str, int]]:
    """The intra-op collectives a plan may emit, in order; nothing else is allowed."""
    out: list[tuple[str, int]] = []
    for st in plan:
        out += collective_schedule(st, b, s, h, p, bytes_per_elem)
    return out


# -- analytic plan costs -------------------------------------------------

def layer_param_bytes(config: ModelConfig, gp: GridParams) -> float:
    return gp.bytes_per_elem * 12 * config.h * config.h / gp.p


def analytic_plan_cost(config: ModelConfig, plan: Sequence[Strategy], b: int, s: int,
                       gp: GridParams, switch_overhead_bytes: float | None = None) -> tuple[float, float]:
    """(time, peak bytes) of a possibly mixed plan.

    Retained activations add up over layers, the transient working set is the
    largest single layer's, and any layer switch costs one extra transient.
    """
    h, n, p = config.h, config.n, gp.p
    if switch_overhead_bytes is None:
        switch_overhead_bytes = layer_param_bytes(config, gp)
    times: dict[Strategy, float] = {}
    time = 0.0
    elems = 0.0
    for st in plan:
        if st not in times:
            times[st] = layer_time(config, st, b, s, gp)
        time += times[st]
        elems += 12 * h * h / p + RETAINED_UNITS[st] * b * s * h / p
        if st is Strategy.COLOSSAL_Z:
            elems += b * n * (s / p) * s
    elems += max(working_set_elems(st, b, s, h, n, p) for st in set(plan))
    mem = gp.bytes_per_elem * elems
    if any(a != c for a, c in zip(plan, plan[1:])):
        mem += switch_overhead_bytes
    return time, mem


# -- simulation ----------------------------------------------------------

@dataclass(frozen=True)
class SequenceRecord:
    index: int
    s: int
    plan: tuple[str, ...]
    predicted_time_s: float
    time_s: float
    peak_mem_bytes: float
    switched: bool
    layer_switches: int
    oom: bool

    def to_json(self) -> dict:
        d = asdict(self)
        d["plan"] = list(self.plan)
        return d


@dataclass
class TrainingTrace:
    records: list[SequenceRecord] = field(default_factory=list)

    @property
    def cumulative_time_s(self) -> float:
        total = 0.0
        for r in self.records:
            total += r.time_s
        return total

    @property
    def oom(self) -> bool:
        return any(r.oom for r in self.records)

    @property
    def max_supported_length(self) -> int:
        best = 0
        for r in self.records:
            if r.oom:
                break
            best = max(best, r.s)
        return best

    @property
    def switch_count(self) -> int:
        return sum(r.switched for r in self.records)

    def time_to_length(self, s_limit: int) -> float:
        total = 0.0
        for r in self.records:
            if r.oom or r.s > s_limit:
                break
            total += r.time_s
        return total

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in self.records)

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    def write_csv(self, path: str | Path) -> None:
        cols = list(SequenceRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fp:
            w = csv.writer(fp, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                row = r.to_json()
                row["plan"] = "|".join(r.plan)
                w.writerow([repr(v) if isinstance(v, float) else v for v in
                            (row[c] for c in cols)])

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "TrainingTrace":
        records = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                obj["plan"] = tuple(obj["plan"])
                records.append(SequenceRecord(**obj))
            except (ValueError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trace record ({exc})") from None
        return cls(records)


@dataclass
class SimSetup:
    config: ModelConfig
    models: LayerCostSource
    gp: GridParams = field(default_factory=GridParams)
    gamma: float = 0.05
    mode: str = "analytic"
    smoothing: bool = True
    b: int = 1
    seed: int = 42
    switch_overhead_bytes: float | None = None
    # Plans are chosen against capacity * (1 - reserve_frac): summed per-layer
    # predictions miss the gap between average and largest working set and
    # the switching transient, which the simulated peak does include.
    reserve_frac: float = 0.02
    registry: FunctionRegistry = REGISTRY


class _NumericBackend:
    """Runs plans on a small grid with fixed random weights."""

    def __init__(self, setup: SimSetup) -> None:
        cfg = setup.config
        if cfg.h * cfg.h * cfg.L > NUMERIC_MAX_ELEMS:
            raise ValueError(f"numeric mode is limited to h*h*L <= {NUMERIC_MAX_ELEMS}, "
                             f"got {cfg.h * cfg.h * cfg.L}")
        rng = np.random.default_rng(setup.seed)
        self.dense = [DenseWeights.random(cfg.h, rng) for _ in range(cfg.L)]
        self.setup = setup

    def run(self, index: int, s: int, plan: Sequence[Strategy]) -> tuple[float, float]:
        setup = self.setup
        cfg, gp, b = setup.config, setup.gp, setup.b
        if b * s * cfg.h * cfg.L > NUMERIC_MAX_ELEMS:
            raise ValueError(f"numeric mode is limited to b*s*h*L <= {NUMERIC_MAX_ELEMS}, "
                             f"got {b * s * cfg.h * cfg.L}")
        grid = DeviceGrid(gp.p, gp.capacity_bytes, gp.bytes_per_elem)
        weights = [LayerWeights.from_dense(w, grid) for w in self.dense]
        rng = np.random.default_rng([setup.seed, index])
        x = rng.normal(size=(b, s, cfg.h))
        cfg_b = replace(cfg, b=b)
        xs = shard(x, spec_layout(Role.X_MHA, p=gp.p), grid)
        run_layers(plan, grid, xs, weights, cfg_b, setup.registry)
        seen = [(c.primitive, c.bytes) for c in grid.comm_log]
        if seen != expected_comm(plan, b, s, cfg.h, gp.p, gp.bytes_per_elem):
            raise RuntimeError(f"sequence {index}: comm log holds collectives outside "
                               "the strategies' intra-op patterns")
        compute = len(plan) * 3 * layer_flops(b, s, cfg.h) / gp.flops_per_s / gp.p
        peak = max(grid.peak_memory(d) for d in range(gp.p))
        return compute + comm_time(grid.comm_log, gp), float(peak)


def run_training_sim(lengths: Iterable[int], setup: SimSetup) -> TrainingTrace:
    """Visit sequences short-to-long; stop at the first simulated OOM."""
    if setup.mode not in ("analytic", "numeric"):
        raise ValueError(f"mode must be 'analytic' or 'numeric', got {setup.mode!r}")
    if isinstance(setup.models, CostModelSet) and not setup.models.models:
        raise ValueError("cost models are not fitted")
    cfg, gp = setup.config, setup.gp
    backend = _NumericBackend(setup) if setup.mode == "numeric" else None
    cache = PlanCache()
    trace = TrainingTrace()
    prev: StrategyPlan | None = None
    if not 0.0 <= setup.reserve_frac < 1.0:
        raise ValueError("reserve_frac must lie in [0, 1)")
    budget = gp.capacity_bytes * (1.0 - setup.reserve_frac)
    for index, s in enumerate(curriculum_sort(lengths)):
        plan = select_plan(setup.b, s, cfg, setup.models, cache, budget,
                           setup.gamma, prev if setup.smoothing else None)
        layers = [Strategy(st) for st in plan.per_layer]
        if backend is not None:
            time_s, peak = backend.run(index, s, layers)
            if len(set(layers)) > 1 and setup.switch_overhead_bytes:
                peak += setup.switch_overhead_bytes
        else:
            time_s, peak = analytic_plan_cost(cfg, layers, setup.b, s, gp,
                                              setup.switch_overhead_bytes)
        oom = peak > gp.capacity_bytes
        trace.records.append(SequenceRecord(
            index=index, s=s, plan=tuple(st.value for st in layers),
            predicted_time_s=plan.predicted_time_s, time_s=0.0 if oom else time_s,
            peak_mem_bytes=peak, switched=prev is not None and prev.per_layer != plan.per_layer,
            layer_switches=plan.switches, oom=oom))
        if oom:
            break
        prev = plan
    return trace


# -- ablation and case-study accounting ----------------------------------

FEATURES = ("RF", "smoothing")


@dataclass(frozen=True)
class AblationRow:
    name: str
    seq_len: int
    seq_len_full: int
    time_s: float
    time_full_s: float

    @property
    def saving(self) -> float:
        """Percent of the ablated run's time saved by the full setup."""
        return 100.0 * (self.time_s - self.time_full_s) / self.time_s if self.time_s else 0.0

    def to_json(self) -> dict:
        return {"name": self.name, "Seq_len": self.seq_len, "Seq_len_full": self.seq_len_full,
                "Time": self.time_s, "Time_full": self.time_full_s, "Saving": self.saving}


def ablate_setup(setup: SimSetup, disable: Iterable[Strategy | str]) -> SimSetup:
    models, smoothing = setup.models, setup.smoothing
    drop = []
    for item in disable:
        if item == "RF":
            models = models.without_forest()
        elif item == "smoothing":
            smoothing = False
        else:
            drop.append(Strategy(item))
    if drop:
        models = models.without(drop)
    return replace(setup, models=models, smoothing=smoothing)


def ablation_run(lengths: Sequence[int], setup: SimSetup, disable: Iterable[Strategy | str],
                 full: TrainingTrace | None = None) -> tuple[AblationRow, TrainingTrace]:
    disable = list(disable)
    ablated = run_training_sim(lengths, ablate_setup(setup, disable))
    full = full if full is not None else run_training_sim(lengths, setup)
    common = min(full.max_supported_length, ablated.max_supported_length)
    name = "w/o " + "+".join(Strategy(d).value if d not in FEATURES else d for d in disable) \
        if disable else "full"
    row = AblationRow(name, ablated.max_supported_length, full.max_supported_length,
                      ablated.time_to_length(common), full.time_to_length(common))
    return row, ablated


@dataclass(frozen=True)
class ColdRestart:
    """Per-restart cost of a framework that must reinitialize to change strategy."""

    import_s: float = 3.34
    data_reload_s: float = 5.0
    model_reinit_s: float = 22.0
    optimizer_s: float = 1.0

    @property
    def total_s(self) -> float:
        return self.import_s + self.data_reload_s + self.model_reinit_s + self.optimizer_s


def switch_overhead_report(trace: TrainingTrace, cold: ColdRestart = ColdRestart()) -> dict:
    k = trace.switch_count
    return {
        "switch_events": k,
        "layer_switches": sum(r.layer_switches for r in trace.records),
        "hot_switch_s": 0.0,
        "cold_restart_s": cold.total_s,
        "reinit_share": cold.model_reinit_s / cold.total_s,
        "components_s": asdict(cold),
        "savings_s": k * cold.total_s,
    }


# -- verification suites -------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


def rel_error(got: np.ndarray, want: np.ndarray) -> float:
    return float(np.abs(got - want).max() / max(np.abs(want).max(), 1e-300))


def check_strategy(strategy: Strategy, op: OpKind, p: int, b: int, s: int, h: int, n: int,
                   rng: np.random.Generator, tol: float = 1e-9) -> Check:
    config = ModelConfig(h=h, n=n, L=1, b=b)
    grid = DeviceGrid(p, 1 << 40)
    dense = DenseWeights.random(h, rng)
    x = rng.normal(size=(b, s, h))
    in_layout, out_layout = io_layouts(strategy, op, p)
    out = REGISTRY.lookup(strategy, op)(grid, shard(x, in_layout, grid),
                                        LayerWeights.from_dense(dense, grid), config)
    want = reference_mha(x, dense, n) if op is OpKind.MHA else reference_ffn(x, dense)
    err = rel_error(unshard(out, out_layout), want)
    return Check(f"{strategy.value}.{op.value} p={p} b={b} s={s} h={h} n={n}", err <= tol,
                 f"rel_err={err:.2e}")


def check_chain(plan: Sequence[Strategy], p: int, b: int, s: int, h: int, n: int,
                rng: np.random.Generator, tol: float = 1e-9) -> Check:
    config = ModelConfig(h=h, n=n, L=len(plan), b=b)
    grid = DeviceGrid(p, 1 << 40)
    dense = [DenseWeights.random(h, rng) for _ in plan]
    x = rng.normal(size=(b, s, h))
    layout = spec_layout(Role.X_MHA, p=p)
    out = run_layers(plan, grid, shard(x, layout, grid),
                     [LayerWeights.from_dense(w, grid) for w in dense], config)
    err = rel_error(unshard(out, layout), reference_stack(x, dense, n))
    seen = [(c.primitive, c.bytes) for c in grid.comm_log]
    clean = seen == expected_comm(plan, b, s, h, p, grid.bytes_per_elem)
    name = "chain " + ">".join(st.value for st in plan) + f" p={p}"
    return Check(name, err <= tol and clean, f"rel_err={err:.2e} comm_clean={clean}")


def closure_checks(p: int) -> list[Check]:
    out = []
    for a in Strategy:
        for c in Strategy:
            ok = compatible(io_layouts(a, OpKind.FFN, p)[1], io_layouts(c, OpKind.MHA, p)[0])
            out.append(Check(f"closure {a.value}->{c.value} p={p}", ok))
    return out


def verify_suite(p: int, seed: int = 42, trials: int = 3) -> list[Check]:
    """Strategy equivalence, hot-switch chains and layout closure at one grid size."""
    rng = np.random.default_rng(seed)
    checks = closure_checks(p)
    for _ in range(trials):
        n = p * int(rng.choice([1, 2]))
        h = n * int(rng.choice([2, 4]))
        s = p * int(rng.integers(1, 5))
        for st in Strategy:
            for op in OpKind:
                checks.append(check_strategy(st, op, p, 1, s, h, n, rng))
        plan = [Strategy(v) for v in rng.choice([st.value for st in Strategy], size=4)]
        checks.append(check_chain(plan, p, 1, s, h, n, rng))
    return checks
