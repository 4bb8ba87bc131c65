"""Sequence-aware hybrid cost models.

Inside the profiled length range a random forest interpolates; beyond the
longest profiled length a low-degree polynomial extrapolates. One model
pair (time, memory) exists per parallel strategy of a model configuration.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from ..layouts import ModelConfig
from ..strategies import STRATEGY_ORDER, Strategy
from .analytic import ProfileRecord
from .forest import RandomForest
from .poly import PolyModel, fit_poly

TARGETS = ("time", "mem")
CSV_COLUMNS = ("strategy", "h", "n", "L", "b", "s", "time_s", "mem_bytes")
CONTINUOUS = ("h", "n", "L", "s")


class ProfileFormatError(ValueError):
    pass


def _target(rec: ProfileRecord, target: str) -> float:
    if target == "time":
        return rec.time_s
    if target == "mem":
        return rec.mem_bytes
    raise ValueError(f"unknown target {target!r}; expected 'time' or 'mem'")


@dataclass(frozen=True)
class FeatureEncoder:
    """One-hot over the strategies seen in training, then min-max scaled h, n, L, s."""

    strategies: tuple[Strategy, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @classmethod
    def from_records(cls, records: Sequence[ProfileRecord]) -> "FeatureEncoder":
        strategies = tuple(sorted({r.strategy for r in records}, key=STRATEGY_ORDER.__getitem__))
        raw = np.array([_raw(r.config, r.s) for r in records], dtype=np.float64)
        return cls(strategies, tuple(raw.min(axis=0)), tuple(raw.max(axis=0)))

    def encode(self, strategy: Strategy, config: ModelConfig, s: float) -> np.ndarray:
        onehot = [1.0 if strategy is st else 0.0 for st in self.strategies]
        if sum(onehot) != 1.0:
            raise KeyError(f"strategy {strategy} not in encoder {self.strategies}")
        cont = []
        for v, lo, hi in zip(_raw(config, s), self.lo, self.hi):
            cont.append((v - lo) / (hi - lo) if hi > lo else 0.0)
        return np.array(onehot + cont)

    def to_json(self) -> dict:
        return {"strategies": [s.value for s in self.strategies],
                "lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureEncoder":
        return cls(tuple(Strategy(s) for s in obj["strategies"]),
                   tuple(obj["lo"]), tuple(obj["hi"]))


def _raw(config: ModelConfig, s: float) -> tuple[float, float, float, float]:
    return (float(config.h), float(config.n), float(config.L), float(s))


@dataclass
class ForestModel:
    forest: RandomForest
    encoder: FeatureEncoder

    def predict(self, strategy: Strategy, config: ModelConfig, s: float) -> float:
        return float(self.forest.predict(self.encoder.encode(strategy, config, s))[0])

    def to_json(self) -> dict:
        return {"forest": self.forest.to_json(), "encoder": self.encoder.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "ForestModel":
        return cls(RandomForest.from_json(obj["forest"]), FeatureEncoder.from_json(obj["encoder"]))


def fit_forest(records: Sequence[ProfileRecord], target: str, seed: int = 42,
               encoder: FeatureEncoder | None = None, n_estimators: int = 50,
               max_depth: int = 10) -> ForestModel:
    if not records:
        raise ValueError("no profile records to fit")
    if len({r.s for r in records}) < 2:
        raise ValueError("need at least 2 distinct sequence lengths")
    encoder = encoder or FeatureEncoder.from_records(records)
    X = np.array([encoder.encode(r.strategy, r.config, r.s) for r in records])
    y = np.array([_target(r, target) for r in records])
    forest = RandomForest(n_estimators=n_estimators, max_depth=max_depth, seed=seed).fit(X, y)
    return ForestModel(forest, encoder)


def fit_poly_records(records: Sequence[ProfileRecord], target: str) -> PolyModel:
    if not records:
        raise ValueError("no profile records to fit")
    s = np.array([r.s for r in records], dtype=np.float64)
    y = np.array([_target(r, target) for r in records])
    return fit_poly(s, y)


@dataclass
class HybridCostModel:
    config: ModelConfig
    strategy: Strategy
    forest_time: ForestModel
    forest_mem: ForestModel
    poly_time: PolyModel
    poly_mem: PolyModel
    s_profile_max: int
    oom_threshold_bytes: float
    use_forest: bool = True

    def branch(self, s: float) -> str:
        return "forest" if self.use_forest and s <= self.s_profile_max else "poly"

    def predict_with_branch(self, s: float, target: str) -> tuple[float, str]:
        if s < 1:
            raise ValueError(f"sequence length must be >= 1, got {s}")
        branch = self.branch(s)
        if branch == "forest":
            fm = self.forest_time if target == "time" else self.forest_mem
            if target not in TARGETS:
                raise ValueError(f"unknown target {target!r}")
            return fm.predict(self.strategy, self.config, s), branch
        pm = self.poly_time if target == "time" else self.poly_mem
        if target not in TARGETS:
            raise ValueError(f"unknown target {target!r}")
        return float(pm.predict(s)), branch

    def predict(self, s: float, target: str) -> float:
        return self.predict_with_branch(s, target)[0]

    def is_oom(self, s: float) -> bool:
        return self.predict(s, "mem") > self.oom_threshold_bytes

    def to_json(self) -> dict:
        return {"forest_time": self.forest_time.to_json(),
                "forest_mem": self.forest_mem.to_json(),
                "poly_time": self.poly_time.to_json(), "poly_mem": self.poly_mem.to_json(),
                "s_profile_max": self.s_profile_max,
                "oom_threshold": self.oom_threshold_bytes, "use_forest": self.use_forest}

    @classmethod
    def from_json(cls, config: ModelConfig, strategy: Strategy, obj: dict) -> "HybridCostModel":
        return cls(config, strategy,
                   ForestModel.from_json(obj["forest_time"]),
                   ForestModel.from_json(obj["forest_mem"]),
                   PolyModel.from_json(obj["poly_time"]), PolyModel.from_json(obj["poly_mem"]),
                   int(obj["s_profile_max"]), float(obj["oom_threshold"]),
                   bool(obj.get("use_forest", True)))


def predict(model: HybridCostModel, s: float, target: str) -> float:
    return model.predict(s, target)


@dataclass
class CostModelSet:
    """Fitted hybrid models for every strategy of one configuration.

    ``version`` changes on every refit so plan caches can notice stale entries.
    """

    config: ModelConfig
    b: int
    models: dict[Strategy, HybridCostModel]
    version: int = 0

    def strategies(self) -> list[Strategy]:
        return sorted(self.models, key=STRATEGY_ORDER.__getitem__)

    def __getitem__(self, strategy: Strategy) -> HybridCostModel:
        return self.models[Strategy(strategy)]

    def layer_costs(self, b: int, s: int) -> dict[Strategy, tuple[float, float]]:
        """Per-layer (time, memory): whole-model predictions spread evenly over L."""
        if b != self.b:
            raise ValueError(f"models were profiled at b={self.b}, asked for b={b}")
        L = self.config.L
        return {st: (self.models[st].predict(s, "time") / L, self.models[st].predict(s, "mem") / L)
                for st in self.strategies()}

    def without(self, disabled: Iterable[Strategy]) -> "CostModelSet":
        drop = {Strategy(s) for s in disabled}
        kept = {s: m for s, m in self.models.items() if s not in drop}
        if not kept:
            raise ValueError("every strategy was disabled")
        return CostModelSet(self.config, self.b, kept, self.version)

    def without_forest(self) -> "CostModelSet":
        return CostModelSet(self.config, self.b,
                            {s: replace(m, use_forest=False) for s, m in self.models.items()},
                            self.version)

    def to_json(self) -> dict:
        c = self.config
        return {"config": {"h": c.h, "n": c.n, "L": c.L, "b": c.b}, "b": self.b,
                "version": self.version,
                "strategies": {s.value: self.models[s].to_json() for s in self.strategies()}}

    @classmethod
    def from_json(cls, obj: dict) -> "CostModelSet":
        config = ModelConfig(**obj["config"])
        models = {Strategy(k): HybridCostModel.from_json(config, Strategy(k), v)
                  for k, v in obj["strategies"].items()}
        return cls(config, int(obj["b"]), models, int(obj.get("version", 0)))


def fit_hybrid(records: Sequence[ProfileRecord], strategy: Strategy, oom_threshold: float,
               seed: int = 42, encoder: FeatureEncoder | None = None) -> HybridCostModel:
    own = [r for r in records if r.strategy is strategy]
    if not own:
        raise ValueError(f"no profile records for {strategy.value}")
    encoder = encoder or FeatureEncoder.from_records(records)
    return HybridCostModel(
        config=own[0].config, strategy=strategy,
        forest_time=fit_forest(own, "time", seed, encoder),
        forest_mem=fit_forest(own, "mem", seed, encoder),
        poly_time=fit_poly_records(own, "time"), poly_mem=fit_poly_records(own, "mem"),
        s_profile_max=max(r.s for r in own), oom_threshold_bytes=float(oom_threshold),
    )


def fit_cost_models(records: Sequence[ProfileRecord], capacity_bytes: float, seed: int = 42,
                    oom_overrides: dict[Strategy, float] | None = None,
                    version: int = 0) -> CostModelSet:
    """Fit one hybrid model per strategy present in ``records``.

    The OOM threshold defaults to the device capacity; ``oom_overrides``
    replaces it per strategy.
    """
    if not records:
        raise ValueError("no profile records to fit")
    configs = {r.config for r in records}
    batches = {r.b for r in records}
    if len(configs) != 1 or len(batches) != 1:
        raise ValueError("records must share one model configuration and batch size")
    encoder = FeatureEncoder.from_records(records)
    oom_overrides = oom_overrides or {}
    models = {st: fit_hybrid(records, st, oom_overrides.get(st, capacity_bytes), seed, encoder)
              for st in encoder.strategies}
    return CostModelSet(next(iter(configs)), next(iter(batches)), models, version)


def export_model(models: CostModelSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(models.to_json(), sort_keys=True) + "\n")


def import_model(path: str | Path) -> CostModelSet:
    return CostModelSet.from_json(json.loads(Path(path).read_text()))


def write_profiles(records: Iterable[ProfileRecord], path: str | Path | IO[str]) -> None:
    if hasattr(path, "write"):
        _write_profile_rows(records, path)
        return
    with open(path, "w", newline="") as fp:
        _write_profile_rows(records, fp)


def _write_profile_rows(records: Iterable[ProfileRecord], fp: IO[str]) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.strategy.value, r.config.h, r.config.n, r.config.L, r.b, r.s,
                    repr(float(r.time_s)), repr(float(r.mem_bytes))])


def ingest_profiles(path: str | Path) -> list[ProfileRecord]:
    """Read profile CSV; malformed rows raise with their line number."""
    records = []
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != CSV_COLUMNS:
            raise ProfileFormatError(f"{path}:1: expected header {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != len(CSV_COLUMNS):
                    raise ValueError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
                st, h, n, L, b, s, t, m = row
                records.append(ProfileRecord(
                    config=ModelConfig(h=int(h), n=int(n), L=int(L), b=int(b)),
                    strategy=Strategy(st), b=int(b), s=int(s),
                    time_s=float(t), mem_bytes=float(m)))
            except ValueError as exc:
                raise ProfileFormatError(f"{path}:{lineno}: {exc}") from None
    return records
