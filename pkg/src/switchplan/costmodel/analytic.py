"""Closed-form time and memory costs standing in for GPU profiling.

The collective schedule mirrors, entry for entry, what the numeric
executors log on a :class:`~switchplan.simgrid.DeviceGrid`, so the same
alpha-beta pricing can be applied to a real log or to the formula.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

from ..layouts import ModelConfig
from ..simgrid import CommRecord
from ..strategies import Strategy

GiB = 1 << 30


@dataclass(frozen=True)
class GridParams:
    p: int = 8
    flops_per_s: float = 150e12
    bytes_per_s_link: float = 300e9
    alpha_latency: float = 10e-6
    bytes_per_elem: int = 2
    capacity_bytes: int = 80 * GiB


@dataclass(frozen=True)
class ProfileRecord:
    config: ModelConfig
    strategy: Strategy
    b: int
    s: int
    time_s: float
    mem_bytes: float

    def __post_init__(self) -> None:
        if self.s < 1:
            raise ValueError(f"sequence length must be >= 1, got {self.s}")
        if not self.time_s > 0 or not self.mem_bytes > 0:
            raise ValueError("time and memory must be positive")


# Activations each strategy keeps alive per layer for the backward pass, in
# units of one sequence-sharded activation (b * s/p * h elements). METP
# recomputes its intermediates inside the two-level loop and keeps only the
# sublayer inputs and outputs.
RETAINED_UNITS = {
    Strategy.MEGATRON_TS: 10,
    Strategy.MEGATRON_CZ: 10,
    Strategy.ULYSSES_Z: 10,
    Strategy.COLOSSAL_Z: 10,
    Strategy.METP: 3,
}


def layer_flops(b: int, s: int, h: int) -> float:
    """Forward FLOPs of one layer: projections, attention scores/values, FFN."""
    return (8 * b * s * h * h + 4 * b * s * s * h) + 16 * b * s * h * h


def collective_schedule(strategy: Strategy, b: int, s: int, h: int, p: int,
                        bytes_per_elem: int = 2) -> list[tuple[str, int]]:
    """(primitive, payload bytes) of one forward layer, MHA then FFN."""
    strategy = Strategy(strategy)
    if s % p or h % p:
        raise ValueError(f"s={s} and h={h} must be divisible by p={p}")
    B = bytes_per_elem
    act = b * (s // p) * h * B  # one sequence shard
    ag = lambda shard_bytes: ("AllGather", (p - 1) * shard_bytes)
    w_qkv, w_proj = 3 * h // p * h * B, h // p * h * B
    w_in = w_out = 4 * h // p * h * B
    ring = lambda nbytes: [("RingPass", nbytes)] * (p - 1)

    if strategy is Strategy.MEGATRON_TS:
        one = [ag(act), ("ReduceScatter", (p - 1) * act)]
        return one + one
    zero_ffn = [ag(w_in), ag(w_out)]
    a2a = ("AllToAll", (p - 1) * act // p)
    if strategy is Strategy.MEGATRON_CZ:
        return [ag(w_qkv), *ring(2 * act), ag(w_proj), *zero_ffn]
    if strategy is Strategy.ULYSSES_Z:
        return [ag(w_qkv), a2a, a2a, a2a, a2a, ag(w_proj), *zero_ffn]
    if strategy is Strategy.COLOSSAL_Z:
        return [ag(w_qkv), *ring(act), *ring(act), ag(w_proj), *zero_ffn]
    # METP: weights hop once per outer step, token blocks p-1 times per step
    sched: list[tuple[str, int]] = []
    for t in range(p):
        if t:
            sched += [("RingPass", w_qkv), ("RingPass", w_proj)]
        sched += ring(act)
    for t in range(1, p):
        sched += [("RingPass", w_in), ("RingPass", w_out)]
    return sched


def comm_time(entries: Iterable[CommRecord | tuple[str, int]], gp: GridParams) -> float:
    """Alpha-beta price of a collective sequence; zero-payload no-ops are free."""
    total = 0.0
    for e in entries:
        nbytes = e.bytes if isinstance(e, CommRecord) else e[1]
        if nbytes > 0:
            total += gp.alpha_latency + nbytes / gp.bytes_per_s_link
    return total


def layer_time(config: ModelConfig, strategy: Strategy, b: int, s: int,
               gp: GridParams) -> float:
    compute = 3 * layer_flops(b, s, config.h) / gp.flops_per_s / gp.p
    sched = collective_schedule(strategy, b, s, config.h, gp.p, gp.bytes_per_elem)
    return compute + comm_time(sched, gp)


def working_set_elems(strategy: Strategy, b: int, s: int, h: int, n: int, p: int) -> float:
    """Leading-order transient footprint of one executing layer (elements).

    Mirrors the buffer schedule of the numeric executors: MegatronTS holds
    the gathered sequence, the ZeRO3 strategies hold full FFN weights, ring
    strategies hold in-flight copies, ColossalZ holds all score blocks.
    """
    unit = b * s * h / p
    full_ffn_weights = 8 * h * h
    if strategy is Strategy.MEGATRON_TS:
        return (p + 5) * unit
    if strategy is Strategy.MEGATRON_CZ:
        return 8 * unit + full_ffn_weights
    if strategy is Strategy.ULYSSES_Z:
        return 6 * unit + full_ffn_weights
    if strategy is Strategy.COLOSSAL_Z:
        return 6 * unit + b * n * (s / p) * s + full_ffn_weights
    return 4 * unit + 2 * unit / p + 8 * h * h / p


def model_memory(config: ModelConfig, strategy: Strategy, b: int, s: int,
                 gp: GridParams) -> float:
    """Peak bytes per device for a whole-model step under one strategy."""
    strategy = Strategy(strategy)
    h, n, L, p = config.h, config.n, config.L, gp.p
    params = L * 12 * h * h / p
    retained = L * RETAINED_UNITS[strategy] * b * s * h / p
    if strategy is Strategy.COLOSSAL_Z:
        retained += L * b * n * (s / p) * s
    return gp.bytes_per_elem * (params + retained + working_set_elems(strategy, b, s, h, n, p))


def analytic_profile(config: ModelConfig, strategy: Strategy, b: int, s: int,
                     gp: GridParams) -> ProfileRecord:
    strategy = Strategy(strategy)
    if s % gp.p:
        raise ValueError(f"sequence length {s} not divisible by p={gp.p}")
    if strategy.splits_heads and config.n % gp.p:
        raise ValueError(f"{strategy.value} needs n={config.n} divisible by p={gp.p}")
    return ProfileRecord(
        config=replace(config, b=b), strategy=strategy, b=b, s=s,
        time_s=config.L * layer_time(config, strategy, b, s, gp),
        mem_bytes=model_memory(config, strategy, b, s, gp),
    )


def length_sweep(s_min: int, s_max: int, count: int = 20, multiple: int = 1) -> list[int]:
    """Geometric sweep of ``count`` distinct lengths, each a multiple of ``multiple``."""
    if count < 2 or s_max <= s_min:
        raise ValueError("need count >= 2 and s_max > s_min")
    ratio = (s_max / s_min) ** (1.0 / (count - 1))
    out: list[int] = []
    for i in range(count):
        v = round(s_min * ratio ** i / multiple) * multiple
        v = max(v, multiple)
        if out and v <= out[-1]:
            v = out[-1] + multiple
        out.append(v)
    return out
