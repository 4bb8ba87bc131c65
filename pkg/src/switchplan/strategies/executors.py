"""Sharded MHA/FFN executors, one pair per parallel strategy.

Every executor takes activations in the unified ``b x s/p x h`` layout and
weights in the unified weight layouts, and returns activations in the same
activation layout, so any two strategies can follow each other without a
redistribution step. Buffers are put on and released from the grid as they
come and go; only modeled buffers are accounted, numpy temporaries are not.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..layouts import ModelConfig, Role, TensorLayout, check_shards, shard, spec_layout
from ..simgrid import DeviceGrid, SimTensor
from .reference import DenseWeights, gelu, merge_heads, qkv_columns, split_heads

# Keys are streamed through attention in tiles of this many tokens, so the
# score buffer is linear in the query length (flash-attention style).
KEY_TILE = 16


class Strategy(str, enum.Enum):
    MEGATRON_TS = "MegatronTS"
    MEGATRON_CZ = "MegatronCZ"
    ULYSSES_Z = "UlyssesZ"
    COLOSSAL_Z = "ColossalZ"
    METP = "METP"

    @property
    def eval_excluded(self) -> bool:
        return self is Strategy.COLOSSAL_Z

    @property
    def splits_heads(self) -> bool:
        return self in (Strategy.MEGATRON_TS, Strategy.ULYSSES_Z, Strategy.METP)


STRATEGY_ORDER = {s: i for i, s in enumerate(Strategy)}


class OpKind(str, enum.Enum):
    MHA = "MHA"
    FFN = "FFN"


@dataclass
class LayerWeights:
    """Per-device weight shards in the unified layout."""

    w_qkv: list[SimTensor]
    w_proj: list[SimTensor]
    w_in: list[SimTensor]
    w_out: list[SimTensor]

    @classmethod
    def from_dense(cls, dense: DenseWeights, grid: DeviceGrid) -> "LayerWeights":
        p = grid.p
        return cls(
            w_qkv=shard(dense.w_qkv, spec_layout(Role.W_QKV, p=p), grid),
            w_proj=shard(dense.w_proj, spec_layout(Role.W_PROJ, p=p), grid),
            w_in=shard(dense.w_in, spec_layout(Role.W_IN, p=p), grid),
            w_out=shard(dense.w_out, spec_layout(Role.W_OUT, p=p), grid),
        )

    def tensors(self) -> list[SimTensor]:
        return [*self.w_qkv, *self.w_proj, *self.w_in, *self.w_out]


def io_layouts(strategy: Strategy | str, op: OpKind | str, p: int) -> tuple[TensorLayout, TensorLayout]:
    """(input, output) activation layouts an executor consumes and produces."""
    Strategy(strategy)
    if OpKind(op) is OpKind.MHA:
        return spec_layout(Role.X_MHA, p=p), spec_layout(Role.O, p=p)
    return spec_layout(Role.X_FFN, p=p), spec_layout(Role.Z, p=p)


Executor = Callable[[DeviceGrid, Sequence[SimTensor], LayerWeights, ModelConfig],
                    list[SimTensor]]


class _OnlineAttention:
    """Online-softmax attention for one device's queries.

    Keys and values may arrive in any number of blocks; the accumulator has
    the size of the output and is handed over to it by ``finish``.
    """

    def __init__(self, grid: DeviceGrid, device: int, q: np.ndarray, n_heads: int) -> None:
        self.grid, self.device, self.n_heads = grid, device, n_heads
        qh = split_heads(q, n_heads)
        self.d = qh.shape[-1]
        self.q = qh / math.sqrt(self.d)
        b, _, sq, _ = qh.shape
        self.m = np.full((b, n_heads, sq), -np.inf)
        self.l = np.zeros((b, n_heads, sq))
        self.acc = np.zeros(qh.shape)
        self._numel = self.acc.size + self.m.size + self.l.size
        grid.track_alloc(device, grid.nbytes(self._numel))

    def update(self, k: np.ndarray, v: np.ndarray) -> None:
        kh, vh = split_heads(k, self.n_heads), split_heads(v, self.n_heads)
        for start in range(0, kh.shape[2], KEY_TILE):
            kt = kh[:, :, start:start + KEY_TILE]
            vt = vh[:, :, start:start + KEY_TILE]
            scores = self.q @ kt.transpose(0, 1, 3, 2)
            with self.grid.scratch(self.device, scores.size):
                m_new = np.maximum(self.m, scores.max(axis=-1))
                corr = np.exp(self.m - m_new)
                probs = np.exp(scores - m_new[..., None])
                self.l = self.l * corr + probs.sum(axis=-1)
                self.acc = self.acc * corr[..., None] + probs @ vt
                self.m = m_new

    def finish(self) -> SimTensor:
        out = merge_heads(self.acc / self.l[..., None])
        self.grid.track_alloc(self.device, -self.grid.nbytes(self._numel))
        return self.grid.put(self.device, out)


def _sizes(grid: DeviceGrid, x: Sequence[SimTensor], config: ModelConfig) -> dict[str, int]:
    if not x:
        raise ValueError("no input shards")
    return {"b": config.b, "s": x[0].shape[1] * grid.p, "h": config.h}


def _validate(grid: DeviceGrid, x: Sequence[SimTensor], weights: LayerWeights,
              config: ModelConfig, op: OpKind, strategy: Strategy) -> dict[str, int]:
    p = grid.p
    sizes = _sizes(grid, x, config)
    role = Role.X_MHA if op is OpKind.MHA else Role.X_FFN
    check_shards(x, spec_layout(role, p=p), sizes)
    if op is OpKind.MHA:
        check_shards(weights.w_qkv, spec_layout(Role.W_QKV, p=p), sizes)
        check_shards(weights.w_proj, spec_layout(Role.W_PROJ, p=p), sizes)
        if strategy.splits_heads and config.n % p:
            raise ValueError(f"{strategy.value} splits heads: n={config.n} "
                             f"not divisible by p={p}")
    else:
        check_shards(weights.w_in, spec_layout(Role.W_IN, p=p), sizes)
        check_shards(weights.w_out, spec_layout(Role.W_OUT, p=p), sizes)
    return sizes


def _cols(w: np.ndarray, n_heads: int, d: int, which: str) -> np.ndarray:
    """q/k/v slice of a stored transposed ``W_qkv`` block (rows = columns of W)."""
    return w[qkv_columns(n_heads, d, which)].T


def _gather_weight(grid: DeviceGrid, shards: Sequence[SimTensor]) -> list[SimTensor]:
    return grid.all_gather(shards, dim=0)


# -- MegatronTS: TP + sequence parallel ----------------------------------

def megatron_ts_mha(grid, x, weights, config):
    _validate(grid, x, weights, config, OpKind.MHA, Strategy.MEGATRON_TS)
    p, nl, d = grid.p, config.n // grid.p, config.d
    xg = grid.all_gather(x, dim=1)
    partials = []
    for dev in range(p):
        w = weights.w_qkv[dev].data
        xf = xg[dev].data
        q = grid.put(dev, xf @ _cols(w, nl, d, "q"))
        k = grid.put(dev, xf @ _cols(w, nl, d, "k"))
        v = grid.put(dev, xf @ _cols(w, nl, d, "v"))
        grid.release(xg[dev])
        att = _OnlineAttention(grid, dev, q.data, nl)
        att.update(k.data, v.data)
        grid.release(q, k, v)
        a = att.finish()
        partials.append(grid.put(dev, a.data @ weights.w_proj[dev].data))
        grid.release(a)
    out = grid.reduce_scatter(partials, dim=1)
    grid.release(*partials)
    return out


def megatron_ts_ffn(grid, x, weights, config):
    _validate(grid, x, weights, config, OpKind.FFN, Strategy.MEGATRON_TS)
    xg = grid.all_gather(x, dim=1)
    partials = []
    for dev in range(grid.p):
        hid = grid.put(dev, gelu(xg[dev].data @ weights.w_in[dev].data.T))
        grid.release(xg[dev])
        partials.append(grid.put(dev, hid.data @ weights.w_out[dev].data))
        grid.release(hid)
    out = grid.reduce_scatter(partials, dim=1)
    grid.release(*partials)
    return out


# -- ZeRO3-backed strategies -------------------------------------------

def zero_ffn(grid, x, weights, config, strategy=Strategy.MEGATRON_CZ):
    _validate(grid, x, weights, config, OpKind.FFN, strategy)
    w_in = _gather_weight(grid, weights.w_in)
    w_out = _gather_weight(grid, weights.w_out)
    out = []
    for dev in range(grid.p):
        hid = grid.put(dev, gelu(x[dev].data @ w_in[dev].data.T))
        out.append(grid.put(dev, hid.data @ w_out[dev].data))
        grid.release(hid)
    grid.release(*w_in, *w_out)
    return out


def _project_zero(grid, a, weights):
    w_proj = _gather_weight(grid, weights.w_proj)
    out = [grid.put(dev, a[dev].data @ w_proj[dev].data) for dev in range(grid.p)]
    grid.release(*w_proj, *a)
    return out


def megatron_cz_mha(grid, x, weights, config):
    """Context-parallel ring attention with ZeRO3-gathered weights."""
    _validate(grid, x, weights, config, OpKind.MHA, Strategy.MEGATRON_CZ)
    p, n, d = grid.p, config.n, config.d
    w_qkv = _gather_weight(grid, weights.w_qkv)
    q, kv = [], []
    for dev in range(p):
        w = w_qkv[dev].data
        q.append(grid.put(dev, x[dev].data @ _cols(w, n, d, "q")))
        kv.append(grid.put(dev, np.concatenate(
            [x[dev].data @ _cols(w, n, d, "k"), x[dev].data @ _cols(w, n, d, "v")], axis=-1)))
    grid.release(*w_qkv)
    atts = [_OnlineAttention(grid, dev, q[dev].data, n) for dev in range(p)]
    h = config.h
    cur = kv
    for step in range(p):
        if step:
            nxt = grid.ring_pass(cur, 1)
            if cur is not kv:
                grid.release(*cur)
            cur = nxt
        for dev in range(p):
            atts[dev].update(cur[dev].data[..., :h], cur[dev].data[..., h:])
    if cur is not kv:
        grid.release(*cur)
    grid.release(*q, *kv)
    a = [att.finish() for att in atts]
    return _project_zero(grid, a, weights)


def ulysses_z_mha(grid, x, weights, config):
    """All-to-all from sequence shards to head shards and back."""
    _validate(grid, x, weights, config, OpKind.MHA, Strategy.ULYSSES_Z)
    p, n, d = grid.p, config.n, config.d
    w_qkv = _gather_weight(grid, weights.w_qkv)
    heads = {}
    for which in ("q", "k", "v"):
        local = [grid.put(dev, x[dev].data @ _cols(w_qkv[dev].data, n, d, which))
                 for dev in range(p)]
        heads[which] = grid.all_to_all(local, split_dim=2, concat_dim=1)
        grid.release(*local)
    grid.release(*w_qkv)
    a_heads = []
    for dev in range(p):
        att = _OnlineAttention(grid, dev, heads["q"][dev].data, n // p)
        att.update(heads["k"][dev].data, heads["v"][dev].data)
        grid.release(heads["q"][dev], heads["k"][dev], heads["v"][dev])
        a_heads.append(att.finish())
    a = grid.all_to_all(a_heads, split_dim=1, concat_dim=2)
    grid.release(*a_heads)
    return _project_zero(grid, a, weights)


def colossal_z_mha(grid, x, weights, config):
    """Ring self-attention that materializes every query-key score block."""
    _validate(grid, x, weights, config, OpKind.MHA, Strategy.COLOSSAL_Z)
    p, n, d = grid.p, config.n, config.d
    w_qkv = _gather_weight(grid, weights.w_qkv)
    q, k, v = [], [], []
    for dev in range(p):
        w, xd = w_qkv[dev].data, x[dev].data
        q.append(grid.put(dev, xd @ _cols(w, n, d, "q")))
        k.append(grid.put(dev, xd @ _cols(w, n, d, "k")))
        v.append(grid.put(dev, xd @ _cols(w, n, d, "v")))
    grid.release(*w_qkv)
    qh = [split_heads(t.data, n) / math.sqrt(d) for t in q]

    # scores[dev][src]: queries of dev against keys that originated on src
    scores: list[dict[int, SimTensor]] = [{} for _ in range(p)]
    cur = k
    for step in range(p):
        if step:
            nxt = grid.ring_pass(cur, 1)
            if cur is not k:
                grid.release(*cur)
            cur = nxt
        for dev in range(p):
            src = (dev - step) % p
            kh = split_heads(cur[dev].data, n)
            scores[dev][src] = grid.put(dev, qh[dev] @ kh.transpose(0, 1, 3, 2))
    if cur is not k:
        grid.release(*cur)
    grid.release(*k)

    probs = []
    for dev in range(p):
        full = np.concatenate([scores[dev][src].data for src in range(p)], axis=-1)
        full = np.exp(full - full.max(axis=-1, keepdims=True))
        full /= full.sum(axis=-1, keepdims=True)
        probs.append(np.split(full, p, axis=-1))
    acc = [grid.put(dev, np.zeros(q[dev].shape)) for dev in range(p)]
    grid.release(*q)
    cur = v
    for step in range(p):
        if step:
            nxt = grid.ring_pass(cur, 1)
            if cur is not v:
                grid.release(*cur)
            cur = nxt
        for dev in range(p):
            src = (dev - step) % p
            vh = split_heads(cur[dev].data, n)
            acc[dev].data += merge_heads(probs[dev][src] @ vh)
    if cur is not v:
        grid.release(*cur)
    grid.release(*v)
    for dev in range(p):
        grid.release(*scores[dev].values())
    return _project_zero(grid, acc, weights)


def colossal_z_ffn(grid, x, weights, config):
    return zero_ffn(grid, x, weights, config, Strategy.COLOSSAL_Z)


def ulysses_z_ffn(grid, x, weights, config):
    return zero_ffn(grid, x, weights, config, Strategy.ULYSSES_Z)


def megatron_cz_ffn(grid, x, weights, config):
    return zero_ffn(grid, x, weights, config, Strategy.MEGATRON_CZ)


# -- METP: two-level ring, weights and tokens both circulate -------------

def _circulate(grid, held, original, step):
    """Advance a ring buffer by one hop, freeing the previous copy."""
    if not step:
        return held
    nxt = grid.ring_pass(held, 1)
    if held is not original:
        grid.release(*held)
    return nxt


def metp_mha(grid, x, weights, config):
    """Outer ring over head-group weight shards, inner ring over token blocks.

    At outer step ``t`` device ``dev`` holds the weights of head group
    ``(dev - t) mod p``; keys and values for that group are recomputed from
    each circulating token block in ``KEY_TILE`` chunks, so neither the full
    sequence nor all heads are ever resident on one device.
    """
    _validate(grid, x, weights, config, OpKind.MHA, Strategy.METP)
    p, nl, d = grid.p, config.n // grid.p, config.d
    out = [grid.put(dev, np.zeros(x[dev].shape)) for dev in range(p)]
    wq, wp = weights.w_qkv, weights.w_proj
    for t in range(p):
        wq = _circulate(grid, wq, weights.w_qkv, t)
        wp = _circulate(grid, wp, weights.w_proj, t)
        q = [grid.put(dev, x[dev].data @ _cols(wq[dev].data, nl, d, "q")) for dev in range(p)]
        atts = [_OnlineAttention(grid, dev, q[dev].data, nl) for dev in range(p)]
        xb = x
        for j in range(p):
            xb = _circulate(grid, xb, x, j)
            for dev in range(p):
                w = wq[dev].data
                wk, wv = _cols(w, nl, d, "k"), _cols(w, nl, d, "v")
                block = xb[dev].data
                for start in range(0, block.shape[1], KEY_TILE):
                    chunk = block[:, start:start + KEY_TILE]
                    kc, vc = chunk @ wk, chunk @ wv
                    with grid.scratch(dev, kc.size + vc.size):
                        atts[dev].update(kc, vc)
        if xb is not x:
            grid.release(*xb)
        grid.release(*q)
        for dev in range(p):
            a = atts[dev].finish()
            out[dev].data += a.data @ wp[dev].data
            grid.release(a)
    if wq is not weights.w_qkv:
        grid.release(*wq, *wp)
    return out


def metp_ffn(grid, x, weights, config):
    _validate(grid, x, weights, config, OpKind.FFN, Strategy.METP)
    p = grid.p
    out = [grid.put(dev, np.zeros(x[dev].shape)) for dev in range(p)]
    wi, wo = weights.w_in, weights.w_out
    for t in range(p):
        wi = _circulate(grid, wi, weights.w_in, t)
        wo = _circulate(grid, wo, weights.w_out, t)
        for dev in range(p):
            hid = grid.put(dev, gelu(x[dev].data @ wi[dev].data.T))
            out[dev].data += hid.data @ wo[dev].data
            grid.release(hid)
    if wi is not weights.w_in:
        grid.release(*wi, *wo)
    return out


class FunctionRegistry:
    """Strategy-to-function mapping with a uniform executor signature."""

    def __init__(self) -> None:
        self._table: dict[tuple[Strategy, OpKind], Executor] = {}

    def register(self, strategy: Strategy, op: OpKind, fn: Executor) -> None:
        self._table[(Strategy(strategy), OpKind(op))] = fn

    def lookup(self, strategy: Strategy | str, op: OpKind | str) -> Executor:
        try:
            return self._table[(Strategy(strategy), OpKind(op))]
        except (KeyError, ValueError):
            raise KeyError(f"no executor registered for ({strategy}, {op})") from None

    def strategies(self) -> list[Strategy]:
        return sorted({s for s, _ in self._table}, key=STRATEGY_ORDER.__getitem__)

    def describe(self) -> list[dict]:
        return [{"strategy": s.value, "eval_excluded": s.eval_excluded}
                for s in self.strategies()]


def default_registry() -> FunctionRegistry:
    reg = FunctionRegistry()
    for strategy, mha_fn, ffn_fn in (
        (Strategy.MEGATRON_TS, megatron_ts_mha, megatron_ts_ffn),
        (Strategy.MEGATRON_CZ, megatron_cz_mha, megatron_cz_ffn),
        (Strategy.ULYSSES_Z, ulysses_z_mha, ulysses_z_ffn),
        (Strategy.COLOSSAL_Z, colossal_z_mha, colossal_z_ffn),
        (Strategy.METP, metp_mha, metp_ffn),
    ):
        reg.register(strategy, OpKind.MHA, mha_fn)
        reg.register(strategy, OpKind.FFN, ffn_fn)
    return reg


REGISTRY = default_registry()


def registry_lookup(registry: FunctionRegistry, strategy, op) -> Executor:
    return registry.lookup(strategy, op)


def mha(strategy, grid, x_shards, weights, config) -> list[SimTensor]:
    return REGISTRY.lookup(strategy, OpKind.MHA)(grid, x_shards, weights, config)


def ffn(strategy, grid, x_shards, weights, config) -> list[SimTensor]:
    return REGISTRY.lookup(strategy, OpKind.FFN)(grid, x_shards, weights, config)
