"""Tensor layouts on a 1D device grid.

A layout records the stored shape of a tensor symbolically (in terms of the
batch ``b``, sequence ``s`` and hidden ``h`` sizes), which of its axes is
split across the ``p`` devices, and whether the weight is stored transposed.
The layouts used by the published parallel methods are kept next to the
unified layout that every strategy in this package follows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .simgrid import ACTIVATION, PARAM, DeviceGrid, SimTensor


class Role(str, enum.Enum):
    X_MHA = "X_MHA"
    O = "O"
    X_FFN = "X_FFN"
    Z = "Z"
    W_QKV = "W_qkv"
    W_PROJ = "W_proj"
    W_IN = "W_in"
    W_OUT = "W_out"

    @property
    def is_activation(self) -> bool:
        return self in ACTIVATION_ROLES


ACTIVATION_ROLES = frozenset({Role.X_MHA, Role.O, Role.X_FFN, Role.Z})
WEIGHT_ROLES = (Role.W_QKV, Role.W_PROJ, Role.W_IN, Role.W_OUT)

# The residual stream links MHA output to FFN input and FFN output to the
# next layer's MHA input.
_FAMILY = {
    Role.O: "mha_out", Role.X_FFN: "mha_out",
    Role.Z: "ffn_out", Role.X_MHA: "ffn_out",
    Role.W_QKV: "W_qkv", Role.W_PROJ: "W_proj", Role.W_IN: "W_in", Role.W_OUT: "W_out",
}


@dataclass(frozen=True)
class ModelConfig:
    h: int
    n: int
    L: int
    b: int = 1

    def __post_init__(self) -> None:
        for name in ("h", "n", "L", "b"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.h % self.n:
            raise ValueError(f"hidden size {self.h} not divisible by head count {self.n}")

    @property
    def d(self) -> int:
        return self.h // self.n


PRESETS: dict[str, ModelConfig] = {
    "bert": ModelConfig(h=1024, n=16, L=24),
    "llama": ModelConfig(h=8192, n=64, L=80),
    "gpt": ModelConfig(h=12288, n=96, L=96),
}


@dataclass(frozen=True)
class Dim:
    """One symbolic axis, ``mult * sym`` (e.g. ``3h``)."""

    sym: str
    mult: int = 1

    def render(self, sharded: bool) -> str:
        txt = (str(self.mult) if self.mult != 1 else "") + self.sym
        return txt + "/p" if sharded else txt

    def size(self, sizes: Mapping[str, int]) -> int:
        return self.mult * sizes[self.sym]


@dataclass(frozen=True)
class TensorLayout:
    """Stored shape plus at most one sharded axis.

    ``dims`` is the shape as stored on the devices; for transposed weights
    that is the transpose of the dense matrix. ``shard_dim`` indexes
    ``dims``.
    """

    role: Role
    dims: tuple[Dim, ...]
    shard_dim: int | None
    shard_count: int
    transposed: bool = False

    def __post_init__(self) -> None:
        if self.shard_count < 1:
            raise ValueError("shard_count must be >= 1")
        if self.shard_dim is not None and not 0 <= self.shard_dim < len(self.dims):
            raise ValueError(f"shard_dim {self.shard_dim} out of range")
        if self.transposed and len(self.dims) != 2:
            raise ValueError("only matrices can be stored transposed")

    @property
    def is_sharded(self) -> bool:
        return self.shard_dim is not None and self.shard_count > 1

    def render(self) -> str:
        body = "×".join(d.render(i == self.shard_dim) for i, d in enumerate(self.dims))
        return f"({body})^T" if self.transposed else body

    def stored_shape(self, sizes: Mapping[str, int]) -> tuple[int, ...]:
        return tuple(d.size(sizes) for d in self.dims)

    def dense_shape(self, sizes: Mapping[str, int]) -> tuple[int, ...]:
        shape = self.stored_shape(sizes)
        return shape[::-1] if self.transposed else shape

    def shard_shape(self, sizes: Mapping[str, int]) -> tuple[int, ...]:
        shape = list(self.stored_shape(sizes))
        if self.shard_dim is not None:
            ax = self.shard_dim
            if shape[ax] % self.shard_count:
                raise ValueError(f"axis {self.dims[ax].render(False)} of size {shape[ax]} "
                                 f"not divisible by p={self.shard_count}")
            shape[ax] //= self.shard_count
        return tuple(shape)

    def to_json(self) -> dict:
        return {"role": self.role.value, "layout": self.render(),
                "shard_dim": self.shard_dim, "shard_count": self.shard_count,
                "transposed": self.transposed}


B, S, H = Dim("b"), Dim("s"), Dim("h")


def _act(shard: str | None, p: int, role: Role) -> TensorLayout:
    idx = {"b": 0, "s": 1, "h": 2, None: None}[shard]
    return TensorLayout(role, (B, S, H), idx, p)


def _mat(role: Role, rows: Dim, cols: Dim, shard: int | None, p: int,
         transposed: bool = False) -> TensorLayout:
    return TensorLayout(role, (rows, cols), shard, p, transposed)


def _weights(p: int, kind: str) -> dict[Role, TensorLayout]:
    h3, h4 = Dim("h", 3), Dim("h", 4)
    if kind == "tp":  # column-parallel in, row-parallel out
        return {Role.W_QKV: _mat(Role.W_QKV, H, h3, 1, p),
                Role.W_PROJ: _mat(Role.W_PROJ, H, H, 0, p),
                Role.W_IN: _mat(Role.W_IN, H, h4, 1, p),
                Role.W_OUT: _mat(Role.W_OUT, h4, H, 0, p)}
    if kind == "full":
        return {Role.W_QKV: _mat(Role.W_QKV, H, h3, None, p),
                Role.W_PROJ: _mat(Role.W_PROJ, H, H, None, p),
                Role.W_IN: _mat(Role.W_IN, H, h4, None, p),
                Role.W_OUT: _mat(Role.W_OUT, h4, H, None, p)}
    if kind == "zero3":
        return {Role.W_QKV: _mat(Role.W_QKV, H, h3, 0, p, transposed=True),
                Role.W_PROJ: _mat(Role.W_PROJ, H, H, 0, p),
                Role.W_IN: _mat(Role.W_IN, H, h4, 0, p, transposed=True),
                Role.W_OUT: _mat(Role.W_OUT, h4, H, 0, p)}
    if kind == "spec":
        return {Role.W_QKV: _mat(Role.W_QKV, h3, H, 0, p, transposed=True),
                Role.W_PROJ: _mat(Role.W_PROJ, H, H, 0, p),
                Role.W_IN: _mat(Role.W_IN, h4, H, 0, p, transposed=True),
                Role.W_OUT: _mat(Role.W_OUT, h4, H, 0, p)}
    raise KeyError(kind)


# method -> (activation shard axis, weight layout family)
METHODS: dict[str, tuple[str | None, str]] = {
    "Megatron-LM TP": (None, "tp"),
    "Megatron-LM TP+SP": ("s", "tp"),
    "Megatron-LM CP": ("s", "full"),
    "DeepSpeed Ulysses": ("s", "full"),
    "DeepSpeed ZeRO3": ("b", "zero3"),
    "Colossal-AI SP": ("s", "full"),
    "METP": ("s", "tp"),
    "Specification": ("s", "spec"),
}

TABLE_COLUMNS = ("X_MHA, O, X_FFN, Z", "W_qkv", "W_proj", "W_in", "W_out")


def method_layout(method: str, role: Role | str, p: int) -> TensorLayout:
    """Layout that a published parallel method uses for ``role``."""
    if method not in METHODS:
        raise KeyError(f"unknown parallel method {method!r}")
    role = Role(role)
    act_shard, wkind = METHODS[method]
    if role.is_activation:
        return _act(act_shard, p, role)
    return _weights(p, wkind)[role]


def spec_layout(role: Role | str, config: ModelConfig | None = None, p: int = 1,
                s: int | None = None) -> TensorLayout:
    """The unified layout all strategies consume and produce.

    When ``config`` (and ``s`` for activations) is given, divisibility of the
    sharded axis is checked and a ``ValueError`` names the offending axis.
    """
    layout = method_layout("Specification", role, p)
    if config is not None and layout.shard_dim is not None:
        sizes = {"b": config.b, "h": config.h}
        if s is not None:
            sizes["s"] = s
        if layout.dims[layout.shard_dim].sym in sizes:
            layout.shard_shape(sizes)
    return layout


def compatible(producer: TensorLayout, consumer: TensorLayout) -> bool:
    """True when the producer's output can feed the consumer unchanged."""
    if producer.role != consumer.role and _FAMILY[producer.role] != _FAMILY[consumer.role]:
        return False
    return (producer.dims == consumer.dims
            and _effective_shard(producer) == _effective_shard(consumer)
            and producer.transposed == consumer.transposed)


def _effective_shard(layout: TensorLayout) -> tuple[int | None, int]:
    if layout.shard_dim is None or layout.shard_count == 1:
        return (None, 1)
    return (layout.shard_dim, layout.shard_count)


def table2(p: int | None = None) -> dict[str, dict[str, str]]:
    """Every method's layouts rendered symbolically, one row per method."""
    pp = p or 2
    rows = {}
    for method in METHODS:
        row = {TABLE_COLUMNS[0]: method_layout(method, Role.X_MHA, pp).render()}
        for col, role in zip(TABLE_COLUMNS[1:], WEIGHT_ROLES):
            row[col] = method_layout(method, role, pp).render()
        rows[method] = row
    return rows


def bind_sizes(layout: TensorLayout, dense_shape: Sequence[int]) -> dict[str, int]:
    """Recover the symbol sizes from a dense tensor shape."""
    stored = tuple(dense_shape)[::-1] if layout.transposed else tuple(dense_shape)
    if len(stored) != len(layout.dims):
        raise ValueError(f"{layout.role.value}: rank {len(stored)} does not match "
                         f"layout {layout.render()}")
    sizes: dict[str, int] = {}
    for dim, n in zip(layout.dims, stored):
        if n % dim.mult:
            raise ValueError(f"{layout.role.value}: size {n} not a multiple of {dim.mult}")
        val = n // dim.mult
        if sizes.setdefault(dim.sym, val) != val:
            raise ValueError(f"{layout.role.value}: inconsistent size for {dim.sym}")
    return sizes


def shard(dense: np.ndarray | SimTensor, layout: TensorLayout,
          grid: DeviceGrid) -> list[SimTensor]:
    """Split a dense tensor onto the grid according to ``layout``.

    Transposed layouts store the transposed matrix; unsharded layouts are
    replicated on every device.
    """
    arr = dense.data if isinstance(dense, SimTensor) else np.asarray(dense, dtype=np.float64)
    if layout.shard_count != grid.p:
        raise ValueError(f"layout is for p={layout.shard_count}, grid has p={grid.p}")
    sizes = bind_sizes(layout, arr.shape)
    layout.shard_shape(sizes)
    stored = arr.T if layout.transposed else arr
    kind = ACTIVATION if layout.role.is_activation else PARAM
    if layout.shard_dim is None:
        return [grid.put(d, stored.copy(), kind) for d in range(grid.p)]
    parts = np.split(stored, grid.p, axis=layout.shard_dim)
    return [grid.put(d, parts[d].copy(), kind) for d in range(grid.p)]


def unshard(shards: Sequence[SimTensor], layout: TensorLayout) -> np.ndarray:
    if len(shards) != layout.shard_count:
        raise ValueError(f"expected {layout.shard_count} shards, got {len(shards)}")
    if layout.shard_dim is None:
        stored = shards[0].data
    else:
        stored = np.concatenate([t.data for t in shards], axis=layout.shard_dim)
    return np.ascontiguousarray(stored.T if layout.transposed else stored)


def check_shards(shards: Sequence[SimTensor], layout: TensorLayout,
                 sizes: Mapping[str, int]) -> None:
    """Reject shards that do not conform to ``layout`` at ``sizes``."""
    expect = layout.shard_shape(sizes)
    if len(shards) != layout.shard_count:
        raise ValueError(f"{layout.role.value}: expected {layout.shard_count} shards, "
                         f"got {len(shards)}")
    for d, t in enumerate(shards):
        if t.device != d:
            raise ValueError(f"{layout.role.value}: shard {d} lives on device {t.device}")
        if t.shape != expect:
            raise ValueError(f"{layout.role.value}: shard {d} has shape {t.shape}, "
                             f"layout {layout.render()} requires {expect}")
