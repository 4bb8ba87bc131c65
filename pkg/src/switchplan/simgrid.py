"""In-process simulation of a 1D device grid.

Every device is a slot in a Python list; collectives run synchronously in
device order 0..p-1 so that outputs, the communication log and the memory
ledger are reproducible bit for bit.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import IO, Iterator, Sequence

import numpy as np

ACTIVATION = "activation"
PARAM = "param"


@dataclass(frozen=True)
class CommRecord:
    primitive: str
    bytes: int
    participants: tuple[int, ...]

    def to_json(self) -> dict:
        return {"primitive": self.primitive, "bytes": self.bytes,
                "participants": list(self.participants)}


@dataclass(eq=False)
class SimTensor:
    """A float64 buffer owned by one simulated device."""

    data: np.ndarray
    device: int
    kind: str = ACTIVATION

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return int(self.data.size)


class DeviceGrid:
    """A linear arrangement of ``p`` devices with per-device memory accounting.

    Memory is accounted in *modeled* bytes: ``numel * bytes_per_elem``, even
    though the simulated data is float64. Buffers are attributed to a kind
    (activation or param) so activation peaks can be read separately.
    """

    def __init__(self, p: int, capacity_bytes: int, bytes_per_elem: int = 2) -> None:
        if p < 1:
            raise ValueError(f"device count must be >= 1, got {p}")
        if capacity_bytes <= 0:
            raise ValueError(f"capacity must be positive, got {capacity_bytes}")
        self.p = int(p)
        self.capacity_bytes = int(capacity_bytes)
        self.bytes_per_elem = int(bytes_per_elem)
        self.alloc_bytes = [0] * self.p
        self.peak_bytes = [0] * self.p
        self.kind_alloc: dict[str, list[int]] = {}
        self.kind_peak: dict[str, list[int]] = {}
        self.comm_log: list[CommRecord] = []

    # -- memory ledger -------------------------------------------------

    def track_alloc(self, device: int, delta_bytes: int, kind: str = ACTIVATION) -> None:
        self._check_device(device)
        new = self.alloc_bytes[device] + delta_bytes
        if new < 0:
            raise ValueError(f"allocation underflow on device {device}: {new} bytes")
        per_kind = self.kind_alloc.setdefault(kind, [0] * self.p)
        kind_new = per_kind[device] + delta_bytes
        if kind_new < 0:
            raise ValueError(f"{kind} allocation underflow on device {device}")
        self.alloc_bytes[device] = new
        self.peak_bytes[device] = max(self.peak_bytes[device], new)
        per_kind[device] = kind_new
        peaks = self.kind_peak.setdefault(kind, [0] * self.p)
        peaks[device] = max(peaks[device], kind_new)

    def peak_memory(self, device: int, kind: str | None = None) -> int:
        self._check_device(device)
        if kind is None:
            return self.peak_bytes[device]
        return self.kind_peak.get(kind, [0] * self.p)[device]

    def reset_peaks(self) -> None:
        """Restart the high-water marks from the current allocation."""
        self.peak_bytes = list(self.alloc_bytes)
        self.kind_peak = {k: list(v) for k, v in self.kind_alloc.items()}

    def nbytes(self, numel: int) -> int:
        return int(numel) * self.bytes_per_elem

    def put(self, device: int, data: np.ndarray, kind: str = ACTIVATION) -> SimTensor:
        """Place ``data`` on ``device`` and account for it."""
        t = SimTensor(data, device, kind)
        self.track_alloc(device, self.nbytes(t.numel), kind)
        return t

    def release(self, *tensors: SimTensor) -> None:
        for t in tensors:
            self.track_alloc(t.device, -self.nbytes(t.numel), t.kind)

    @contextmanager
    def scratch(self, device: int, numel: int) -> Iterator[None]:
        """Account a transient working buffer for the duration of the block."""
        nb = self.nbytes(numel)
        self.track_alloc(device, nb)
        try:
            yield
        finally:
            self.track_alloc(device, -nb)

    # -- collectives -----------------------------------------------------

    def all_gather(self, shards: Sequence[SimTensor], dim: int) -> list[SimTensor]:
        self._check_group(shards)
        ref = shards[0].shape
        ax = _axis(dim, len(ref))
        for t in shards:
            if len(t.shape) != len(ref) or any(
                    a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
                raise ValueError(f"all_gather shape mismatch off axis {ax}: {t.shape} vs {ref}")
        full = np.concatenate([t.data for t in shards], axis=ax)
        shard_bytes = [self.nbytes(t.numel) for t in shards]
        # Ring volume: each device receives everything it does not own.
        payload = sum(shard_bytes) - min(shard_bytes) if self.p > 1 else 0
        self._log("AllGather", payload)
        return [self.put(d, full.copy(), shards[d].kind) for d in range(self.p)]

    def reduce_scatter(self, tensors: Sequence[SimTensor], dim: int) -> list[SimTensor]:
        self._check_group(tensors)
        self._check_same_shape(tensors, "reduce_scatter")
        ax = _axis(dim, len(tensors[0].shape))
        size = tensors[0].shape[ax]
        if size % self.p:
            raise ValueError(f"reduce_scatter: dim {ax} of size {size} not divisible by p={self.p}")
        total = _ordered_sum(tensors)
        parts = np.split(total, self.p, axis=ax)
        full_bytes = self.nbytes(tensors[0].numel)
        self._log("ReduceScatter", (self.p - 1) * full_bytes // self.p)
        return [self.put(d, parts[d].copy(), tensors[d].kind) for d in range(self.p)]

    def all_reduce(self, tensors: Sequence[SimTensor]) -> list[SimTensor]:
        self._check_group(tensors)
        self._check_same_shape(tensors, "all_reduce")
        total = _ordered_sum(tensors)
        full_bytes = self.nbytes(tensors[0].numel)
        self._log("AllReduce", 2 * (self.p - 1) * full_bytes // self.p)
        return [self.put(d, total.copy(), tensors[d].kind) for d in range(self.p)]

    def all_to_all(self, tensors: Sequence[SimTensor], split_dim: int,
                   concat_dim: int) -> list[SimTensor]:
        self._check_group(tensors)
        pieces = []
        for t in tensors:
            ax = _axis(split_dim, len(t.shape))
            if t.shape[ax] % self.p:
                raise ValueError(f"all_to_all: split dim {ax} of size {t.shape[ax]} "
                                 f"on device {t.device} not divisible by p={self.p}")
            pieces.append(np.split(t.data, self.p, axis=ax))
        cat = _axis(concat_dim, len(tensors[0].shape))
        out = []
        for d in range(self.p):
            out.append(np.concatenate([pieces[src][d] for src in range(self.p)], axis=cat))
        full_bytes = self.nbytes(tensors[0].numel)
        self._log("AllToAll", (self.p - 1) * full_bytes // self.p)
        return [self.put(d, out[d], tensors[d].kind) for d in range(self.p)]

    def ring_pass(self, tensors: Sequence[SimTensor], step: int = 1) -> list[SimTensor]:
        """Device ``d`` receives the tensor held by device ``(d - step) mod p``."""
        self._check_group(tensors)
        shift = step % self.p
        payload = self.nbytes(tensors[0].numel) if shift else 0
        self._log("RingPass", payload)
        return [self.put(d, tensors[(d - shift) % self.p].data.copy(), tensors[d].kind)
                for d in range(self.p)]

    # -- log ------------------------------------------------------------

    def export_comm_log(self, fp: IO[str]) -> None:
        for rec in self.comm_log:
            fp.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

    def _log(self, primitive: str, payload: int) -> None:
        self.comm_log.append(CommRecord(primitive, int(payload), tuple(range(self.p))))

    def _check_device(self, device: int) -> None:
        if not 0 <= device < self.p:
            raise ValueError(f"device {device} outside grid of {self.p}")

    def _check_group(self, tensors: Sequence[SimTensor]) -> None:
        if len(tensors) != self.p:
            raise ValueError(f"expected one tensor per device ({self.p}), got {len(tensors)}")
        for d, t in enumerate(tensors):
            if t.device != d:
                raise ValueError(f"slot {d} holds a tensor of device {t.device}")

    @staticmethod
    def _check_same_shape(tensors: Sequence[SimTensor], op: str) -> None:
        ref = tensors[0].shape
        for t in tensors:
            if t.shape != ref:
                raise ValueError(f"{op}: shape {t.shape} differs from {ref}")


def create_grid(p: int, capacity_bytes: int, bytes_per_elem: int = 2) -> DeviceGrid:
    return DeviceGrid(p, capacity_bytes, bytes_per_elem)


def _axis(dim: int, ndim: int) -> int:
    if not -ndim <= dim < ndim:
        raise ValueError(f"axis {dim} out of range for {ndim}-d tensor")
    return dim % ndim


def _ordered_sum(tensors: Sequence[SimTensor]) -> np.ndarray:
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data
    return total
