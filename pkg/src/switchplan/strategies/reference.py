"""Dense single-device transformer sublayers used as the numeric oracle.

``W_qkv`` columns are grouped per head: head ``j`` owns columns
``[3dj, 3dj + 3d)`` laid out as ``[q_j | k_j | v_j]``. Contiguous column
blocks therefore hold whole heads, which is what lets the sharded
executors split ``W_qkv`` by head groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf


@dataclass
class DenseWeights:
    w_qkv: np.ndarray  # h x 3h
    w_proj: np.ndarray  # h x h
    w_in: np.ndarray  # h x 4h
    w_out: np.ndarray  # 4h x h

    @classmethod
    def random(cls, h: int, rng: np.random.Generator) -> "DenseWeights":
        scale = 1.0 / math.sqrt(h)
        return cls(
            w_qkv=rng.normal(0.0, scale, (h, 3 * h)),
            w_proj=rng.normal(0.0, scale, (h, h)),
            w_in=rng.normal(0.0, scale, (h, 4 * h)),
            w_out=rng.normal(0.0, 0.5 * scale, (4 * h, h)),
        )


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-token normalization over the hidden axis, no affine parameters."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def qkv_columns(n_heads: int, d: int, which: str) -> np.ndarray:
    """Column indices of q, k or v (all heads, head-major) within ``W_qkv``."""
    off = {"q": 0, "k": d, "v": 2 * d}[which]
    return np.concatenate([np.arange(3 * d * j + off, 3 * d * j + off + d)
                           for j in range(n_heads)])


def split_heads(t: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, hd = t.shape
    return t.reshape(b, s, n_heads, hd // n_heads).transpose(0, 2, 1, 3)


def merge_heads(t: np.ndarray) -> np.ndarray:
    b, nh, s, d = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, s, nh * d)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def reference_mha(x: np.ndarray, weights: DenseWeights, n: int) -> np.ndarray:
    b, s, h = x.shape
    if weights.w_qkv.shape != (h, 3 * h) or weights.w_proj.shape != (h, h):
        raise ValueError(f"MHA weights do not match hidden size {h}")
    if h % n:
        raise ValueError(f"hidden size {h} not divisible by {n} heads")
    d = h // n
    q = split_heads(x @ weights.w_qkv[:, qkv_columns(n, d, "q")], n)
    k = split_heads(x @ weights.w_qkv[:, qkv_columns(n, d, "k")], n)
    v = split_heads(x @ weights.w_qkv[:, qkv_columns(n, d, "v")], n)
    probs = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(d))
    return merge_heads(probs @ v) @ weights.w_proj


def reference_ffn(x: np.ndarray, weights: DenseWeights) -> np.ndarray:
    h = x.shape[-1]
    if weights.w_in.shape != (h, 4 * h) or weights.w_out.shape != (4 * h, h):
        raise ValueError(f"FFN weights do not match hidden size {h}")
    return gelu(x @ weights.w_in) @ weights.w_out
