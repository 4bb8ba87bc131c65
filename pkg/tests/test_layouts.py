import json
from pathlib import Path

import numpy as np
import pytest

from switchplan.layouts import (PRESETS, TABLE_COLUMNS, Dim, ModelConfig, Role, TensorLayout,
                                bind_sizes, check_shards, compatible, method_layout, shard,
                                spec_layout, table2, unshard)
from switchplan.simgrid import create_grid

FIXTURE = json.loads((Path(__file__).parent / "fixtures" / "table2.json").read_text())


def test_table2_golden():
    table = table2()
    assert list(table) == list(FIXTURE)
    for method, cells in FIXTURE.items():
        assert [table[method][c] for c in TABLE_COLUMNS] == cells, method


def test_model_config_validation():
    cfg = ModelConfig(h=1024, n=16, L=24)
    assert cfg.d == 64 and cfg.b == 1
    with pytest.raises(ValueError):
        ModelConfig(h=10, n=3, L=1)
    with pytest.raises(ValueError):
        ModelConfig(h=8, n=2, L=0)


def test_presets_match_model_table():
    assert {k: (c.h, c.n, c.L) for k, c in PRESETS.items()} == {
        "bert": (1024, 16, 24), "llama": (8192, 64, 80), "gpt": (12288, 96, 96)}


def test_spec_activation_shape():
    cfg = ModelConfig(h=1024, n=16, L=1, b=1)
    lay = spec_layout(Role.X_MHA, cfg, p=4, s=8)
    assert lay.shard_shape({"b": 1, "s": 8, "h": 1024}) == (1, 2, 1024)
    assert lay.dims[lay.shard_dim].sym == "s"


def test_spec_wqkv_stored_transposed():
    lay = spec_layout(Role.W_QKV, ModelConfig(h=1024, n=16, L=1), p=4)
    assert lay.transposed
    assert lay.shard_shape({"h": 1024}) == (768, 1024)


def test_spec_wout_unsharded_at_p1():
    lay = spec_layout(Role.W_OUT, ModelConfig(h=1024, n=16, L=1), p=1)
    assert lay.shard_shape({"h": 1024}) == (4096, 1024)


def test_spec_layout_rejects_indivisible_axis():
    with pytest.raises(ValueError, match="s"):
        spec_layout(Role.X_MHA, ModelConfig(h=8, n=2, L=1), p=3, s=8)


def test_method_layout_examples():
    tp = method_layout("Megatron-LM TP", Role.X_MHA, 4)
    assert tp.render() == "b×s×h" and not tp.is_sharded
    z3 = method_layout("DeepSpeed ZeRO3", Role.X_MHA, 4)
    assert z3.dims[z3.shard_dim].sym == "b"
    assert z3.shard_shape({"b": 8, "s": 3, "h": 2}) == (2, 3, 2)
    assert method_layout("Colossal-AI SP", Role.W_QKV, 4).render() == "h×3h"
    with pytest.raises(KeyError):
        method_layout("Alpa", Role.X_MHA, 4)


def test_single_shard_rule():
    with pytest.raises((ValueError, TypeError)):
        TensorLayout(Role.X_MHA, (Dim("b"), Dim("s"), Dim("h")), (0, 1), 2)


def test_compatible_examples():
    p = 4
    o, x_ffn = spec_layout(Role.O, p=p), spec_layout(Role.X_FFN, p=p)
    assert compatible(o, x_ffn)
    assert not compatible(method_layout("Megatron-LM TP", Role.O, p), spec_layout(Role.X_MHA, p=p))
    for role in Role:
        lay = spec_layout(role, p=p)
        assert compatible(lay, lay)
    assert not compatible(spec_layout(Role.Z, p=p), spec_layout(Role.X_FFN, p=p))


def test_shard_round_trip_plain_matrix():
    g = create_grid(2, 1 << 20)
    lay = TensorLayout(Role.W_OUT, (Dim("r"), Dim("c")), 0, 2)
    dense = np.arange(24.0).reshape(4, 6)
    parts = shard(dense, lay, g)
    assert [t.shape for t in parts] == [(2, 6), (2, 6)]
    np.testing.assert_array_equal(parts[1].data, dense[2:])
    np.testing.assert_array_equal(unshard(parts, lay), dense)


def test_shard_wqkv_explicit_index_bookkeeping():
    h, p = 4, 2
    g = create_grid(p, 1 << 20)
    dense = np.arange(h * 3 * h, dtype=float).reshape(h, 3 * h)
    lay = spec_layout(Role.W_QKV, p=p)
    parts = shard(dense, lay, g)
    rows = 3 * h // p
    for d, t in enumerate(parts):
        assert t.shape == (rows, h)
        for i in range(rows):
            for j in range(h):
                assert t.data[i, j] == dense[j, d * rows + i]
    np.testing.assert_array_equal(unshard(parts, lay), dense)


def test_shard_p1_returns_dense():
    g = create_grid(1, 1 << 20)
    x = np.random.default_rng(0).normal(size=(1, 4, 3))
    parts = shard(x, spec_layout(Role.X_MHA, p=1), g)
    assert len(parts) == 1 and parts[0].device == 0
    np.testing.assert_array_equal(parts[0].data, x)


def test_shard_rejects_indivisible():
    g = create_grid(3, 1 << 20)
    with pytest.raises(ValueError):
        shard(np.zeros((1, 4, 2)), spec_layout(Role.X_MHA, p=3), g)


def test_check_shards_rejects_wrong_shape():
    g = create_grid(2, 1 << 20)
    lay = spec_layout(Role.X_MHA, p=2)
    parts = shard(np.zeros((1, 4, 2)), lay, g)
    check_shards(parts, lay, {"b": 1, "s": 4, "h": 2})
    with pytest.raises(ValueError):
        check_shards(parts, lay, {"b": 1, "s": 8, "h": 2})


def test_bind_sizes_recovers_symbols():
    lay = spec_layout(Role.W_IN, p=2)
    assert bind_sizes(lay, (6, 24)) == {"h": 6}
