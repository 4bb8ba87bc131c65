import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from switchplan.costmodel import GridParams, analytic_profile, fit_cost_models, length_sweep
from switchplan.layouts import PRESETS, ModelConfig
from switchplan.runtime import (BUCKET_EDGES, GITHUBCODE_PERCENTS, ColdRestart, DatasetSpec,
                                SequenceRecord, SimSetup, TrainingTrace, ablate_setup,
                                ablation_run, analytic_plan_cost, check_chain, curriculum_sort,
                                githubcode, grch38, load_dataset, run_training_sim,
                                switch_overhead_report)
from switchplan.strategies import Strategy

EVAL = [s for s in Strategy if not s.eval_excluded]


def fitted(config, gp, strategies=EVAL, s_max=8192):
    recs = [analytic_profile(config, st, 1, s, gp) for st in strategies
            for s in length_sweep(1024, s_max, 20, multiple=gp.p)]
    return fit_cost_models(recs, gp.capacity_bytes)


# -- datasets ----------------------------------------------------------------

def test_githubcode_bucket_frequencies():
    lengths = np.array(load_dataset(githubcode(10_000), seed=0))
    edges = np.array(BUCKET_EDGES, dtype=float)
    counts = np.histogram(lengths, bins=np.append(edges[:-1], np.inf))[0]
    freq = counts / counts.sum()
    want = np.array(GITHUBCODE_PERCENTS) / 100
    assert np.abs(freq - want).max() < 0.02
    assert lengths.max() <= 309 * 1024


def test_grch38_cap_is_hard():
    for multiple in (1, 1024):
        lengths = load_dataset(grch38(5000), seed=1, multiple=multiple)
        assert max(lengths) <= 624 * 1024
        assert all(s % multiple == 0 for s in lengths)


def test_explicit_lengths_pass_through():
    assert load_dataset(DatasetSpec(lengths=(5, 10))) == [5, 10]


@pytest.mark.parametrize("buckets", [
    ((0, 10, 0.5), (10, 20, 0.4)),
    ((0, 10, 1.2), (10, 20, -0.2)),
    (),
])
def test_invalid_histogram(buckets):
    with pytest.raises(ValueError):
        DatasetSpec(buckets=buckets, max_len=20, count=5)


def test_dataset_json_round_trip():
    spec = grch38(7)
    assert DatasetSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


def test_curriculum_sort():
    assert curriculum_sort([3, 1, 2]) == [1, 2, 3]
    assert curriculum_sort([1, 2, 3]) == [1, 2, 3]
    rng = np.random.default_rng(0)
    for _ in range(20):
        xs = rng.integers(0, 100, 30).tolist()
        assert curriculum_sort(xs) == sorted(xs)


# -- simulation ----------------------------------------------------------

def test_single_strategy_trace_is_analytic_sum():
    gp = GridParams()
    config = PRESETS["bert"]
    models = fitted(config, gp, [Strategy.MEGATRON_TS])
    lengths = [4096, 1024, 2048, 8192]
    trace = run_training_sim(lengths, SimSetup(config, models, gp))
    want = 0.0
    for s in sorted(lengths):
        want += analytic_plan_cost(config, [Strategy.MEGATRON_TS] * config.L, 1, s, gp)[0]
    assert trace.cumulative_time_s == pytest.approx(want, rel=1e-12)
    assert trace.switch_count == 0 and not trace.oom


class CrossoverCosts:
    """MegatronTS costs s, METP costs 100 + s/2: they cross at s = 200."""

    version = 0

    def layer_costs(self, b, s):
        return {Strategy.MEGATRON_TS: (float(s), 1.0), Strategy.METP: (100.0 + s / 2, 1.0)}


def test_crossover_gives_one_transition_and_clean_comm():
    config = ModelConfig(h=8, n=2, L=1)
    gp = GridParams(p=2)
    crossover = 200  # s = 100 + s / 2
    lengths = [64, 128, 192, 256, 320]
    setup = SimSetup(config, CrossoverCosts(), gp, mode="numeric", smoothing=False)
    trace = run_training_sim(lengths, setup)  # raises if the comm log is not clean
    assert trace.switch_count == 1
    switched = [r for r in trace.records if r.switched]
    assert switched[0].s == min(s for s in lengths if s > crossover)
    assert [r.plan[0] for r in trace.records] == ["MegatronTS"] * 3 + ["METP"] * 2


def test_mixed_chain_comm_is_clean():
    rng = np.random.default_rng(0)
    plan = [Strategy.MEGATRON_TS, Strategy.METP, Strategy.COLOSSAL_Z, Strategy.ULYSSES_Z]
    assert check_chain(plan, 2, 1, 8, 8, 2, rng).passed


def test_numeric_mode_size_bound():
    gp = GridParams()
    config = PRESETS["gpt"]
    with pytest.raises(ValueError, match="numeric mode"):
        run_training_sim([1024], SimSetup(config, CrossoverCosts(), gp, mode="numeric"))


def test_unfitted_models_error():
    gp = GridParams()
    config = PRESETS["bert"]
    models = fitted(config, gp, [Strategy.MEGATRON_TS])
    with pytest.raises(ValueError):
        run_training_sim([1024], ablate_setup(SimSetup(config, models, gp), ["MegatronTS"]))


@pytest.fixture(scope="module")
def gpt_setup():
    gp = GridParams()
    config = PRESETS["gpt"]
    lengths = load_dataset(grch38(1000), seed=42, multiple=1024)
    setup = SimSetup(config, fitted(config, gp), gp)
    return lengths, setup, run_training_sim(lengths, setup)


def test_disable_metp_shortens_max_length(gpt_setup):
    lengths, setup, full = gpt_setup
    row, _ = ablation_run(lengths, setup, [Strategy.METP], full)
    assert row.seq_len < row.seq_len_full


def test_disable_fastest_strategy_costs_time(gpt_setup):
    lengths, setup, full = gpt_setup
    row, _ = ablation_run(lengths, setup, [Strategy.MEGATRON_TS], full)
    assert row.time_s > row.time_full_s and row.saving > 0
    assert set(row.to_json()) >= {"Seq_len", "Time", "Time_full", "Saving"}


def test_disable_nothing_is_identity(gpt_setup):
    lengths, setup, full = gpt_setup
    _, again = ablation_run(lengths, setup, [], full)
    assert again.to_jsonl() == full.to_jsonl()


def test_trace_stops_at_first_oom(gpt_setup):
    _, _, full = gpt_setup
    assert full.oom and full.records[-1].oom
    assert sum(r.oom for r in full.records) == 1
    assert full.records[-1].time_s == 0.0
    assert all(r.peak_mem_bytes <= GridParams().capacity_bytes for r in full.records[:-1])


def test_trace_file_round_trips(gpt_setup, tmp_path):
    _, _, full = gpt_setup
    path = tmp_path / "trace.jsonl"
    full.write_jsonl(path)
    assert TrainingTrace.read_jsonl(path).records == full.records
    full.write_csv(tmp_path / "trace.csv")
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert len(rows) == len(full.records)
    assert rows[0]["plan"].split("|") == list(full.records[0].plan)


def test_bad_trace_line_is_reported(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text('{"index": 0}\n')
    with pytest.raises(ValueError, match="t.jsonl:1"):
        TrainingTrace.read_jsonl(path)


# -- switching cost accounting -----------------------------------------------

def trace_with_switches(k):
    recs = [SequenceRecord(i, 1024, ("MegatronTS",), 1.0, 1.0, 1.0, i > 0 and i <= k, 0, False)
            for i in range(k + 2)]
    return TrainingTrace(recs)


def test_cold_restart_defaults():
    report = switch_overhead_report(trace_with_switches(1))
    assert 30.5 <= report["cold_restart_s"] <= 31.5
    assert report["reinit_share"] == pytest.approx(0.702, abs=0.005)
    assert report["hot_switch_s"] == 0.0


def test_savings_linear_in_switches():
    assert switch_overhead_report(trace_with_switches(0))["savings_s"] == 0.0
    base = ColdRestart().total_s
    for k in (1, 3, 7):
        assert switch_overhead_report(trace_with_switches(k))["savings_s"] == pytest.approx(k * base)
