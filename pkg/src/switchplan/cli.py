"""Command-line entry point: profile, fit, plan, simulate, verify, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .costmodel import (CostModelSet, GiB, GridParams, ProfileFormatError, analytic_profile,
                        export_model, fit_cost_models, import_model, ingest_profiles,
                        length_sweep, write_profiles)
from .layouts import PRESETS, ModelConfig
from .runtime import (DATASETS, ColdRestart, DatasetSpec, SimSetup, TrainingTrace, ablate_setup,
                      load_dataset, run_training_sim, switch_overhead_report, verify_suite)
from .selector import PlanCache, select_plan
from .strategies import Strategy


class CliError(Exception):
    pass


def _help_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--help", action="help", help="show this help message and exit")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and grid")
    g.add_argument("--model", choices=sorted(PRESETS), help="preset configuration")
    g.add_argument("-h", "--hidden", type=int, help="hidden size (overrides preset)")
    g.add_argument("-n", "--heads", type=int, help="attention heads (overrides preset)")
    g.add_argument("-L", "--layers", type=int, help="transformer layers (overrides preset)")
    g.add_argument("--b", type=int, default=1, help="batch size (default 1)")
    g.add_argument("--p", type=int, default=8, help="devices in the grid (default 8)")
    g.add_argument("--capacity-gb", type=float, default=80.0,
                   help="per-device memory in GiB (default 80)")
    g.add_argument("--seed", type=int, default=42, help="random seed (default 42)")
    g.add_argument("--strategies", default=None,
                   help="comma-separated strategy names (default: all but ColossalZ)")


def _profile_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--s-min", type=int, default=1024, help="shortest profiled length")
    p.add_argument("--s-max", type=int, default=8192, help="longest profiled length")
    p.add_argument("--count", type=int, default=20, help="profiled lengths (default 20)")


def _bundle_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bundle", help="fitted model bundle from `fit` (default: fit on the fly)")
    p.add_argument("--gamma", type=float, default=0.05, help="smoothing ratio (default 0.05)")


def _out_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="switchplan", add_help=False,
                                     description="Layer-wise parallel strategy planning "
                                                 "and training simulation.")
    _help_flag(parser)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, add_help=False, help=help_text, description=help_text)
        _help_flag(p)
        return p

    p = command("profile", "write analytic profiles over a length sweep as CSV")
    _model_flags(p)
    _profile_flags(p)
    _out_flag(p)

    p = command("fit", "fit hybrid cost models from a profile CSV")
    p.add_argument("profiles", help="profile CSV from `profile`")
    p.add_argument("--capacity-gb", type=float, default=80.0, help="OOM threshold in GiB")
    p.add_argument("--seed", type=int, default=42, help="forest seed (default 42)")
    p.add_argument("--version", type=int, default=0, help="model version stamp")
    _out_flag(p)

    p = command("plan", "select a strategy plan for one (b, s)")
    _model_flags(p)
    _profile_flags(p)
    _bundle_flag(p)
    p.add_argument("--s", type=int, required=True, help="sequence length")
    _out_flag(p)

    p = command("simulate", "simulate training over a dataset and write the trace")
    _model_flags(p)
    _profile_flags(p)
    _bundle_flag(p)
    p.add_argument("--dataset", default="grch38",
                   help="githubcode, grch38, or a dataset JSON file (default grch38)")
    p.add_argument("--samples", type=int, default=1000, help="sequences drawn (default 1000)")
    p.add_argument("--align", type=int, default=1024,
                   help="round sampled lengths up to this multiple (default 1024)")
    p.add_argument("--mode", choices=("analytic", "numeric"), default="analytic")
    p.add_argument("--disable", default="",
                   help="comma-separated strategies or features (RF, smoothing) to remove")
    p.add_argument("--reserve", type=float, default=0.02,
                   help="fraction of capacity kept free when planning (default 0.02)")
    _out_flag(p)

    p = command("verify", "run strategy-equivalence and layout-closure checks")
    p.add_argument("--p", type=int, default=2, help="devices in the grid (default 2)")
    p.add_argument("--seed", type=int, default=42, help="random seed (default 42)")
    p.add_argument("--trials", type=int, default=3, help="random configs per strategy")

    p = command("report", "cumulative-time and ablation tables from trace files")
    p.add_argument("traces", nargs="+",
                   help="full-run trace first, then ablated traces (JSONL)")
    p.add_argument("--checkpoints", type=int, default=10, help="rows in the cumulative table")
    _out_flag(p)
    return parser


# -- helpers -------------------------------------------------------------

def _config(args) -> ModelConfig:
    base = PRESETS.get(args.model) if args.model else None
    h = args.hidden or (base.h if base else None)
    n = args.heads or (base.n if base else None)
    L = args.layers or (base.L if base else None)
    if h is None or n is None or L is None:
        raise CliError("give --model or all of -h/--hidden, -n/--heads, -L/--layers")
    return ModelConfig(h=h, n=n, L=L, b=args.b)


def _grid(args) -> GridParams:
    if args.p < 1:
        raise CliError("--p must be >= 1")
    return GridParams(p=args.p, capacity_bytes=int(args.capacity_gb * GiB))


def _strategies(spec: str | None) -> list[Strategy]:
    if not spec:
        return [s for s in Strategy if not s.eval_excluded]
    try:
        return [Strategy(x.strip()) for x in spec.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _profiles(args, config: ModelConfig, gp: GridParams):
    lengths = length_sweep(args.s_min, args.s_max, args.count, multiple=gp.p)
    return [analytic_profile(config, st, args.b, s, gp)
            for st in _strategies(args.strategies) for s in lengths]


def _models(args, config: ModelConfig, gp: GridParams) -> CostModelSet:
    if args.bundle:
        models = import_model(args.bundle)
        if (models.config.h, models.config.n, models.config.L) != (config.h, config.n, config.L):
            raise CliError(f"{args.bundle}: bundle was fitted for a different model")
        keep = set(_strategies(args.strategies)) if args.strategies else None
        if keep is not None:
            models = models.without([s for s in models.strategies() if s not in keep])
        return models
    return fit_cost_models(_profiles(args, config, gp), gp.capacity_bytes, seed=args.seed)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dataset(args) -> DatasetSpec:
    if args.dataset in DATASETS:
        return DATASETS[args.dataset](args.samples)
    path = Path(args.dataset)
    try:
        return DatasetSpec.from_json(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}: {exc.msg}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: invalid dataset ({exc})") from None


# -- commands ------------------------------------------------------------

def cmd_profile(args) -> None:
    config, gp = _config(args), _grid(args)
    records = _profiles(args, config, gp)
    write_profiles(records, args.out or sys.stdout)


def cmd_fit(args) -> None:
    records = ingest_profiles(args.profiles)
    if not records:
        raise CliError(f"{args.profiles}: no profile rows")
    models = fit_cost_models(records, int(args.capacity_gb * GiB), seed=args.seed,
                             version=args.version)
    _emit(json.dumps(models.to_json(), sort_keys=True) + "\n", args.out)


def cmd_plan(args) -> None:
    config, gp = _config(args), _grid(args)
    models = _models(args, config, gp)
    plan = select_plan(args.b, args.s, config, models, PlanCache(), gp.capacity_bytes, args.gamma)
    _emit(plan.dumps(args.b, args.s) + "\n", args.out)


def cmd_simulate(args) -> None:
    config, gp = _config(args), _grid(args)
    models = _models(args, config, gp)
    setup = SimSetup(config, models, gp, gamma=args.gamma, mode=args.mode, b=args.b,
                     seed=args.seed, reserve_frac=args.reserve)
    disable = [d.strip() for d in args.disable.split(",") if d.strip()]
    setup = ablate_setup(setup, disable)
    lengths = load_dataset(_dataset(args), args.seed, multiple=args.align)
    trace = run_training_sim(lengths, setup)
    if args.out and args.out.endswith(".csv"):
        trace.write_csv(args.out)
    else:
        _emit(trace.to_jsonl(), args.out)


def cmd_verify(args) -> int:
    checks = verify_suite(args.p, args.seed, args.trials)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} {c.detail}".rstrip())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def cmd_report(args) -> None:
    traces = [TrainingTrace.read_jsonl(p) for p in args.traces]
    full = traces[0]
    ok = [r for r in full.records if not r.oom]
    rows = []
    if ok:
        step = max(1, len(ok) // args.checkpoints)
        picks = sorted(set(range(step - 1, len(ok), step)) | {len(ok) - 1})
        total, running = 0.0, []
        for r in ok:
            total += r.time_s
            running.append(total)
        rows = [{"index": ok[i].index, "s": ok[i].s, "cumulative_time_s": running[i]}
                for i in picks]
    ablation = []
    for path, tr in zip(args.traces[1:], traces[1:]):
        common = min(full.max_supported_length, tr.max_supported_length)
        t, t_full = tr.time_to_length(common), full.time_to_length(common)
        ablation.append({"name": Path(path).stem, "Seq_len": tr.max_supported_length,
                         "Time": t, "Time_full": t_full,
                         "Saving": 100.0 * (t - t_full) / t if t else 0.0})
    report = {"max_supported_length": full.max_supported_length,
              "cumulative_time_s": full.cumulative_time_s,
              "cumulative": rows, "ablation": ablation,
              "switching": switch_overhead_report(full, ColdRestart())}
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)


COMMANDS = {"profile": cmd_profile, "fit": cmd_fit, "plan": cmd_plan,
            "simulate": cmd_simulate, "verify": cmd_verify, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = COMMANDS[args.command](args)
    except (CliError, ProfileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
