"""Command-line front end.

Subcommands: gen, pretrain, train, eval, greedy, sweep, report. Exit code 0 on
success, 2 on configuration or usage errors, 1 on runtime failures; errors are
printed to stderr as a single JSON line.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .baselines import DQNTrainer, check_kind, greedy_schedule
from .codec import ActionCodec
from .env import export_trace
from .harness import (
    COMPARISON_COLUMNS,
    SWEEP_COLUMNS,
    ConfigError,
    ExperimentConfig,
    ReportError,
    eval_set,
    generate_set,
    latent_dim_sweep,
    load_config,
    load_controller,
    parse_config,
    read_deployments,
    rows_to_csv,
    run_comparison,
    summarize,
    write_deployments,
    write_report,
)
from .nn import save_checkpoint
from .scenario import SCENARIO_TAGS, atomic_write_text, generate_deployment
from .training import Trainer, build_pretrain_buffer, losses_to_csv, pretrain_decoder

COMMANDS = ("gen", "pretrain", "train", "eval", "greedy", "sweep", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hadmc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment config (JSON)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="output directory (default: config output_dir)")
        s.add_argument("--models", help="comma-separated model kinds, or a directory of trained models")
        s.add_argument("--scenario", help="scenario tag (SA1..SR4) or a deployment file/directory")
        s.add_argument("--desk-scale", action="store_true", help="apply desk-scale training budgets")
        if name == "train":
            s.add_argument("--resume", action="store_true", help="continue from a saved resume state")
        if name == "report":
            s.add_argument("results", nargs="?", help="results directory (default: --out)")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.desk_scale) if args.config else parse_config({}, args.desk_scale)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out:
        updates["output_dir"] = args.out
    if args.scenario and args.scenario in SCENARIO_TAGS and args.scenario != "custom":
        updates["scenario"] = cfg.scenario.model_copy(update={"tag": args.scenario})
    return cfg.model_copy(update=updates)


def _out(cfg: ExperimentConfig, args=None) -> Path:
    """Create the output directory; copy the config verbatim plus its resolved form."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args is not None and args.config:
        atomic_write_text(out / "config.json", Path(args.config).read_text())
    doc = cfg.model_dump(mode="json")
    atomic_write_text(out / "resolved_config.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def _models(args, cfg) -> list[str]:
    if not args.models:
        return [cfg.model.kind]
    kinds = [k.strip() for k in args.models.split(",") if k.strip()]
    for k in kinds:
        try:
            check_kind(k)
        except ValueError as exc:
            raise ConfigError(str(exc), "models") from None
    return kinds


def _deployments(args, cfg):
    if args.scenario and args.scenario not in SCENARIO_TAGS:
        return read_deployments(args.scenario)
    return eval_set(cfg)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- commands

def cmd_gen(args, cfg) -> None:
    out = _out(cfg, args)
    paths = write_deployments(generate_set(cfg), out)
    print(json.dumps({"deployments": len(paths), "out": str(out)}))


def cmd_pretrain(args, cfg) -> None:
    out = _out(cfg, args)
    tc = cfg.train_config(kind="hadmc")
    spec = generate_deployment(tc.deployment_type, tc.n, tc.m, tc.params, tc.seed)
    buf = build_pretrain_buffer(spec, tc.pretrain_capacity, tc.seed, tc.reward)
    codec = ActionCodec(tc.codec_config(), seed=tc.seed)
    curve = pretrain_decoder(buf, codec, tc.n_pi, min(tc.b_pi, len(buf)), tc.seed + 1,
                             log_every=max(tc.n_pi // 10, 1), log=_say)
    save_checkpoint(codec.to_checkpoint(), out / "codec.json")
    atomic_write_text(out / "pretrain_losses.csv", losses_to_csv(curve))
    print(json.dumps({"l1_initial": curve[0][0], "l1_final": curve[-1][0], "out": str(out)}))


def cmd_train(args, cfg) -> None:
    out = _out(cfg, args)
    summary = {}
    for kind in _models(args, cfg):
        if kind == "greedy":
            continue
        mdir = out / kind
        mdir.mkdir(parents=True, exist_ok=True)
        resume = mdir / "resume.pkl"
        tc = cfg.train_config(kind=kind)
        if args.resume and resume.exists():
            trainer = Trainer.load_state(resume, _say)
        else:
            trainer = DQNTrainer(tc, _say) if kind == "dqn_disc" else Trainer(tc, _say)
        t0 = time.perf_counter()
        try:
            trainer.run()
        except BaseException:
            trainer.save_state(resume)
            raise
        trainer.write_outputs(mdir)
        atomic_write_text(mdir / "model.json", json.dumps({"kind": kind, "train": tc.to_dict()},
                                                          indent=2, sort_keys=True) + "\n")
        atomic_write_text(mdir / "timing.json", json.dumps({"wall_clock_s": time.perf_counter() - t0}) + "\n")
        if resume.exists():
            resume.unlink()
        summary[kind] = str(mdir)
    print(json.dumps({"trained": summary}))


def _comparison(args, cfg, models) -> None:
    out = _out(cfg, args)
    deps = _deployments(args, cfg)
    _, _, _, tag = cfg.resolved_scenario()
    rows = run_comparison(models, deps, tag, cfg.train_config().reward)
    atomic_write_text(out / "comparison.csv", rows_to_csv(rows, COMPARISON_COLUMNS))
    summary = summarize(rows)
    atomic_write_text(out / "comparison_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: {"completion_rate": v["completion_rate"], "objective_mean": v["objective_mean"]}
                      for k, v in summary.items()}))


def cmd_eval(args, cfg) -> None:
    kinds = [k.strip() for k in args.models.split(",")] if args.models and not Path(args.models).is_dir() else None
    base = Path(args.models) if args.models and Path(args.models).is_dir() else Path(cfg.output_dir)
    if kinds is None:
        kinds = sorted(p.name for p in base.iterdir() if (p / "policy.json").exists()) if base.is_dir() else []
        if not kinds:
            raise FileNotFoundError(f"no trained models under {base}")
    models = {}
    for k in kinds:
        models[k] = "greedy" if k == "greedy" else load_controller(base / k, k)
    _comparison(args, cfg, models)


def cmd_greedy(args, cfg) -> None:
    _comparison(args, cfg, {"greedy": "greedy"})
    out = Path(cfg.output_dir) / "greedy_traces"
    out.mkdir(parents=True, exist_ok=True)
    for dep_id, spec in _deployments(args, cfg):
        _, trace, _ = greedy_schedule(spec, cfg.train_config().reward)
        export_trace(trace, out / f"{dep_id}.csv")


def cmd_sweep(args, cfg) -> None:
    out = _out(cfg, args)
    tc = cfg.train_config()
    sw = cfg.sweep
    spec = generate_deployment(tc.deployment_type, tc.n, tc.m, tc.params, tc.seed)
    rows = latent_dim_sweep(spec, sw.kappa1, sw.kappa2, sw.samples, tc.seed, sw.n_pi, sw.b_pi,
                            sw.buffer, tc.codec_lr, tc.dtype, tc.hidden)
    atomic_write_text(out / "sweep.csv", rows_to_csv(rows, SWEEP_COLUMNS))
    print(json.dumps({"points": len(rows) // 2, "out": str(out / "sweep.csv")}))


def cmd_report(args, cfg) -> None:
    results = Path(args.results or cfg.output_dir)
    paths = write_report(results)
    print(json.dumps({"bundles": [str(p) for p in paths]}))


HANDLERS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "greedy": cmd_greedy, "sweep": cmd_sweep, "report": cmd_report}


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(2, "usage", str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = _load(args)
        if args.command == "report" and not args.results and not args.out and not args.config:
            raise ConfigError("report needs a results directory", "results")
        HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(2, "config", str(exc), field=exc.field_path)
    except ReportError as exc:
        return _fail(1, "report", str(exc), missing=exc.missing)
    except KeyboardInterrupt:
        return _fail(1, "runtime", "interrupted")
    except Exception as exc:
        return _fail(1, "runtime", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
