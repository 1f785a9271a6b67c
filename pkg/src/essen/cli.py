"""Command-line entry point: ``essen <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid invocation.
Logging verbosity comes from ESSEN_LOG={error|info|debug}.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from essen.config import (
    SWEEP_AXES,
    ConfigError,
    resolve_config,
    save_config,
    sweep_grid,
)
from essen.params import param_count_closed_form
from essen.pretraining import MAGIC, MAX_GRADCHECK_PARAMS, OptimizerConfig, grad_check, load_train_state
from essen.tasks import TASKS, ConfigMismatchError, load_task_model, write_summary

log = logging.getLogger("essen")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """Invalid invocation (exit code 2)."""


# -- argument parsing ----------------------------------------------------------

def _nonneg(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _positive(text: str) -> int:
    value = _nonneg(text)
    if value == 0:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return value


def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="essen", description="Compact vision-language encoders at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, *flags):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        for flag in flags:
            flag(sp)
        return sp

    def config(sp, default="tiny"):
        note = f"default: {default}" if default else "default: the checkpoint's, else tiny"
        sp.add_argument("--config", metavar="PATH", default=default,
                        help=f"preset name or JSON config path ({note})")

    def data(sp, required=True):
        sp.add_argument("--data", metavar="PATH", required=required, help="generated data directory")

    def out(sp, required=True):
        sp.add_argument("--out", metavar="PATH", required=required, help="output directory")

    def steps(sp, default=None):
        sp.add_argument("--steps", metavar="N", type=_nonneg, required=default is None, default=default)

    def seed(sp):
        sp.add_argument("--seed", metavar="N", type=_nonneg, required=True)

    def workers(sp):
        sp.add_argument("--workers", metavar="N", type=_positive, default=1)

    def task(sp, required=True):
        sp.add_argument("--task", choices=TASKS, required=required)

    def checkpoint(sp, required=False):
        sp.add_argument("--checkpoint", metavar="PATH", required=required,
                        help="checkpoint to start from or evaluate")

    def optim(sp):
        sp.add_argument("--batch-size", metavar="N", type=_positive, default=32)
        sp.add_argument("--lr", metavar="X", type=_float, default=1e-3)
        sp.add_argument("--warmup", metavar="N", type=_nonneg, default=100)

    g = add("gen-data", "generate shape-world pretraining pairs and task splits",
            out, seed, workers)
    g.add_argument("--count", metavar="N", type=_nonneg, default=None,
                   help="examples per task (default: 5000 pretraining, 6000 per task)")

    pt = add("pretrain", "MLM + ITM pretraining", config, data, out, steps, seed, checkpoint, optim)
    pt.add_argument("--checkpoint-every", metavar="N", type=_nonneg, default=0)

    ft = add("finetune", "fine-tune a checkpoint (or a fresh model) on a task",
             lambda sp: config(sp, None), data, out, steps, seed, task, checkpoint, optim, workers)
    ft.add_argument("--eval-interval", metavar="N", type=_positive, default=100)

    ev = add("eval", "evaluate a fine-tuned checkpoint on a task split",
             data, out, task, lambda sp: checkpoint(sp, True), workers)
    ev.add_argument("--split", choices=("train", "dev", "test"), default="test")

    add("params", "parameter report for a config", lambda sp: config(sp, "tiny"),
        lambda sp: out(sp, False))

    sw = add("sweep", "train one config per value along an axis and tabulate results",
             config, lambda sp: data(sp, False), out, lambda sp: steps(sp, 0), seed, optim)
    sw.add_argument("--axis", metavar="NAME", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", metavar="CSV", required=True)
    sw.add_argument("--task", choices=TASKS, action="append",
                    help="restrict evaluation to a task (repeatable; default: all)")

    add("grad-check", "compare autograd to central differences in float64",
        lambda sp: config(sp, "gradcheck-two-tower"), seed)

    add("wac", "train and evaluate the words-as-classifiers baseline on refres",
        data, out)
    return p


# -- helpers -------------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise RuntimeError(f"output directory {out} is not writable")
    return out


def _config(spec):
    try:
        return resolve_config(spec)
    except FileNotFoundError:
        raise UsageError(f"--config: {spec!r} is neither a preset nor an existing file") from None
    except (ConfigError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"--config: {exc}") from None


def _is_checkpoint(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(len(MAGIC)) == MAGIC
    except OSError:
        return False


def _optimizer(args) -> OptimizerConfig:
    try:
        return OptimizerConfig(lr=args.lr, warmup_steps=args.warmup)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_rows(path, rows) -> None:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys)
        w.writeheader()
        w.writerows(rows)


def _table(rows) -> str:
    keys = list(dict.fromkeys(k for r in rows for k in r))

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        if isinstance(v, int):
            return f"{v:,}"
        return str(v)

    cells = [[fmt(r.get(k, "")) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    lines = ["  ".join(k.ljust(w) for k, w in zip(keys, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from essen.pipeline import DEFAULT_COUNTS, generate_world, write_world

    out = _out_dir(args.out)
    counts = None if args.count is None else {k: args.count for k in DEFAULT_COUNTS}
    world = generate_world(args.seed, counts, args.workers)
    write_world(world, out)
    for task, splits in world.tasks.items():
        print(f"{task}: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    print(f"pretrain: {len(world.pretrain)} pairs; vocabulary {len(world.vocab)} tokens")
    return 0


def cmd_pretrain(args) -> int:
    from essen.pipeline import load_world, run_pretrain

    out = _out_dir(args.out)
    world = load_world(args.data, tasks=())
    state = None
    if args.checkpoint:
        state, vocab, _ = load_train_state(args.checkpoint)
        if vocab is not None and vocab.tokens != world.vocab.tokens:
            raise ConfigMismatchError("text.vocab: checkpoint vocabulary differs from the data's")
        cfg = state.model.cfg
    else:
        cfg = _config(args.config)
    save_config(cfg, out / "config.json")
    state = run_pretrain(cfg, world, args.steps, args.seed, out, _optimizer(args), args.batch_size,
                         args.checkpoint_every, state)
    if state.history:
        last = state.history[-1]
        print(f"step {state.step}: mlm {last['mlm_loss']:.4f} itm {last['itm_loss']:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    import torch

    from essen.pipeline import evaluate_split, load_world, run_finetune
    from essen.pretraining import save_checkpoint

    out = _out_dir(args.out)
    world = load_world(args.data, tasks=(args.task,), pretrain=False)
    if args.checkpoint and not _is_checkpoint(args.checkpoint):
        raise UsageError(f"--checkpoint: {args.checkpoint} is not a checkpoint file")
    # with a checkpoint, an explicit --config is a compatibility assertion
    cfg = _config(args.config) if args.config else None
    if cfg is None and not args.checkpoint:
        cfg = _config("tiny")
    state, trace, vocab = run_finetune(
        args.task, world, args.steps, args.seed, args.eval_interval, checkpoint=args.checkpoint,
        cfg=cfg, opt=_optimizer(args),
        batch_size=args.batch_size, metrics_path=out / "metrics.csv")
    save_checkpoint(state, out / "model.ckpt", vocab, extra={"task": args.task})
    with torch.no_grad():
        result = evaluate_split(state.model, world, args.task, "test", vocab)
    write_summary(result, out / "summary.json", split="test", steps=args.steps,
                  trace=trace)
    print(f"dev accuracy: {trace[-1]['accuracy']:.4f}")
    print(f"test accuracy: {result.accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    from essen.pipeline import evaluate_split, load_world

    out = _out_dir(args.out)
    if not _is_checkpoint(args.checkpoint):
        raise UsageError(f"--checkpoint: {args.checkpoint} is not a checkpoint file")
    world = load_world(args.data, tasks=(args.task,), pretrain=False)
    if not world.tasks[args.task][args.split]:
        raise ValueError(f"{args.task}/{args.split} is empty; nothing to evaluate")
    model, vocab, _ = load_task_model(args.checkpoint, args.task)
    result = evaluate_split(model, world, args.task, args.split, vocab)
    write_summary(result, out / "summary.json", split=args.split)
    print(f"accuracy: {result.accuracy:.4f}")
    if args.task == "refres":
        print(f"chance: {result.chance:.4f}")
    return 0


def cmd_params(args) -> int:
    cfg = _config(args.config)
    report = param_count_closed_form(cfg)
    if cfg.fusion is not None:
        f = cfg.fusion
        print(f"fusion: {f.layers} layers x hidden {f.hidden} (ffn {f.ffn}, heads {f.heads})")
    print(report.to_table())
    if args.out:
        out = _out_dir(args.out)
        (out / "params.json").write_text(report.to_json() + "\n")
    return 0


def _parse_values(axis: str, text: str) -> list:
    raw = [v.strip() for v in text.split(",") if v.strip()]
    if not raw:
        raise UsageError("--values: expected a comma-separated list")
    if axis in ("fusion_layers", "fusion_hidden"):
        try:
            return [int(v) for v in raw]
        except ValueError:
            raise UsageError(f"--values: {axis} takes integers, got {text!r}") from None
    return raw


def cmd_sweep(args) -> int:
    from essen.pipeline import load_world, sweep

    out = _out_dir(args.out)
    base = _config(args.config)
    values = _parse_values(args.axis, args.values)
    if args.axis.startswith("fusion") and base.fusion is None:
        raise UsageError(f"--axis {args.axis} needs a two-tower base config")
    try:
        configs = sweep_grid(base, args.axis, values)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    world = None
    if args.steps:
        if not args.data:
            raise UsageError("--data is required when --steps > 0")
        world = load_world(args.data, tasks=tuple(args.task or TASKS))
    rows = sweep(configs, world, args.steps, args.steps, args.seed, tuple(args.task or TASKS),
                 labels=values)
    for row in rows:
        row[args.axis] = row.pop("value")
    rows = [{args.axis: r[args.axis], **{k: v for k, v in r.items() if k != args.axis}}
            for r in rows]
    _write_rows(out / "sweep.csv", rows)
    print(_table(rows))
    return 0


def cmd_grad_check(args) -> int:
    cfg = _config(args.config)
    n = param_count_closed_form(cfg).total
    if n > MAX_GRADCHECK_PARAMS:
        print(f"refusing: config has {n:,} parameters; gradient checking is capped at "
              f"{MAX_GRADCHECK_PARAMS:,}", file=sys.stderr)
        return 2
    err = grad_check(cfg, seed=args.seed)
    ok = err < GRADCHECK_TOLERANCE
    print(f"max relative error: {err:.3e} ({'pass' if ok else 'FAIL'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


def cmd_wac(args) -> int:
    import numpy as np

    from essen.pipeline import load_world
    from essen.wac import wac_score, wac_train

    out = _out_dir(args.out)
    world = load_world(args.data, tasks=("refres",), pretrain=False)
    splits = world.tasks["refres"]
    classifiers = wac_train(splits["train"])
    rows = []
    for name in ("dev", "test"):
        examples = splits[name]
        if not examples:
            continue
        acc = float(np.mean([int(np.argmax(wac_score(classifiers, ex))) == ex.gold for ex in examples]))
        rows.append({"split": name, "accuracy": acc, "n": len(examples)})
        print(f"{name} accuracy: {acc:.4f}")
    (out / "wac.json").write_text(json.dumps({"words": sorted(classifiers), "results": rows},
                                             indent=2) + "\n")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "eval": cmd_eval, "params": cmd_params, "sweep": cmd_sweep,
    "grad-check": cmd_grad_check, "wac": cmd_wac,
}


def configure_logging() -> None:
    level = os.environ.get("ESSEN_LOG", "error").strip().lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"ESSEN_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        configure_logging()
        return COMMANDS[args.command](args)
    except (UsageError, ConfigMismatchError) as exc:
        print(f"essen {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("failure", exc_info=True)
        print(f"essen {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
