"""End-to-end runs shared by the CLI and the acceptance suite.

On-disk world layout (all under one directory)::

    world.json                 generation parameters
    vocab.txt                  WordPiece vocabulary
    pretrain/manifest.jsonl    caption pairs
    <task>/{train,dev,test}.jsonl
    */images/*.ppm
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from essen.config import ModelConfig
from essen.data.datasets import SPLITS, build, corpus_of, load_examples, split, write_examples
from essen.params import param_count_closed_form
from essen.pretraining import (
    MaskingPolicy,
    OptimizerConfig,
    PretrainData,
    PretrainingModel,
    TrainState,
    pretrain,
    save_checkpoint,
)
from essen.tasks import TASKS, TaskModel, evaluate, finetune_loop, load_task_model, prepare
from essen.tokenizer import Vocabulary, build_vocab

log = logging.getLogger("essen")

DEFAULT_COUNTS = {"pretrain": 5000, "entail": 6000, "pairjudge": 6000, "refres": 6000}
DESK_OPTIMIZER = OptimizerConfig(lr=1e-3, warmup_steps=100)


@dataclass
class World:
    pretrain: list
    tasks: dict  # task -> {split: [examples]}
    vocab: Vocabulary
    params: dict = field(default_factory=dict)


def generate_world(seed: int, counts=None, workers: int = 1, vocab_size: int = 320,
                   refres_kwargs=None) -> World:
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    pairs = build("pretrain", counts["pretrain"], seed, workers)
    tasks = {}
    for task in TASKS:
        kw = (refres_kwargs or {}) if task == "refres" else {}
        tasks[task] = split(build(task, counts[task], seed, workers, **kw))
    corpus = corpus_of(pairs) + [t for task in TASKS for t in corpus_of(tasks[task]["train"])]
    vocab = build_vocab(corpus, vocab_size)
    return World(pairs, tasks, vocab, {"seed": seed, "counts": counts, "vocab_size": vocab_size,
                                       "refres": dict(refres_kwargs or {})})


def write_world(world: World, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_examples(world.pretrain, out / "pretrain" / "manifest.jsonl")
    for task, splits in world.tasks.items():
        for name in SPLITS:
            write_examples(splits[name], out / task / f"{name}.jsonl")
    world.vocab.save(out / "vocab.txt")
    (out / "world.json").write_text(json.dumps(world.params, indent=2, sort_keys=True) + "\n")


def load_world(path, tasks=TASKS, pretrain: bool = True) -> World:
    path = Path(path)
    if not (path / "vocab.txt").exists():
        raise FileNotFoundError(f"{path} is not a generated data directory (no vocab.txt)")
    pairs = load_examples(path / "pretrain" / "manifest.jsonl") if pretrain else []
    splits = {t: {s: load_examples(path / t / f"{s}.jsonl") for s in SPLITS} for t in tasks}
    params = json.loads((path / "world.json").read_text()) if (path / "world.json").exists() else {}
    return World(pairs, splits, Vocabulary.load(path / "vocab.txt"), params)


def seeded(cfg: ModelConfig, seed: int) -> ModelConfig:
    return dataclasses.replace(cfg, seed=seed)


def run_pretrain(cfg: ModelConfig, world: World, steps: int, seed: int, out=None,
                 opt: OptimizerConfig = DESK_OPTIMIZER, batch_size: int = 32,
                 checkpoint_every: int = 0, state: TrainState | None = None) -> TrainState:
    torch.manual_seed(seed)
    if state is None:
        state = TrainState.create(PretrainingModel(seeded(cfg, seed)), opt, seed)
    data = PretrainData.from_pairs(world.pretrain, world.vocab, cfg.text.max_len)
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss.csv" if out is not None else None

    def progress(st, row):
        if st.step % 100 == 0:
            log.info("step %d mlm %.4f itm %.4f", st.step, row["mlm_loss"], row["itm_loss"])

    pretrain(state, data, steps, batch_size, MaskingPolicy(), log_path=log_path,
             checkpoint_every=checkpoint_every,
             checkpoint_dir=out / "checkpoints" if out is not None else None,
             vocab=world.vocab, callback=progress)
    if out is not None:
        save_checkpoint(state, out / "model.ckpt", world.vocab)
    return state


def run_finetune(task: str, world: World, steps: int, seed: int, eval_interval: int,
                 checkpoint=None, cfg: ModelConfig | None = None,
                 opt: OptimizerConfig = DESK_OPTIMIZER, batch_size: int = 32,
                 eval_split: str = "dev", metrics_path=None, encoder_state=None):
    """Fine-tune from a checkpoint path, a pretrained module, or random init (``cfg``)."""
    torch.manual_seed(seed)
    if checkpoint is not None:
        model, vocab, _ = load_task_model(checkpoint, task, expected=cfg, head_seed=seed)
        vocab = vocab or world.vocab
    else:
        model = TaskModel(seeded(cfg, seed), task, head_seed=seed)
        vocab = world.vocab
        if encoder_state is not None:
            model.encoder.load_state_dict(encoder_state)
    train = prepare(task, world.tasks[task]["train"], vocab, model.cfg)
    dev = prepare(task, world.tasks[task][eval_split], vocab, model.cfg)
    state, trace = finetune_loop(model, train, dev, steps, eval_interval, opt, batch_size, seed,
                                 metrics_path)
    return state, trace, vocab


def evaluate_split(model: TaskModel, world: World, task: str, split_name: str = "test",
                   vocab: Vocabulary | None = None):
    data = prepare(task, world.tasks[task][split_name], vocab or world.vocab, model.cfg)
    return evaluate(model, data)


def sweep(configs, world: World | None, steps: int, finetune_steps: int, seed: int,
          tasks=TASKS, labels=None) -> list[dict]:
    """Train every config identically and collect params plus dev accuracy per task."""
    rows = []
    for i, cfg in enumerate(configs):
        row = {"value": labels[i] if labels else i, "arch": cfg.arch,
               "fusion": (f"{cfg.fusion.layers}x{cfg.fusion.hidden}" if cfg.fusion else "-"),
               "params": param_count_closed_form(cfg).total}
        if world is not None and (steps or finetune_steps):
            state = run_pretrain(cfg, world, steps, seed)
            enc = state.model.encoder.state_dict()
            for task in tasks:
                ft, trace, _ = run_finetune(task, world, finetune_steps, seed,
                                            max(finetune_steps, 1), cfg=seeded(cfg, seed),
                                            encoder_state=enc)
                row[f"{task}_dev"] = trace[-1]["accuracy"]
        rows.append(row)
    return rows
