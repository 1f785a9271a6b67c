"""Downstream tasks: visual entailment, two-image judgment, reference resolution.

Each task puts a small affine head on the encoder's pooled vector:

* entail: pooled -> 3 logits
* pairjudge: the encoder runs once per image; [pooled_a; pooled_b] -> 2 logits
* refres: every candidate box is cropped and scored pooled -> 1; scores
  are softmax-normalized over the candidates
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from essen.config import ModelConfig, config_to_dict
from essen.data.datasets import EntailExample, PairJudgeExample, RefResExample
from essen.data.language import ENTAIL_LABELS
from essen.data.scene import crop_resize
from essen.fusion import VisionLanguageEncoder
from essen.pretraining import (
    Adam,
    NonFiniteLossError,
    OptimizerConfig,
    TrainState,
    checkpoint_config,
    first_nonfinite,
    load_weights,
    read_checkpoint,
    save_checkpoint,
)
from essen.tokenizer import Vocabulary, batch_tokenize

TASKS = ("entail", "pairjudge", "refres")
N_CLASSES = {"entail": 3, "pairjudge": 2}
TEXT_FIELD = {"entail": "hypothesis", "pairjudge": "statement", "refres": "expression"}
EXAMPLE_TYPES = {"entail": EntailExample, "pairjudge": PairJudgeExample, "refres": RefResExample}


class ConfigMismatchError(ValueError):
    pass


def _check_task(task: str) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    return task


# -- model -------------------------------------------------------------------

class TaskModel(nn.Module):
    def __init__(self, cfg: ModelConfig, task: str, head_seed: int | None = None):
        super().__init__()
        self.task = _check_task(task)
        self.encoder = VisionLanguageEncoder(cfg)
        d = cfg.width
        if task == "pairjudge":
            self.head = nn.Linear(2 * d, 2)
        elif task == "entail":
            self.head = nn.Linear(d, 3)
        else:
            self.head = nn.Linear(d, 1)
        g = torch.Generator().manual_seed(cfg.seed + 2 if head_seed is None else head_seed)
        with torch.no_grad():
            nn.init.trunc_normal_(self.head.weight, std=0.02, a=-0.04, b=0.04, generator=g)
            nn.init.zeros_(self.head.bias)

    @property
    def cfg(self) -> ModelConfig:
        return self.encoder.cfg

    def zero_head(self) -> "TaskModel":
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        return self

    def forward(self, batch: "TaskBatch") -> torch.Tensor:
        """Logits (B, C); for refres C is the candidate count, padded with -inf."""
        if self.task == "entail":
            return self.head(self.encoder(batch.ids, batch.attn_mask, batch.pixels).pooled)
        if self.task == "pairjudge":
            a = self.encoder(batch.ids, batch.attn_mask, batch.pixels).pooled
            b = self.encoder(batch.ids, batch.attn_mask, batch.pixels_b).pooled
            return self.head(torch.cat([a, b], dim=-1))
        B, K = batch.pixels.shape[:2]
        ids = batch.ids.repeat_interleave(K, dim=0)
        mask = batch.attn_mask.repeat_interleave(K, dim=0)
        crops = batch.pixels.reshape(B * K, *batch.pixels.shape[2:])
        scores = self.head(self.encoder(ids, mask, crops).pooled).reshape(B, K)
        valid = torch.arange(K)[None] < batch.counts[:, None]
        return scores.masked_fill(~valid, float("-inf"))


def entail_forward(model: TaskModel, batch) -> torch.Tensor:
    return model(batch)


def pairjudge_forward(model: TaskModel, batch) -> torch.Tensor:
    return model(batch)


def refres_scores(model: TaskModel, batch) -> torch.Tensor:
    """Probabilities over candidates (rows sum to 1)."""
    return torch.softmax(model(batch), dim=-1)


def task_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, targets)


entail_loss = pairjudge_loss = refres_loss = task_loss


def argmax_first(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    arr = scores.detach().cpu().numpy() if isinstance(scores, torch.Tensor) else np.asarray(scores)
    return np.argmax(arr, axis=-1)


# -- tensors -----------------------------------------------------------------

@dataclass
class TaskBatch:
    ids: torch.Tensor
    attn_mask: torch.Tensor
    pixels: torch.Tensor  # (B,3,S,S), or (B,K,3,S,S) crops for refres
    targets: torch.Tensor
    pixels_b: torch.Tensor | None = None
    counts: torch.Tensor | None = None


@dataclass
class TaskData:
    """A task split tokenized and converted to arrays once, up front."""

    task: str
    ids: np.ndarray
    attn_mask: np.ndarray
    pixels: np.ndarray
    targets: np.ndarray
    pixels_b: np.ndarray | None = None
    counts: np.ndarray | None = None
    ids_list: list = field(default_factory=list)

    def __len__(self):
        return len(self.targets)

    @property
    def n_classes(self) -> int:
        return int(self.pixels.shape[1]) if self.task == "refres" else N_CLASSES[self.task]

    def batch(self, rows) -> TaskBatch:
        rows = np.asarray(rows)
        t = torch.from_numpy
        return TaskBatch(t(self.ids[rows]), t(self.attn_mask[rows]),
                         t(np.ascontiguousarray(self.pixels[rows])), t(self.targets[rows]),
                         None if self.pixels_b is None else t(np.ascontiguousarray(self.pixels_b[rows])),
                         None if self.counts is None else t(self.counts[rows]))


def _image_size_check(img: np.ndarray, cfg: ModelConfig, what: str):
    if img.shape[-1] != cfg.image_size or img.shape[-2] != cfg.image_size:
        raise ConfigMismatchError(
            f"vision.image_size: model expects {cfg.image_size}px images, "
            f"{what} are {img.shape[-2]}x{img.shape[-1]}")


def prepare(task: str, examples, vocab: Vocabulary, cfg: ModelConfig) -> TaskData:
    """Tokenize, stack images, and crop candidate boxes (refres)."""
    _check_task(task)
    examples = list(examples)
    if not examples:
        raise ValueError(f"empty {task} dataset")
    kind = EXAMPLE_TYPES[task]
    for ex in examples:
        if not isinstance(ex, kind):
            raise TypeError(f"{task} expects {kind.__name__}, got {type(ex).__name__}")
    attr = TEXT_FIELD[task]
    ids, mask = batch_tokenize([getattr(ex, attr) for ex in examples], vocab, cfg.text.max_len)
    targets = np.array([ex.target for ex in examples], dtype=np.int64)
    names = [ex.id for ex in examples]
    if task == "entail":
        pixels = np.stack([ex.image for ex in examples]).astype(np.float32)
        _image_size_check(pixels, cfg, "entailment images")
        return TaskData(task, ids, mask, pixels, targets, ids_list=names)
    if task == "pairjudge":
        a = np.stack([ex.image_a for ex in examples]).astype(np.float32)
        b = np.stack([ex.image_b for ex in examples]).astype(np.float32)
        _image_size_check(a, cfg, "pair-judgment images")
        return TaskData(task, ids, mask, a, targets, pixels_b=b, ids_list=names)
    S = cfg.image_size
    K = max(len(ex.candidates) for ex in examples)
    crops = np.zeros((len(examples), K, 3, S, S), dtype=np.float32)
    counts = np.zeros(len(examples), dtype=np.int64)
    for i, ex in enumerate(examples):
        counts[i] = len(ex.candidates)
        for k, box in enumerate(ex.candidates):
            crops[i, k] = crop_resize(ex.image, box, S)
    return TaskData(task, ids, mask, crops, targets, counts=counts, ids_list=names)


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    task: str
    accuracy: float
    correct: int
    total: int
    confusion: list  # confusion[gold][pred]
    chance: float
    predictions: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("task", "accuracy", "correct", "total", "confusion", "chance")}
        if self.task == "entail":
            d["labels"] = list(ENTAIL_LABELS)
        return d


@torch.no_grad()
def predict(model: TaskModel, data: TaskData, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = [argmax_first(model(data.batch(np.arange(s, min(s + batch_size, len(data))))))
           for s in range(0, len(data), batch_size)]
    return np.concatenate(out)


def evaluate(model, data, task: str | None = None, batch_size: int = 64) -> EvalResult:
    """Accuracy and confusion counts of a TaskModel or any object with ``predict``.

    ``data`` is a TaskData for neural models; baselines receive whatever
    their ``predict`` accepts (a list of examples) plus ``task``.
    """
    if isinstance(data, TaskData):
        task = data.task
        if len(data) == 0:
            raise ValueError("cannot evaluate on an empty dataset")
        preds = predict(model, data, batch_size) if isinstance(model, TaskModel) \
            else np.asarray(model.predict(data))
        gold = data.targets
        n_classes = data.n_classes
        counts = data.counts
    else:
        examples = list(data)
        if not examples:
            raise ValueError("cannot evaluate on an empty dataset")
        _check_task(task)
        preds = np.asarray(model.predict(examples))
        gold = np.array([ex.target for ex in examples])
        counts = np.array([len(ex.candidates) for ex in examples]) if task == "refres" else None
        n_classes = int(counts.max()) if task == "refres" else N_CLASSES[task]
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (gold, preds), 1)
    correct = int((preds == gold).sum())
    chance = 1.0 / float(np.mean(counts)) if task == "refres" else 1.0 / n_classes
    return EvalResult(task, correct / len(gold), correct, len(gold), confusion.tolist(), chance,
                      preds.tolist())


# -- fine-tuning -------------------------------------------------------------

def config_differences(expected: ModelConfig, actual: ModelConfig) -> list[str]:
    """Dotted paths whose values differ, e.g. ``text.hidden: 32 != 64``."""
    out = []

    def walk(a, b, path):
        if isinstance(a, dict) and isinstance(b, dict):
            for k in sorted(set(a) | set(b)):
                walk(a.get(k), b.get(k), f"{path}.{k}" if path else k)
        elif a != b:
            out.append(f"{path}: expected {a!r}, checkpoint has {b!r}")

    walk(config_to_dict(expected), config_to_dict(actual), "")
    return [d for d in out if not d.startswith("seed")]


def check_compatible(expected: ModelConfig, actual: ModelConfig) -> None:
    diffs = config_differences(expected, actual)
    if diffs:
        raise ConfigMismatchError("checkpoint config mismatch: " + "; ".join(diffs))


def load_task_model(path, task: str, expected: ModelConfig | None = None, head_seed: int | None = None):
    """TaskModel from a pretraining or fine-tuning checkpoint; returns (model, vocab, header).

    Encoder weights always transfer. The head transfers only from a
    checkpoint fine-tuned on the same task; otherwise it is freshly
    initialized.
    """
    header, arrays = read_checkpoint(path)
    cfg = checkpoint_config(header)
    if expected is not None:
        check_compatible(expected, cfg)
    model = TaskModel(cfg, task, head_seed)
    load_weights(model.encoder, arrays, prefix="param.encoder.")
    if header.get("model") == "TaskModel" and header.get("extra", {}).get("task") == task:
        load_weights(model.head, arrays, prefix="param.head.")
    vocab = Vocabulary(header["vocab"]) if header.get("vocab") else None
    return model, vocab, header


def task_step(state: TrainState, batch: TaskBatch) -> float:
    model = state.model
    model.train()
    for p in model.parameters():
        p.grad = None
    logits = model(batch)
    loss = task_loss(logits, batch.targets)
    if not bool(torch.isfinite(loss)):
        culprit = first_nonfinite([(f"param:{k}", p) for k, p in model.named_parameters()]
                                  + [("pixels", batch.pixels), ("logits", logits)])
        raise NonFiniteLossError(f"non-finite loss at step {state.step + 1}; "
                                 f"first non-finite tensor: {culprit}")
    loss.backward()
    state.optimizer.step(state.optimizer.cfg.lr_at(state.step + 1))
    state.step += 1
    value = loss.item()
    state.history.append({"step": state.step, "loss": value})
    return value


def finetune_loop(model: TaskModel, train: TaskData, dev: TaskData | None, steps: int,
                  eval_interval: int, opt_cfg: OptimizerConfig = OptimizerConfig(),
                  batch_size: int = 32, seed: int = 0, metrics_path=None,
                  callback=None) -> tuple[TrainState, list[dict]]:
    """Full-model fine-tuning with evaluation on ``dev`` at step 0 and every ``eval_interval``.

    The trace holds ``steps // eval_interval + 1`` entries (none without ``dev``).
    """
    for d in (train, dev):
        if d is not None and d.task != model.task:
            raise ValueError(f"model head is for {model.task}, data is for {d.task}")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if eval_interval < 1:
        raise ValueError("eval_interval must be >= 1")
    state = TrainState(model, Adam(model, opt_cfg), np.random.default_rng(seed),
                       meta={"task": model.task})
    trace = [] if dev is None else \
        [{"step": 0, "split": "dev", "accuracy": evaluate(model, dev).accuracy}]
    n = len(train)
    for _ in range(steps):
        rows = state.rng.choice(n, size=min(batch_size, n), replace=False)
        task_step(state, train.batch(rows))
        if dev is not None and state.step % eval_interval == 0:
            trace.append({"step": state.step, "split": "dev",
                          "accuracy": evaluate(model, dev).accuracy})
            if callback:
                callback(state, trace[-1])
    if metrics_path is not None:
        write_metrics(trace, metrics_path)
    return state, trace


def write_metrics(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "split", "accuracy"))
        for row in trace:
            w.writerow((row["step"], row["split"], repr(float(row["accuracy"]))))


def write_summary(result: EvalResult, path, **extra) -> None:
    Path(path).write_text(json.dumps({**result.to_dict(), **extra}, indent=2) + "\n")


def save_task_checkpoint(state: TrainState, path, vocab: Vocabulary | None) -> None:
    save_checkpoint(state, path, vocab, extra={"task": state.model.task})
