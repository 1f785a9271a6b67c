"""Masked language modeling + image-text matching pretraining.

Randomness during training comes only from a numpy ``Generator`` held in
:class:`TrainState`; weight init uses a seeded torch generator. Both are
captured by checkpoints, so a resumed run replays the uninterrupted one
bit for bit on the same platform.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from essen.config import ModelConfig, config_from_dict, config_to_dict
from essen.fusion import FusedStates, VisionLanguageEncoder
from essen.tokenizer import CLS, MASK, PAD, SEP, SPECIALS, Vocabulary, batch_tokenize

IGNORE = -100
NON_MASKABLE = (PAD, CLS, SEP)


class NonFiniteLossError(FloatingPointError):
    pass


class EmptyTargetsWarning(UserWarning):
    pass


# -- masking -----------------------------------------------------------------

@dataclass(frozen=True)
class MaskingPolicy:
    ratio: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"masking ratio must be in [0, 1], got {self.ratio}")
        parts = (self.mask_prob, self.random_prob, self.keep_prob)
        if min(parts) < 0 or not math.isclose(sum(parts), 1.0, abs_tol=1e-9):
            raise ValueError(f"mask/random/keep split must be non-negative and sum to 1, got {parts}")


def maskable(ids: np.ndarray, attn_mask: np.ndarray) -> np.ndarray:
    return (attn_mask == 1) & ~np.isin(ids, NON_MASKABLE)


def mask_ids(ids: np.ndarray, attn_mask: np.ndarray, policy: MaskingPolicy,
             rng: np.random.Generator, vocab_size: int):
    """Corrupt a batch of ids; returns (corrupted, targets) with IGNORE off-target."""
    ids = np.asarray(ids)
    attn_mask = np.asarray(attn_mask)
    select = rng.random(ids.shape) < policy.ratio
    action = rng.random(ids.shape)
    random_ids = rng.integers(len(SPECIALS), vocab_size, size=ids.shape)
    select &= maskable(ids, attn_mask)
    corrupted = ids.copy()
    to_mask = select & (action < policy.mask_prob)
    to_random = select & (action >= policy.mask_prob) & (action < policy.mask_prob + policy.random_prob)
    corrupted[to_mask] = MASK
    corrupted[to_random] = random_ids[to_random]
    targets = np.full(ids.shape, IGNORE, dtype=np.int64)
    targets[select] = ids[select]
    return corrupted, targets


def mask_tokens(tokens, policy: MaskingPolicy, rng: np.random.Generator, vocab_size: int):
    """Single-sequence form: returns (corrupted TokenSequence, {position: original id})."""
    from essen.tokenizer import TokenSequence

    corrupted, targets = mask_ids(tokens.ids[None], tokens.attn_mask[None], policy, rng, vocab_size)
    target_map = {int(i): int(targets[0, i]) for i in np.nonzero(targets[0] != IGNORE)[0]}
    return TokenSequence(corrupted[0], tokens.attn_mask.copy()), target_map


# -- ITM pairing -------------------------------------------------------------

def sample_itm_pairs(batch_size: int, mismatch_fraction: float, rng: np.random.Generator):
    """Choose an image for each caption in a batch of matched pairs.

    Returns (image_source, labels): pair i shows image ``image_source[i]``;
    label 1 if that is its own image, else 0. Replacements never pick the
    pair's own image.
    """
    if not 0.0 <= mismatch_fraction <= 1.0:
        raise ValueError("mismatch_fraction must be in [0, 1]")
    if batch_size < 2 and mismatch_fraction > 0:
        raise ValueError("image replacement needs a batch of at least 2 pairs")
    swap = rng.random(batch_size) < mismatch_fraction
    others = rng.integers(0, max(batch_size - 1, 1), size=batch_size)
    source = np.arange(batch_size)
    for i in np.nonzero(swap)[0]:
        j = others[i]
        source[i] = j + 1 if j >= i else j
    return source, (~swap).astype(np.int64)


# -- data --------------------------------------------------------------------

@dataclass
class PretrainData:
    """Pre-tokenized caption pairs, indexable by row."""

    ids: np.ndarray
    attn_mask: np.ndarray
    pixels: np.ndarray  # (N, 3, H, W) float32

    @classmethod
    def from_pairs(cls, pairs, vocab: Vocabulary, max_len: int) -> "PretrainData":
        ids, mask = batch_tokenize([p.text for p in pairs], vocab, max_len)
        pixels = np.stack([p.image for p in pairs]).astype(np.float32)
        return cls(ids, mask, pixels)

    def __len__(self):
        return len(self.ids)


@dataclass
class PretrainBatch:
    ids: torch.Tensor  # corrupted ids
    attn_mask: torch.Tensor
    pixels: torch.Tensor
    itm_labels: torch.Tensor
    mlm_targets: torch.Tensor  # IGNORE except selected positions of matched pairs


def make_batch(data: PretrainData, rng: np.random.Generator, batch_size: int,
               policy: MaskingPolicy, vocab_size: int, mismatch_fraction: float = 0.5) -> PretrainBatch:
    rows = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
    ids, mask = data.ids[rows], data.attn_mask[rows]
    source, labels = sample_itm_pairs(len(rows), mismatch_fraction, rng)
    pixels = data.pixels[rows][source]
    corrupted, targets = mask_ids(ids, mask, policy, rng, vocab_size)
    # MLM only where the caption describes the image it is shown with
    targets[labels == 0] = IGNORE
    return PretrainBatch(torch.from_numpy(corrupted), torch.from_numpy(mask),
                         torch.from_numpy(np.ascontiguousarray(pixels)),
                         torch.from_numpy(labels), torch.from_numpy(targets))


# -- model and losses --------------------------------------------------------

class PretrainingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = VisionLanguageEncoder(cfg)
        d = cfg.width
        self.mlm_head = nn.Linear(d, cfg.text.vocab_size)
        self.itm_head = nn.Linear(d, 2)
        g = torch.Generator().manual_seed(cfg.seed + 1)
        with torch.no_grad():
            for head in (self.mlm_head, self.itm_head):
                nn.init.trunc_normal_(head.weight, std=0.02, a=-0.04, b=0.04, generator=g)
                nn.init.zeros_(head.bias)

    @property
    def cfg(self) -> ModelConfig:
        return self.encoder.cfg

    def forward(self, batch: PretrainBatch) -> FusedStates:
        return self.encoder(batch.ids, batch.attn_mask, batch.pixels)


def mlm_loss(fused: FusedStates, targets: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Mean cross-entropy over target positions; 0 (with a warning) if there are none."""
    sel = targets != IGNORE
    if not bool(sel.any()):
        warnings.warn("no MLM targets in batch; loss defined as 0", EmptyTargetsWarning)
        return fused.text_stream.sum() * 0.0
    logits = head(fused.text_stream[sel])
    return F.cross_entropy(logits, targets[sel])


def itm_loss(fused: FusedStates, labels: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return F.cross_entropy(head(fused.pooled), labels)


def pretrain_losses(model: PretrainingModel, batch: PretrainBatch):
    fused = model(batch)
    return fused, mlm_loss(fused, batch.mlm_targets, model.mlm_head), \
        itm_loss(fused, batch.itm_labels, model.itm_head)


# -- optimizer ---------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 1000
    grad_clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie strictly between 0 and 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive or None")

    def lr_at(self, step: int) -> float:
        """Learning rate for the 1-based update ``step``: linear warmup, then constant."""
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)


class Adam:
    """Adam with bias correction; moments live alongside the parameters."""

    def __init__(self, model: nn.Module, cfg: OptimizerConfig):
        self.cfg = cfg
        self.params = dict(model.named_parameters())
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.t = 0

    @torch.no_grad()
    def step(self, lr: float) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))) if grads else 0.0
        if norm == 0.0:
            return 0.0
        scale = 1.0
        if self.cfg.grad_clip_norm is not None and norm > self.cfg.grad_clip_norm:
            scale = self.cfg.grad_clip_norm / norm
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            g = g * scale
            m, v = self.m[k], self.v[k]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(self.cfg.eps)
            self.params[k].addcdiv_(m / c1, denom, value=-lr)
        return norm


# -- train state -------------------------------------------------------------

@dataclass
class TrainState:
    model: nn.Module
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, model: nn.Module, opt_cfg: OptimizerConfig, seed: int, meta=None) -> "TrainState":
        return cls(model, Adam(model, opt_cfg), np.random.default_rng(seed), meta=dict(meta or {}))


def first_nonfinite(named_tensors) -> str | None:
    for name, t in named_tensors:
        if t is not None and not bool(torch.isfinite(t).all()):
            return name
    return None


def train_step(state: TrainState, batch: PretrainBatch, lambda_mlm: float = 1.0,
               lambda_itm: float = 1.0) -> TrainState:
    model = state.model
    model.train()
    for p in model.parameters():
        p.grad = None
    fused, l_mlm, l_itm = pretrain_losses(model, batch)
    total = lambda_mlm * l_mlm + lambda_itm * l_itm
    if not bool(torch.isfinite(total)):
        culprit = first_nonfinite(
            [(f"param:{k}", p) for k, p in model.named_parameters()]
            + [("pixels", batch.pixels), ("text_stream", fused.text_stream),
               ("vision_stream", fused.vision_stream), ("pooled", fused.pooled),
               ("mlm_loss", l_mlm), ("itm_loss", l_itm)])
        raise NonFiniteLossError(f"non-finite loss at step {state.step + 1}; "
                                 f"first non-finite tensor: {culprit}")
    if total.requires_grad:
        total.backward()
    state.optimizer.step(state.optimizer.cfg.lr_at(state.step + 1))
    state.step += 1
    state.history.append({"step": state.step, "mlm_loss": l_mlm.item(),
                          "itm_loss": l_itm.item(), "total": total.item()})
    return state


LOG_FIELDS = ("step", "mlm_loss", "itm_loss", "total", "wall_ms")


def pretrain(state: TrainState, data: PretrainData, steps: int, batch_size: int = 32,
             policy: MaskingPolicy = MaskingPolicy(), mismatch_fraction: float = 0.5,
             lambda_mlm: float = 1.0, lambda_itm: float = 1.0, log_path=None,
             checkpoint_every: int = 0, checkpoint_dir=None, vocab: Vocabulary | None = None,
             callback=None) -> TrainState:
    """Run ``steps`` pretraining updates, appending one CSV row per step."""
    vocab_size = state.model.cfg.text.vocab_size
    writer = fh = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or state.step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
    try:
        for _ in range(steps):
            t0 = time.perf_counter()
            batch = make_batch(data, state.rng, batch_size, policy, vocab_size, mismatch_fraction)
            train_step(state, batch, lambda_mlm, lambda_itm)
            row = dict(state.history[-1], wall_ms=round((time.perf_counter() - t0) * 1000, 3))
            if writer:
                writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])
            if callback:
                callback(state, row)
            if checkpoint_every and checkpoint_dir and state.step % checkpoint_every == 0:
                save_checkpoint(state, Path(checkpoint_dir) / f"step{state.step:06d}.ckpt", vocab)
    finally:
        if fh:
            fh.close()
    return state


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def read_loss_log(path, with_timing: bool = False) -> list[tuple]:
    """Rows of a training log; the wall-clock column is dropped unless requested."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    keys = LOG_FIELDS if with_timing else LOG_FIELDS[:-1]
    return [tuple(r[k] for k in keys) for r in rows]


# -- checkpoints -------------------------------------------------------------

MAGIC = b"ESSENCK1"


def _arrays(state_or_model) -> list[tuple[str, torch.Tensor]]:
    if isinstance(state_or_model, TrainState):
        model, opt = state_or_model.model, state_or_model.optimizer
    else:
        model, opt = state_or_model, None
    out = [(f"param.{k}", p.detach()) for k, p in model.named_parameters()]
    if opt is not None:
        out += [(f"adam_m.{k}", t) for k, t in opt.m.items()]
        out += [(f"adam_v.{k}", t) for k, t in opt.v.items()]
    return out


def _jsonable_rng(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(state: TrainState, path, vocab: Vocabulary | None = None, extra=None) -> None:
    """Single binary container: magic, u64 header length, JSON header, raw f32 LE arrays."""
    arrays = _arrays(state)
    header = {
        "format": 1,
        "config": config_to_dict(state.model.cfg),
        "model": type(state.model).__name__,
        "meta": state.meta,
        "step": state.step,
        "adam_t": state.optimizer.t,
        "optimizer": vars(state.optimizer.cfg) if hasattr(state.optimizer.cfg, "__dict__")
        else None,
        "rng": _jsonable_rng(state.rng),
        "history": state.history,
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "arrays": [{"name": n, "shape": list(t.shape)} for n, t in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in arrays:
            fh.write(t.to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an essen checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    pos = 16 + n
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(spec["shape"])
        arrays[spec["name"]] = arr.copy()
        pos += 4 * count
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return header, arrays


def checkpoint_config(header: dict) -> ModelConfig:
    return config_from_dict(header["config"])


def load_weights(model: nn.Module, arrays: dict, prefix: str = "param.", strict: bool = True,
                 only=None) -> list[str]:
    """Copy checkpoint arrays into ``model``; returns the names that were loaded."""
    loaded = []
    with torch.no_grad():
        for k, p in model.named_parameters():
            if only is not None and not k.startswith(only):
                continue
            key = prefix + k
            if key not in arrays:
                if strict:
                    raise KeyError(f"checkpoint lacks {k}")
                continue
            src = arrays[key]
            if tuple(src.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {k}: checkpoint {tuple(src.shape)} "
                                 f"vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(src))
            loaded.append(k)
    return loaded


def load_train_state(path, model_factory=None):
    """Rebuild a TrainState (model, moments, rng, history) and its vocabulary."""
    header, arrays = read_checkpoint(path)
    cfg = checkpoint_config(header)
    model = model_factory(cfg, header) if model_factory else PretrainingModel(cfg)
    load_weights(model, arrays)
    opt_cfg = OptimizerConfig(**header["optimizer"])
    opt = Adam(model, opt_cfg)
    opt.t = header["adam_t"]
    with torch.no_grad():
        for k in opt.m:
            opt.m[k].copy_(torch.from_numpy(arrays[f"adam_m.{k}"]))
            opt.v[k].copy_(torch.from_numpy(arrays[f"adam_v.{k}"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    state = TrainState(model, opt, rng, header["step"], list(header["history"]), header["meta"])
    vocab = Vocabulary(header["vocab"]) if header.get("vocab") else None
    return state, vocab, header


# -- gradient check ----------------------------------------------------------

MAX_GRADCHECK_PARAMS = 50_000


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(cfg: ModelConfig, batch: PretrainBatch | None = None, epsilon: float = 1e-5,
               sample: int = 200, seed: int = 0, lambda_mlm: float = 1.0,
               lambda_itm: float = 1.0, perturb_std: float = 0.3) -> float:
    """Max relative error between autograd and central differences, in float64.

    The weights are moved to a random point (init plus N(0, perturb_std)
    noise): at the small default init many true gradients are below the
    ~1e-10 rounding noise of the difference quotient.
    """
    model = PretrainingModel(cfg).double()
    if perturb_std:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * perturb_std)
    n_params = sum(p.numel() for p in model.encoder.parameters())
    if n_params > MAX_GRADCHECK_PARAMS:
        raise ValueError(f"config has {n_params:,} encoder parameters; gradient checking is "
                         f"capped at {MAX_GRADCHECK_PARAMS:,}")
    rng = np.random.default_rng(seed)
    if batch is None:
        batch = random_batch(cfg, rng)
    batch = PretrainBatch(batch.ids, batch.attn_mask, batch.pixels.double(),
                          batch.itm_labels, batch.mlm_targets)

    def loss() -> torch.Tensor:
        _, l_mlm, l_itm = pretrain_losses(model, batch)
        return lambda_mlm * l_mlm + lambda_itm * l_itm

    model.zero_grad()
    loss().backward()
    named = list(model.named_parameters())
    sizes = np.array([p.numel() for _, p in named])
    flat_choices = rng.choice(sizes.sum(), size=min(sample, int(sizes.sum())), replace=False)
    offsets = np.cumsum(sizes) - sizes
    worst = 0.0
    with torch.no_grad():
        for c in flat_choices:
            i = int(np.searchsorted(offsets, c, side="right") - 1)
            _, p = named[i]
            flat = p.view(-1)
            j = int(c - offsets[i])
            analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[j])
            orig = float(flat[j])
            flat[j] = orig + epsilon
            f_plus = float(loss())
            flat[j] = orig - epsilon
            f_minus = float(loss())
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def random_batch(cfg: ModelConfig, rng: np.random.Generator, batch_size: int = 3,
                 policy: MaskingPolicy = MaskingPolicy(ratio=0.5)) -> PretrainBatch:
    """A synthetic batch with ragged padding, for gradient checks and smoke tests."""
    L = cfg.text.max_len
    ids = np.full((batch_size, L), PAD, dtype=np.int64)
    mask = np.zeros((batch_size, L), dtype=np.int64)
    for b in range(batch_size):
        n = int(rng.integers(3, L + 1))
        ids[b, 0], ids[b, n - 1] = CLS, SEP
        ids[b, 1:n - 1] = rng.integers(len(SPECIALS), cfg.text.vocab_size, size=n - 2)
        mask[b, :n] = 1
    corrupted, targets = mask_ids(ids, mask, policy, rng, cfg.text.vocab_size)
    if not (targets != IGNORE).any():
        targets[0, 1] = ids[0, 1]
    s = cfg.image_size
    pixels = rng.random((batch_size, 3, s, s)).astype(np.float32)
    labels = np.arange(batch_size) % 2
    return PretrainBatch(torch.from_numpy(corrupted), torch.from_numpy(mask),
                         torch.from_numpy(pixels), torch.from_numpy(labels),
                         torch.from_numpy(targets))
