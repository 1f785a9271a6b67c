import math
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from essen.config import get_preset
from essen.fusion import FusedStates
from essen.pretraining import (
    IGNORE,
    MAGIC,
    Adam,
    EmptyTargetsWarning,
    MaskingPolicy,
    NonFiniteLossError,
    OptimizerConfig,
    PretrainBatch,
    PretrainData,
    PretrainingModel,
    TrainState,
    grad_check,
    itm_loss,
    load_train_state,
    make_batch,
    mask_ids,
    mask_tokens,
    mlm_loss,
    pretrain,
    random_batch,
    read_checkpoint,
    read_loss_log,
    sample_itm_pairs,
    save_checkpoint,
    train_step,
)
from essen.tokenizer import CLS, MASK, PAD, SEP, TokenSequence

V = 320


def fused(text, pooled=None):
    pooled = torch.zeros(text.shape[0], text.shape[-1]) if pooled is None else pooled
    return FusedStates(text, torch.zeros(text.shape[0], 1, text.shape[-1]), pooled,
                       torch.ones(text.shape[:2]))


def zero_head(d, n):
    head = torch.nn.Linear(d, n)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    return head


# --- masking


def sequence(n_real, length):
    ids = np.full(length, PAD)
    ids[0], ids[n_real - 1] = CLS, SEP
    ids[1:n_real - 1] = np.arange(10, 10 + n_real - 2)
    mask = (np.arange(length) < n_real).astype(np.int64)
    return TokenSequence(ids, mask)


def test_ratio_zero_is_identity(rng):
    seq = sequence(8, 12)
    out, targets = mask_tokens(seq, MaskingPolicy(ratio=0.0), rng, V)
    np.testing.assert_array_equal(out.ids, seq.ids)
    assert targets == {}


def test_ratio_one_masks_every_maskable(rng):
    seq = sequence(8, 12)
    out, targets = mask_tokens(seq, MaskingPolicy(1.0, 1.0, 0.0, 0.0), rng, V)
    assert sorted(targets) == list(range(1, 7))
    assert all(out.ids[i] == MASK for i in range(1, 7))
    assert out.ids[0] == CLS and out.ids[7] == SEP and (out.ids[8:] == PAD).all()


def test_selection_count_within_binomial_bounds(rng):
    n = 10_000
    ids = rng.integers(5, V, size=(100, 100))
    _, targets = mask_ids(ids, np.ones_like(ids), MaskingPolicy(), rng, V)
    sigma = math.sqrt(n * 0.15 * 0.85)
    assert abs((targets != IGNORE).sum() - 1500) <= 3 * sigma


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_specials_never_selected(seed, ratio):
    g = np.random.default_rng(seed)
    ids = g.integers(0, 12, size=(6, 10))
    mask = (g.random((6, 10)) < 0.8).astype(np.int64)
    corrupted, targets = mask_ids(ids, mask, MaskingPolicy(ratio=ratio), g, V)
    protected = np.isin(ids, (PAD, CLS, SEP)) | (mask == 0)
    assert (targets[protected] == IGNORE).all()
    np.testing.assert_array_equal(corrupted[protected], ids[protected])
    sel = targets != IGNORE
    np.testing.assert_array_equal(targets[sel], ids[sel])
    # random replacements never produce a special id
    changed = sel & (corrupted != MASK) & (corrupted != ids)
    assert (corrupted[changed] >= 5).all()


def test_split_proportions(rng):
    ids = rng.integers(5, V, size=(200, 100))
    corrupted, targets = mask_ids(ids, np.ones_like(ids), MaskingPolicy(ratio=1.0), rng, V)
    n = ids.size
    frac_mask = (corrupted == MASK).mean()
    assert abs(frac_mask - 0.8) < 3 * math.sqrt(0.8 * 0.2 / n)


def test_bad_policies():
    with pytest.raises(ValueError):
        MaskingPolicy(ratio=1.5)
    with pytest.raises(ValueError):
        MaskingPolicy(0.15, 0.5, 0.2, 0.2)


# --- ITM pairing


def test_no_mismatch_all_positive(rng):
    source, labels = sample_itm_pairs(16, 0.0, rng)
    assert (labels == 1).all() and (source == np.arange(16)).all()


def test_mismatch_count_and_derangement(rng):
    source, labels = sample_itm_pairs(10_000, 0.5, rng)
    assert abs((labels == 0).sum() - 5000) <= 3 * math.sqrt(10_000 * 0.25)
    neg = labels == 0
    assert (source[neg] != np.arange(10_000)[neg]).all()
    assert (source[~neg] == np.arange(10_000)[~neg]).all()


def test_single_pair_cannot_be_mismatched(rng):
    with pytest.raises(ValueError):
        sample_itm_pairs(1, 0.5, rng)


def test_make_batch_drops_mlm_on_mismatched(small_world, rng):
    cfg = get_preset("tiny")
    data = PretrainData.from_pairs(small_world.pretrain, small_world.vocab, cfg.text.max_len)
    batch = make_batch(data, rng, 32, MaskingPolicy(), V)
    neg = batch.itm_labels == 0
    assert (batch.mlm_targets[neg] == IGNORE).all()
    assert batch.pixels.shape == (32, 3, 32, 32)


# --- losses


def test_zero_heads_give_uniform_losses():
    text = torch.randn(4, 6, 16)
    targets = torch.full((4, 6), IGNORE)
    targets[:, 2] = torch.tensor([7, 8, 9, 10])
    assert abs(mlm_loss(fused(text), targets, zero_head(16, V)).item() - math.log(V)) < 1e-5
    labels = torch.tensor([0, 1, 1, 0])
    assert abs(itm_loss(fused(text, torch.randn(4, 16)), labels, zero_head(16, 2)).item()
               - math.log(2)) < 1e-5


def test_saturated_logits_give_zero_loss():
    head = zero_head(2, 2)
    with torch.no_grad():
        head.weight.copy_(torch.eye(2) * 1e6)
    pooled = torch.tensor([[1.0, -1.0]])
    assert itm_loss(fused(torch.zeros(1, 1, 2), pooled), torch.tensor([0]), head).item() < 1e-6
    text = torch.zeros(1, 2, 2)
    text[0, 1] = torch.tensor([0.0, 1.0])
    targets = torch.tensor([[IGNORE, 1]])
    assert mlm_loss(fused(text), targets, head).item() < 1e-6


def test_empty_targets_warn_and_return_zero():
    with pytest.warns(EmptyTargetsWarning):
        loss = mlm_loss(fused(torch.randn(2, 3, 4)), torch.full((2, 3), IGNORE), zero_head(4, V))
    assert loss.item() == 0.0


def test_mlm_overfits_a_fixed_batch(small_world, rng):
    torch.manual_seed(0)
    cfg = get_preset("tiny")
    data = PretrainData.from_pairs(small_world.pretrain[:32], small_world.vocab, cfg.text.max_len)
    batch = make_batch(data, rng, 32, MaskingPolicy(), V, mismatch_fraction=0.0)
    state = TrainState.create(PretrainingModel(cfg), OptimizerConfig(lr=3e-3, warmup_steps=10), 0)
    for _ in range(200):
        train_step(state, batch, lambda_itm=0.0)
    assert state.history[-1]["mlm_loss"] < 0.1


# --- optimizer and steps


def test_warmup_schedule():
    cfg = OptimizerConfig(lr=1e-3, warmup_steps=100)
    assert cfg.lr_at(1) == pytest.approx(1e-5)
    assert cfg.lr_at(50) == pytest.approx(5e-4)
    assert cfg.lr_at(100) == cfg.lr_at(5000) == 1e-3
    assert OptimizerConfig(warmup_steps=0).lr_at(1) == 1e-4


def test_adam_matches_reference_implementation():
    torch.manual_seed(0)
    model = torch.nn.Linear(3, 2)
    ref = torch.nn.Linear(3, 2)
    ref.load_state_dict(model.state_dict())
    ours = Adam(model, OptimizerConfig(lr=1e-2, grad_clip_norm=None))
    theirs = torch.optim.Adam(ref.parameters(), lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    x = torch.randn(8, 3)
    for _ in range(5):
        for m in (model, ref):
            m.zero_grad()
            m(x).pow(2).sum().backward()
        ours.step(1e-2)
        theirs.step()
    for a, b in zip(model.parameters(), ref.parameters()):
        torch.testing.assert_close(a, b, atol=1e-6, rtol=1e-5)


def test_clipping_bounds_update_norm():
    model = torch.nn.Linear(2, 1, bias=False)
    model.weight.grad = torch.tensor([[300.0, 400.0]])
    opt = Adam(model, OptimizerConfig(lr=1.0, grad_clip_norm=1.0))
    assert opt.step(1.0) == pytest.approx(500.0)
    torch.testing.assert_close(opt.m["weight"], torch.tensor([[0.06, 0.08]]))


def test_zero_weights_leave_params_unchanged(rng):
    cfg = get_preset("gradcheck-two-tower")
    state = TrainState.create(PretrainingModel(cfg), OptimizerConfig(), 0)
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    train_step(state, random_batch(cfg, rng), 0.0, 0.0)
    assert state.step == 1
    assert all(torch.equal(before[k], v) for k, v in state.model.state_dict().items())


def test_nonfinite_loss_names_tensor(rng):
    cfg = get_preset("gradcheck-two-tower")
    state = TrainState.create(PretrainingModel(cfg), OptimizerConfig(), 0)
    with torch.no_grad():
        state.model.encoder.pooler.dense.weight[0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError, match="pooler.dense.weight"):
        train_step(state, random_batch(cfg, rng))


# --- determinism, logs, checkpoints


def run(world, steps, log_path, seed=3, state=None):
    cfg = get_preset("tiny")
    data = PretrainData.from_pairs(world.pretrain, world.vocab, cfg.text.max_len)
    if state is None:
        torch.manual_seed(seed)
        state = TrainState.create(PretrainingModel(cfg), OptimizerConfig(1e-3, warmup_steps=5), seed)
    return pretrain(state, data, steps, 8, log_path=log_path, vocab=world.vocab)


def test_identical_seeds_identical_logs(small_world, tmp_path):
    run(small_world, 6, tmp_path / "a.csv")
    run(small_world, 6, tmp_path / "b.csv")
    a = read_loss_log(tmp_path / "a.csv")
    assert a == read_loss_log(tmp_path / "b.csv") and len(a) == 6
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "step,mlm_loss,itm_loss,total,wall_ms"


@pytest.mark.filterwarnings("ignore::essen.pretraining.EmptyTargetsWarning")
def test_resume_matches_uninterrupted(small_world, tmp_path):
    full = run(small_world, 14, tmp_path / "full.csv")
    part = run(small_world, 4, tmp_path / "part.csv")
    save_checkpoint(part, tmp_path / "k.ckpt", small_world.vocab)
    state, vocab, _ = load_train_state(tmp_path / "k.ckpt")
    assert vocab.tokens == small_world.vocab.tokens
    run(small_world, 10, tmp_path / "part.csv", state=state)
    assert read_loss_log(tmp_path / "part.csv") == read_loss_log(tmp_path / "full.csv")
    assert state.history == full.history


def test_checkpoint_layout_and_round_trip(tmp_path, rng):
    cfg = get_preset("gradcheck-two-tower")
    state = TrainState.create(PretrainingModel(cfg), OptimizerConfig(), 0, meta={"k": 1})
    train_step(state, random_batch(cfg, rng))
    save_checkpoint(state, tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    header, arrays = read_checkpoint(tmp_path / "c.ckpt")
    names = [a["name"] for a in header["arrays"]]
    n = len(list(state.model.parameters()))
    assert all(x.startswith("param.") for x in names[:n])
    assert all(x.startswith("adam_m.") for x in names[n:2 * n])
    assert header["step"] == 1 and header["adam_t"] == 1 and header["meta"] == {"k": 1}
    back, vocab, _ = load_train_state(tmp_path / "c.ckpt")
    assert vocab is None
    for (k, a), (_, b) in zip(state.model.named_parameters(), back.model.named_parameters()):
        assert torch.equal(a, b), k
    save_checkpoint(back, tmp_path / "d.ckpt")
    assert (tmp_path / "d.ckpt").read_bytes() == raw


def test_corrupt_checkpoints_rejected(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTMAGIC" + bytes(8))
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "x.ckpt")


# --- gradient check


@pytest.mark.parametrize("preset", ["gradcheck-two-tower", "gradcheck-one-tower", "gradcheck-cnn"])
def test_grad_check_passes(preset):
    assert grad_check(get_preset(preset), sample=60) < 1e-4


def test_grad_check_refuses_large_configs():
    with pytest.raises(ValueError, match="capped"):
        grad_check(get_preset("two-tower-33m-analog"), sample=1)


def test_independent_parameter_has_zero_gradient(rng):
    """With every pair matched, the last fusion layer's vision stream cannot affect the loss."""
    cfg = get_preset("gradcheck-two-tower")
    model = PretrainingModel(cfg).double()
    b = random_batch(cfg, rng)
    batch = PretrainBatch(b.ids, b.attn_mask, b.pixels.double(), torch.ones_like(b.itm_labels),
                          b.mlm_targets)
    from essen.pretraining import pretrain_losses

    _, l_mlm, l_itm = pretrain_losses(model, batch)
    (l_mlm + l_itm).backward()
    p = model.encoder.fusion.layers[0].vision.ffn.up.weight
    assert p.grad is None or not p.grad.any()
    with torch.no_grad():
        base = sum(x.item() for x in pretrain_losses(model, batch)[1:])
        p.add_(1e-3)
        moved = sum(x.item() for x in pretrain_losses(model, batch)[1:])
    assert moved == base
