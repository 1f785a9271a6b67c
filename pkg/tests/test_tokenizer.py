import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from essen.data.datasets import build, corpus_of
from essen.tokenizer import (
    CLS,
    PAD,
    SEP,
    SPECIALS,
    UNK,
    Vocabulary,
    batch_tokenize,
    build_vocab,
    detokenize,
    split_words,
    tokenize,
    tokenize_ids,
)


@pytest.fixture(scope="module")
def captions():
    return corpus_of(build("pretrain", 300, 0))


@pytest.fixture(scope="module")
def vocab(captions):
    return build_vocab(captions, 1000)


def test_shape_world_vocab_contents(vocab):
    for tok in ("red", "circle", "##s"):
        assert tok in vocab


def test_size_305_leaves_44_learned_pieces(captions):
    v = build_vocab(captions, 305)
    assert len(v) == 305
    assert v.tokens[:5] == list(SPECIALS)
    base = 5 + 2 * 128
    learned = v.tokens[base:]
    assert len(learned) == 44
    assert all(len(t) > 1 and t != "##" for t in learned)


def test_vocab_deterministic(captions):
    assert build_vocab(captions, 400).tokens == build_vocab(captions, 400).tokens


def test_vocab_rejects_small_size_and_empty_corpus(captions):
    with pytest.raises(ValueError):
        build_vocab(captions, 299)
    with pytest.raises(ValueError):
        build_vocab([], 400)


def test_empty_text_framing(vocab):
    seq = tokenize("", vocab, 6)
    assert seq.ids.tolist() == [CLS, SEP, PAD, PAD, PAD, PAD]
    assert seq.attn_mask.tolist() == [1, 1, 0, 0, 0, 0]


def test_known_words_are_single_pieces(vocab):
    seq = tokenize("a red circle", vocab, 8)
    assert seq.n_real == 5
    assert seq.ids[:5].tolist() == [CLS, vocab.id("a"), vocab.id("red"), vocab.id("circle"), SEP]


def test_truncation_keeps_sep(vocab):
    seq = tokenize("a red circle " * 10, vocab, 6)
    assert seq.n_real == 6 and seq.ids[-1] == SEP


def test_non_ascii_becomes_unk(vocab):
    assert UNK in tokenize_ids("café", vocab)


def test_split_words_isolates_punctuation():
    assert split_words("Red, circle!") == ["red", ",", "circle", "!"]


def test_vocab_file_round_trip(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").tokens == vocab.tokens


def test_batch_tokenize_shapes(vocab):
    ids, mask = batch_tokenize(["a", "red circle"], vocab, 7)
    assert ids.shape == mask.shape == (2, 7)
    empty_ids, _ = batch_tokenize([], vocab, 7)
    assert empty_ids.shape == (0, 7)


@given(st.text(max_size=40))
def test_tokenize_detokenize_idempotent(vocab, text):
    once = tokenize(text, vocab, 64)
    again = tokenize(detokenize(once, vocab), vocab, 64)
    np.testing.assert_array_equal(once.ids, again.ids)
    np.testing.assert_array_equal(once.attn_mask, again.attn_mask)


@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=30))
def test_ascii_never_unknown(vocab, text):
    assert UNK not in tokenize_ids(text, vocab)
