"""Word-piece vocabulary induction and greedy longest-match tokenization."""

from __future__ import annotations

import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
CONT = "##"
# every ASCII code point, as a word-initial piece and as a continuation piece
BASE_CHARS = tuple(chr(i) for i in range(128))
MIN_VOCAB = 300
# stands in for [UNK] when detokenizing; itself non-ASCII, so it maps back to [UNK]
UNK_CHAR = "�"


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("specials must occupy ids 0-4")
        self.index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.index:
                raise ValueError(f"duplicate token {tok!r}")
            self.index[tok] = i
        missing = [c for c in string.printable if c not in self.index]
        if missing:
            raise ValueError(f"vocabulary lacks single-character pieces for {missing!r}")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path) -> None:
        lines = [_escape(t) for t in self.tokens]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls([_unescape(line) for line in lines])


def _escape(tok: str) -> str:
    # control characters would break the one-token-per-line format
    return "".join(f"\\x{ord(c):02x}" if ord(c) < 32 or c == "\\" or ord(c) == 127 else c
                   for c in tok)


def _unescape(line: str) -> str:
    out, i = [], 0
    while i < len(line):
        if line[i] == "\\" and line[i + 1:i + 2] == "x":
            out.append(chr(int(line[i + 2:i + 4], 16)))
            i += 4
        else:
            out.append(line[i])
            i += 1
    return "".join(out)


def _is_punct(ch: str) -> bool:
    if ch.isascii():
        return ch in string.punctuation
    return unicodedata.category(ch).startswith("P")


def split_words(text: str) -> list[str]:
    """Lowercase, split on whitespace, and isolate punctuation characters."""
    words = []
    for chunk in text.lower().split():
        cur = []
        for ch in chunk:
            if _is_punct(ch):
                if cur:
                    words.append("".join(cur))
                    cur = []
                words.append(ch)
            else:
                cur.append(ch)
        if cur:
            words.append("".join(cur))
    return words


def build_vocab(corpus, size: int, min_frequency: int = 2) -> Vocabulary:
    """Induce a word-piece vocabulary of at most ``size`` entries.

    Layout: specials, single characters (initial then ``##`` forms), whole
    words with count >= ``min_frequency`` by descending count, then
    ``##`` suffix pieces by descending count-weighted frequency. Ties are
    broken by first appearance in the corpus, so the result is a pure
    function of (corpus order, size).
    """
    if size < MIN_VOCAB:
        raise ValueError(f"vocabulary size must be >= {MIN_VOCAB}, got {size}")
    words: Counter = Counter()
    first_seen: dict[str, int] = {}
    n_lines = 0
    for line in corpus:
        n_lines += 1
        for w in split_words(line):
            if not w.isascii():
                continue
            words[w] += 1
            first_seen.setdefault(w, len(first_seen))
    if n_lines == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    tokens = list(SPECIALS) + list(BASE_CHARS) + [CONT + c for c in BASE_CHARS]
    seen = set(tokens)
    budget = size - len(tokens)

    ranked_words = sorted((w for w, n in words.items() if n >= min_frequency),
                          key=lambda w: (-words[w], first_seen[w]))
    for w in ranked_words:
        if budget <= 0:
            break
        if w not in seen:
            tokens.append(w)
            seen.add(w)
            budget -= 1

    suffixes: Counter = Counter()
    suffix_first: dict[str, int] = {}
    for w in sorted(words, key=first_seen.__getitem__):
        for i in range(1, len(w) - 1):
            piece = CONT + w[i:]
            suffixes[piece] += words[w]
            suffix_first.setdefault(piece, len(suffix_first))
    ranked_suffixes = sorted((p for p, n in suffixes.items() if n >= min_frequency),
                             key=lambda p: (-suffixes[p], suffix_first[p]))
    for piece in ranked_suffixes:
        if budget <= 0:
            break
        if piece not in seen:
            tokens.append(piece)
            seen.add(piece)
            budget -= 1
    return Vocabulary(tokens)


def wordpiece(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match segmentation of one word; non-ASCII chars become [UNK]."""
    ids = []
    start = 0
    while start < len(word):
        if not word[start].isascii():
            ids.append(UNK)
            start += 1
            continue
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONT + piece
            if piece in vocab.index:
                match = vocab.index[piece]
                break
            end -= 1
        # single ASCII characters are always in the vocabulary
        ids.append(match)
        start = end
    return ids


@dataclass
class TokenSequence:
    ids: np.ndarray
    attn_mask: np.ndarray

    @property
    def n_real(self) -> int:
        return int(self.attn_mask.sum())


def tokenize_ids(text: str, vocab: Vocabulary) -> list[int]:
    ids = []
    for w in split_words(text):
        ids.extend(wordpiece(w, vocab))
    return ids


def tokenize(text: str, vocab: Vocabulary, max_len: int, pad: bool = True) -> TokenSequence:
    """Frame as [CLS] ... [SEP], truncating the body to fit, then pad to ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    body = tokenize_ids(text, vocab)[:max_len - 2]
    ids = [CLS] + body + [SEP]
    mask = [1] * len(ids)
    if pad:
        ids += [PAD] * (max_len - len(ids))
        mask += [0] * (max_len - len(mask))
    return TokenSequence(np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=np.int64))


def detokenize(seq, vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize` up to normalization.

    ``##`` pieces and [UNK] glue to the previous piece; specials other than
    [UNK] are dropped.
    """
    ids = seq.ids[seq.attn_mask.astype(bool)] if isinstance(seq, TokenSequence) else seq
    out: list[str] = []
    for i in ids:
        i = int(i)
        if i == UNK:
            if out:
                out[-1] += UNK_CHAR
            else:
                out.append(UNK_CHAR)
            continue
        if i < len(SPECIALS):
            continue
        tok = vocab.tokens[i]
        if tok.startswith(CONT) and len(tok) > len(CONT) and out:
            out[-1] += tok[len(CONT):]
        else:
            out.append(tok)
    return " ".join(out)


def batch_tokenize(texts, vocab: Vocabulary, max_len: int):
    seqs = [tokenize(t, vocab, max_len) for t in texts]
    ids = np.stack([s.ids for s in seqs]) if seqs else np.zeros((0, max_len), np.int64)
    mask = np.stack([s.attn_mask for s in seqs]) if seqs else np.zeros((0, max_len), np.int64)
    return ids, mask
