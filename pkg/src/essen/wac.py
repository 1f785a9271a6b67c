"""Words-as-classifiers baseline for reference resolution.

Every word seen in training expressions gets its own logistic regressor
over hand-crafted crop features. A candidate's score for an expression is
the mean of its words' classifier probabilities; scores are then
softmax-normalized over the candidates.
"""

from __future__ import annotations

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from essen.tokenizer import split_words

NEUTRAL = 0.5
FOREGROUND_THRESHOLD = 0.95
N_FEATURES = 12


def crop_features(image: np.ndarray, box) -> np.ndarray:
    """Mean RGB, foreground mean RGB, fill fraction, normalized center/size, aspect."""
    x0, y0, x1, y1 = (int(v) for v in box)
    _, h, w = image.shape
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate box {tuple(box)} (zero area)")
    crop = image[:, y0:y1, x0:x1].reshape(3, -1)
    fg = (crop < FOREGROUND_THRESHOLD).any(axis=0)
    fg_rgb = crop[:, fg].mean(axis=1) if fg.any() else np.ones(3, dtype=crop.dtype)
    bw, bh = (x1 - x0) / w, (y1 - y0) / h
    return np.concatenate([
        crop.mean(axis=1), fg_rgb, [fg.mean()],
        [(x0 + x1) / (2 * w), (y0 + y1) / (2 * h), bw, bh, bw / bh],
    ]).astype(np.float64)


def expression_words(text: str) -> list[str]:
    return [w for w in split_words(text.lower()) if w.isalnum()]


def wac_train(dataset, feature_fn=crop_features, C: float = 1.0, max_iter: int = 1000) -> dict:
    """Per-word classifiers: positives are gold crops of expressions with the word.

    Negatives are the other candidates of those same examples. Words that
    never get both classes are left out and score ``NEUTRAL``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("WAC needs a nonempty training set")
    feats, labels = {}, {}
    for ex in dataset:
        words = set(expression_words(ex.expression))
        if not words:
            continue
        X = np.stack([feature_fn(ex.image, box) for box in ex.candidates])
        y = np.zeros(len(ex.candidates), dtype=np.int64)
        y[ex.gold] = 1
        for word in words:
            feats.setdefault(word, []).append(X)
            labels.setdefault(word, []).append(y)
    classifiers = {}
    for word in sorted(feats):
        X, y = np.concatenate(feats[word]), np.concatenate(labels[word])
        if y.min() == y.max():
            continue
        clf = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=max_iter))
        classifiers[word] = clf.fit(X, y)
    return classifiers


def wac_raw_scores(classifiers: dict, example, feature_fn=crop_features) -> np.ndarray:
    """Mean word-classifier probability per candidate (NEUTRAL for unknown words)."""
    words = expression_words(example.expression)
    K = len(example.candidates)
    if not words:
        return np.full(K, NEUTRAL)
    X = np.stack([feature_fn(example.image, box) for box in example.candidates])
    cols = [classifiers[w].predict_proba(X)[:, 1] if w in classifiers else np.full(K, NEUTRAL)
            for w in words]
    return np.mean(cols, axis=0)


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def wac_score(classifiers: dict, example, feature_fn=crop_features) -> np.ndarray:
    return softmax(wac_raw_scores(classifiers, example, feature_fn))
