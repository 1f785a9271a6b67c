"""scikit-learn style wrappers: fit / transform / predict / score, get_params.

These are thin adapters over the functional API for use in notebooks and
sklearn tooling (``clone``, ``get_params``); the CLI does not depend on them.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from essen.config import resolve_config
from essen.data.datasets import corpus_of
from essen.pretraining import OptimizerConfig
from essen.tasks import TaskModel, evaluate, finetune_loop, load_task_model, predict, prepare
from essen.tokenizer import PAD, build_vocab, detokenize, tokenize
from essen.validation import check_examples, check_positive_int, check_targets, check_texts
from essen.wac import crop_features, wac_score, wac_train


class WordPieceVectorizer(TransformerMixin, BaseEstimator):
    """Texts -> padded (n, max_len) id arrays with a vocabulary induced by ``fit``."""

    def __init__(self, vocab_size: int = 320, max_len: int = 24, min_frequency: int = 2):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.min_frequency = min_frequency

    def fit(self, X, y=None):
        texts = check_texts(X)
        check_positive_int(self.max_len, "max_len")
        self.vocab_ = build_vocab(texts, self.vocab_size, self.min_frequency)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "vocab_")
        texts = check_texts(X)
        out = np.full((len(texts), self.max_len), PAD, dtype=np.int64)
        for i, t in enumerate(texts):
            out[i] = tokenize(t, self.vocab_, self.max_len).ids
        return out

    def inverse_transform(self, X) -> list[str]:
        check_is_fitted(self, "vocab_")
        return [detokenize([int(i) for i in row if i != PAD], self.vocab_) for row in np.asarray(X)]


class WACResolver(ClassifierMixin, BaseEstimator):
    """Words-as-classifiers reference resolver over RefResExample lists."""

    def __init__(self, C: float = 1.0, max_iter: int = 1000, feature_fn=crop_features):
        self.C = C
        self.max_iter = max_iter
        self.feature_fn = feature_fn

    def fit(self, X, y=None):
        examples, _ = check_examples(X, "refres")
        check_targets(examples, y)
        self.classifiers_ = wac_train(examples, self.feature_fn, self.C, self.max_iter)
        self.words_ = sorted(self.classifiers_)
        return self

    def predict_proba(self, X):
        """One probability vector per example (a 2-D array when all K agree)."""
        check_is_fitted(self, "classifiers_")
        examples, _ = check_examples(X, "refres")
        probs = [wac_score(self.classifiers_, ex, self.feature_fn) for ex in examples]
        return np.stack(probs) if len({len(p) for p in probs}) == 1 else probs

    def predict(self, X) -> np.ndarray:
        return np.array([int(np.argmax(p)) for p in self.predict_proba(X)])

    def score(self, X, y=None, sample_weight=None) -> float:
        examples, _ = check_examples(X, "refres")
        y = np.array([ex.target for ex in examples]) if y is None else np.asarray(y)
        return float(np.mean(self.predict(examples) == y))


class VisionLanguageClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tunes an encoder plus task head on a list of task examples.

    ``checkpoint`` (a pretraining or fine-tuning checkpoint path) supplies
    weights and vocabulary; without it the encoder starts from random init
    and the vocabulary is induced from the training texts.
    """

    def __init__(self, config="tiny", checkpoint=None, steps: int = 200, batch_size: int = 32,
                 lr: float = 1e-3, warmup_steps: int = 100, seed: int = 0):
        self.config = config
        self.checkpoint = checkpoint
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.seed = seed

    def fit(self, X, y=None):
        examples, task = check_examples(X)
        check_targets(examples, y)
        check_positive_int(self.steps, "steps", allow_zero=True)
        check_positive_int(self.batch_size, "batch_size")
        torch.manual_seed(self.seed)
        if self.checkpoint is not None:
            model, vocab, _ = load_task_model(self.checkpoint, task)
        else:
            cfg = resolve_config(self.config)
            vocab = build_vocab(corpus_of(examples), cfg.text.vocab_size)
            model = TaskModel(cfg, task)
        train = prepare(task, examples, vocab, model.cfg)
        opt = OptimizerConfig(lr=self.lr, warmup_steps=self.warmup_steps)
        self.state_, _ = finetune_loop(model, train, None, self.steps, max(self.steps, 1), opt,
                                       self.batch_size, self.seed)
        self.model_, self.vocab_, self.task_ = model, vocab, task
        n = train.n_classes
        self.classes_ = np.arange(n)
        return self

    def _data(self, X):
        check_is_fitted(self, "model_")
        examples, _ = check_examples(X, self.task_)
        return prepare(self.task_, examples, self.vocab_, self.model_.cfg)

    def predict(self, X) -> np.ndarray:
        return predict(self.model_, self._data(X))

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        data = self._data(X)
        self.model_.eval()
        out = [torch.softmax(self.model_(data.batch(np.arange(s, min(s + 64, len(data))))), -1)
               for s in range(0, len(data), 64)]
        return torch.cat(out).numpy()

    def score(self, X, y=None, sample_weight=None) -> float:
        return evaluate(self.model_, self._data(X)).accuracy
