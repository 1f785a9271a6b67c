import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from essen.data.datasets import build, corpus_of
from essen.estimators import VisionLanguageClassifier, WACResolver, WordPieceVectorizer
from essen.tokenizer import CLS, SEP
from essen.validation import check_examples, check_positive_int, check_targets, check_texts


def test_vectorizer_fit_transform_inverse():
    texts = corpus_of(build("pretrain", 100, 0))
    vec = WordPieceVectorizer(vocab_size=320, max_len=16).fit(texts)
    X = vec.transform(texts[:5])
    assert X.shape == (5, 16) and (X[:, 0] == CLS).all()
    assert all(SEP in row for row in X)
    back = vec.inverse_transform(X)
    np.testing.assert_array_equal(vec.transform(back), X)
    assert clone(vec).get_params() == vec.get_params()


def test_vectorizer_input_checks():
    vec = WordPieceVectorizer()
    with pytest.raises(NotFittedError):
        vec.transform(["a"])
    with pytest.raises(TypeError):
        vec.fit("a single string")
    with pytest.raises(TypeError):
        vec.fit(["ok", 3])


def test_wac_resolver():
    kw = dict(attributes=("color", "shape", "size"), max_attributes=1)
    train, test = build("refres", 200, 4, **kw), build("refres", 60, 4, start=200, **kw)
    est = WACResolver().fit(train)
    proba = est.predict_proba(test)
    assert proba.shape == (60, 5)
    np.testing.assert_allclose(proba.sum(1), 1.0)
    assert est.score(test) > 0.7
    assert "red" in est.words_


def test_classifier_fit_predict_score():
    exs = build("entail", 60, 2)
    est = VisionLanguageClassifier(steps=3, batch_size=8)
    est.fit(exs)
    pred = est.predict(exs)
    assert pred.shape == (60,) and set(pred) <= {0, 1, 2}
    proba = est.predict_proba(exs[:7])
    assert proba.shape == (7, 3)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-6)
    assert 0.0 <= est.score(exs) <= 1.0
    np.testing.assert_array_equal(est.classes_, [0, 1, 2])


def test_classifier_rejects_mixed_or_wrong_task():
    est = VisionLanguageClassifier(steps=1)
    mixed = build("entail", 2, 0) + build("pairjudge", 2, 0)
    with pytest.raises(ValueError):
        est.fit(mixed)
    est.fit(build("entail", 10, 0))
    with pytest.raises(ValueError):
        est.predict(build("refres", 2, 0))


def test_validation_helpers():
    assert check_positive_int(3, "n") == 3
    assert check_positive_int(0, "n", allow_zero=True) == 0
    for bad in (0, -1):
        with pytest.raises(ValueError):
            check_positive_int(bad, "n")
    for bad in (1.5, True, "2"):
        with pytest.raises(TypeError):
            check_positive_int(bad, "n")
    assert check_texts(("a", "b")) == ["a", "b"]
    exs = build("entail", 3, 0)
    assert check_examples(exs)[1] == "entail"
    with pytest.raises(ValueError):
        check_examples([])
    with pytest.raises(TypeError):
        check_examples([object()])
    check_targets(exs, [ex.target for ex in exs])
    with pytest.raises(ValueError):
        check_targets(exs, [0])
    with pytest.raises(ValueError):
        check_targets(exs, [(ex.target + 1) % 3 for ex in exs])
