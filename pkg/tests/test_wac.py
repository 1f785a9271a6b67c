import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from essen.data.datasets import RefResExample, build
from essen.data.scene import Scene, SceneObject, render, to_tensor
from essen.wac import N_FEATURES, crop_features, wac_raw_scores, wac_score, wac_train


@pytest.fixture(scope="module")
def trained():
    kw = dict(attributes=("color", "shape", "size"), max_attributes=1)
    return wac_train(build("refres", 300, 11, **kw)), build("refres", 100, 11, start=300, **kw)


def test_features_shape_and_color():
    obj = SceneObject("square", "red", "large", 20, 20, 7)
    img = to_tensor(render(Scene([obj], 48)))
    f = crop_features(img, obj.box)
    assert f.shape == (N_FEATURES,)
    np.testing.assert_allclose(f[3:6], np.array([220, 40, 40]) / 255, atol=1e-5)
    assert f[6] == pytest.approx(1.0)  # a square fills its box
    with pytest.raises(ValueError):
        crop_features(img, (5, 5, 5, 9))


def test_red_circle_among_blue_squares(trained):
    clf, _ = trained
    objs = [SceneObject("square", "blue", "small", 8, 8, 4),
            SceneObject("circle", "red", "small", 30, 10, 4),
            SceneObject("square", "blue", "small", 10, 34, 4),
            SceneObject("square", "blue", "small", 36, 36, 4)]
    img = to_tensor(render(Scene(objs, 48)))
    ex = RefResExample(img, [list(o.box) for o in objs], "the red circle", 1)
    assert int(np.argmax(wac_score(clf, ex))) == 1


def test_held_out_accuracy(trained):
    clf, test = trained
    acc = np.mean([np.argmax(wac_score(clf, ex)) == ex.gold for ex in test])
    assert acc > 0.8


def test_empty_and_unknown_expressions_uniform(trained):
    clf, test = trained
    ex = test[0]
    for text in ("", "zebra ostrich"):
        probs = wac_score(clf, RefResExample(ex.image, ex.candidates, text, 0))
        np.testing.assert_allclose(probs, np.full(len(ex.candidates), 1 / len(ex.candidates)))


@given(st.floats(0.01, 100))
def test_argmax_invariant_to_rescaling(trained, c):
    clf, test = trained
    raw = wac_raw_scores(clf, test[1])
    assert np.argmax(raw) == np.argmax(raw * c)


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        wac_train([])
