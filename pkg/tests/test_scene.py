import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from essen.data.scene import (
    BACKGROUND,
    RGB,
    Scene,
    SceneObject,
    crop_resize,
    decode_ppm,
    encode_ppm,
    gen_scene,
    object_mask,
    read_ppm,
    render,
    render_ppm,
    resize,
    write_ppm,
)


def test_exact_object_count():
    for seed in range(20):
        assert len(gen_scene(np.random.default_rng(seed), 32, (2, 2))) == 2


def test_same_seed_same_scene():
    a = gen_scene(np.random.default_rng(7), 48, (2, 4))
    b = gen_scene(np.random.default_rng(7), 48, (2, 4))
    assert a.objects == b.objects


@given(st.integers(0, 10_000), st.sampled_from([32, 48, 64]), st.integers(2, 5))
def test_objects_do_not_touch(seed, canvas, n):
    try:
        scene = gen_scene(np.random.default_rng(seed), canvas, (2, n))
    except RuntimeError:
        return
    for a, b in itertools.combinations(scene.objects, 2):
        assert np.hypot(a.cx - b.cx, a.cy - b.cy) > a.radius + b.radius
        assert not (object_mask(a, canvas) & object_mask(b, canvas)).any()
    for o in scene.objects:
        x0, y0, x1, y1 = o.box
        assert 0 <= x0 and 0 <= y0 and x1 <= canvas and y1 <= canvas


def test_invalid_scene_arguments():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        gen_scene(rng, 16)
    with pytest.raises(ValueError):
        gen_scene(rng, 32, (1, 3))
    with pytest.raises(RuntimeError):
        gen_scene(rng, 32, (16, 16))


def test_render_colors_and_background():
    obj = SceneObject("circle", "red", "large", 10, 10, 5)
    tri = SceneObject("triangle", "blue", "large", 24, 24, 5)
    img = render(Scene([obj, tri], 32))
    assert tuple(img[10, 10]) == RGB["red"]
    assert tuple(img[24, 24]) == RGB["blue"]
    assert tuple(img[0, 31]) == BACKGROUND


def test_ppm_length_law():
    scene = gen_scene(np.random.default_rng(0), 48)
    tensor, data = render_ppm(scene)
    header = b"P6\n48 48\n255\n"
    assert data.startswith(header) and len(data) == len(header) + 3 * 48 * 48
    assert tensor.shape == (3, 48, 48) and tensor.dtype == np.float32


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_ppm_round_trip(h, w, seed):
    rgb = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    data = encode_ppm(rgb)
    back = decode_ppm(data)
    np.testing.assert_array_equal(back, rgb)
    assert encode_ppm(back) == data


def test_ppm_header_comments_and_errors(tmp_path):
    rgb = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    commented = b"P6\n# made by hand\n2 2\n255\n" + rgb.tobytes()
    np.testing.assert_array_equal(decode_ppm(commented), rgb)
    for bad in (b"P3\n2 2\n255\n" + rgb.tobytes(), b"P6\n2 2\n65535\n", b"P6\n2 2\n255\n\x00"):
        with pytest.raises(ValueError):
            decode_ppm(bad)
    write_ppm(tmp_path / "x.ppm", rgb)
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), rgb)


def test_resize_and_crop():
    img = np.random.default_rng(0).random((3, 48, 48)).astype(np.float32)
    assert resize(img, 32).shape == (3, 32, 32)
    np.testing.assert_array_equal(resize(img, 48), img)
    assert crop_resize(img, (0, 0, 10, 12), 16).shape == (3, 16, 16)
    with pytest.raises(ValueError):
        crop_resize(img, (5, 5, 5, 9), 16)
    with pytest.raises(ValueError):
        crop_resize(img, (40, 40, 50, 50), 16)
