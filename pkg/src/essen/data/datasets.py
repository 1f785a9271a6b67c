"""Task examples, deterministic dataset builders, and on-disk splits.

Every example is a pure function of (seed, task, index): each index gets
its own generator, so builders can fan out over worker processes and
still emit the same bytes in the same order.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from essen.data import language
from essen.data.language import ENTAIL_LABELS, GrammarError
from essen.data.manifest import ManifestRecord, read_manifest, write_manifest
from essen.data.scene import (
    Scene,
    SceneError,
    decode_ppm,
    encode_ppm,
    gen_scene,
    render,
    to_tensor,
)

TASK_CODES = {"pretrain": 0, "entail": 1, "pairjudge": 2, "refres": 3}
SPLITS = ("train", "dev", "test")


@dataclass
class CaptionPair:
    image: np.ndarray
    text: str
    id: str = ""
    scene: Scene | None = field(default=None, repr=False)


@dataclass
class EntailExample:
    image: np.ndarray
    hypothesis: str
    label: str
    id: str = ""
    scene: Scene | None = field(default=None, repr=False)

    @property
    def target(self) -> int:
        return ENTAIL_LABELS.index(self.label)


@dataclass
class PairJudgeExample:
    image_a: np.ndarray
    image_b: np.ndarray
    statement: str
    label: bool
    id: str = ""
    scenes: tuple | None = field(default=None, repr=False)

    @property
    def target(self) -> int:
        return int(self.label)


@dataclass
class RefResExample:
    image: np.ndarray
    candidates: list
    expression: str
    gold: int
    id: str = ""
    scene: Scene | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError("reference resolution needs at least two candidates")
        _, h, w = self.image.shape
        for box in self.candidates:
            x0, y0, x1, y1 = box
            if not (0 <= x0 and 0 <= y0 and x1 <= w and y1 <= h):
                raise ValueError(f"candidate box {tuple(box)} outside the {w}x{h} image")
        if not 0 <= self.gold < len(self.candidates):
            raise ValueError(f"gold index {self.gold} out of range")

    @property
    def target(self) -> int:
        return self.gold


def example_rng(seed: int, task: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, TASK_CODES[task], index])


def example_id(task: str, index: int) -> str:
    return f"{task}-{index:06d}"


def split_of(example_id: str, fractions=(0.8, 0.1, 0.1)) -> str:
    """Stable train/dev/test assignment by id hash (not by position)."""
    bucket = int.from_bytes(hashlib.sha256(example_id.encode("utf-8")).digest()[:8], "big") % 1000
    edge = 0.0
    for name, frac in zip(SPLITS, fractions):
        edge += frac * 1000
        if bucket < edge:
            return name
    return SPLITS[-1]


# -- per-index generators ----------------------------------------------------

def sample_scene(rng, canvas, count_range, tries: int = 100) -> Scene:
    """gen_scene, resampling crowded layouts."""
    for _ in range(tries - 1):
        try:
            return gen_scene(rng, canvas, count_range)
        except SceneError:
            continue
    return gen_scene(rng, canvas, count_range)


def make_pretrain(index: int, seed: int, canvas: int = 32, count_range=(2, 4)) -> CaptionPair:
    rng = example_rng(seed, "pretrain", index)
    scene = sample_scene(rng, canvas, count_range)
    return CaptionPair(to_tensor(render(scene)), language.gen_caption(scene, rng),
                       example_id("pretrain", index), scene)


def make_entail(index: int, seed: int, canvas: int = 32, count_range=(2, 4)) -> EntailExample:
    rng = example_rng(seed, "entail", index)
    scene = sample_scene(rng, canvas, count_range)
    text, label = language.gen_entail(scene, rng, ENTAIL_LABELS[index % 3])
    return EntailExample(to_tensor(render(scene)), text, label, example_id("entail", index), scene)


def make_pairjudge(index: int, seed: int, canvas: int = 32, count_range=(2, 4)) -> PairJudgeExample:
    rng = example_rng(seed, "pairjudge", index)
    a = sample_scene(rng, canvas, count_range)
    b = sample_scene(rng, canvas, count_range)
    text, label = language.gen_pairjudge(a, b, rng, label=index % 2 == 0)
    return PairJudgeExample(to_tensor(render(a)), to_tensor(render(b)), text, label,
                            example_id("pairjudge", index), (a, b))


def make_refres(index: int, seed: int, canvas: int = 48, n_objects: int = 5,
                attributes=("color", "shape"), max_attributes: int = 2,
                relations: bool = False) -> RefResExample:
    rng = example_rng(seed, "refres", index)
    for _ in range(1000):
        try:
            scene = gen_scene(rng, canvas, (n_objects, n_objects))
            text, gold = language.gen_refexp(scene, rng, attributes, max_attributes, relations)
        except (SceneError, GrammarError):
            continue
        boxes = [list(o.box) for o in scene.objects]
        return RefResExample(to_tensor(render(scene)), boxes, text, gold,
                             example_id("refres", index), scene)
    raise SceneError("could not generate a resolvable reference scene")


MAKERS = {"pretrain": make_pretrain, "entail": make_entail,
          "pairjudge": make_pairjudge, "refres": make_refres}


def build(task: str, n: int, seed: int, workers: int = 1, start: int = 0, **kwargs) -> list:
    """Generate examples ``start .. start+n-1`` of ``task``, in index order."""
    fn = partial(MAKERS[task], seed=seed, **kwargs)
    indices = range(start, start + n)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, indices, chunksize=32))
    return [fn(i) for i in indices]


def split(examples) -> dict[str, list]:
    out = {name: [] for name in SPLITS}
    for ex in examples:
        out[split_of(ex.id)].append(ex)
    return out


# -- disk --------------------------------------------------------------------

def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(img).transpose(1, 2, 0) * 255.0).astype(np.uint8)


def _save_image(root: Path, rel: str, img: np.ndarray) -> str:
    (root / rel).write_bytes(encode_ppm(_to_uint8(img)))
    return rel


def to_record(ex, root: Path, image_dir: str = "images") -> ManifestRecord:
    (root / image_dir).mkdir(parents=True, exist_ok=True)
    if isinstance(ex, CaptionPair):
        return ManifestRecord(ex.id, "pretrain", ex.text,
                              image=_save_image(root, f"{image_dir}/{ex.id}.ppm", ex.image))
    if isinstance(ex, EntailExample):
        return ManifestRecord(ex.id, "entail", ex.hypothesis, label=ex.label,
                              image=_save_image(root, f"{image_dir}/{ex.id}.ppm", ex.image))
    if isinstance(ex, PairJudgeExample):
        return ManifestRecord(ex.id, "pairjudge", ex.statement, label=bool(ex.label),
                              image_a=_save_image(root, f"{image_dir}/{ex.id}-a.ppm", ex.image_a),
                              image_b=_save_image(root, f"{image_dir}/{ex.id}-b.ppm", ex.image_b))
    if isinstance(ex, RefResExample):
        return ManifestRecord(ex.id, "refres", ex.expression, boxes=[list(b) for b in ex.candidates],
                              gold=int(ex.gold),
                              image=_save_image(root, f"{image_dir}/{ex.id}.ppm", ex.image))
    raise TypeError(f"unknown example type {type(ex).__name__}")


def write_examples(examples, manifest_path) -> None:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    root.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest_path, [to_record(ex, root) for ex in examples])


def _load_image(root: Path, rel: str) -> np.ndarray:
    return to_tensor(decode_ppm((root / rel).read_bytes()))


def from_record(rec: ManifestRecord, root: Path):
    if rec.task == "pretrain":
        return CaptionPair(_load_image(root, rec.image), rec.text, rec.id)
    if rec.task == "entail":
        return EntailExample(_load_image(root, rec.image), rec.text, rec.label, rec.id)
    if rec.task == "pairjudge":
        return PairJudgeExample(_load_image(root, rec.image_a), _load_image(root, rec.image_b),
                                rec.text, bool(rec.label), rec.id)
    return RefResExample(_load_image(root, rec.image), rec.boxes, rec.text, int(rec.gold), rec.id)


def load_examples(manifest_path) -> list:
    manifest_path = Path(manifest_path)
    return [from_record(r, manifest_path.parent) for r in read_manifest(manifest_path, check_files=True)]


def corpus_of(examples) -> list[str]:
    """Every text line in a set of examples, in order (vocabulary induction input)."""
    out = []
    for ex in examples:
        for attr in ("text", "hypothesis", "statement", "expression"):
            if hasattr(ex, attr):
                out.append(getattr(ex, attr))
    return out
