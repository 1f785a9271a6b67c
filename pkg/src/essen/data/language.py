"""Closed template grammar over shape-world scenes.

Statements are small frozen dataclasses. Generators build them from true
facts and render them to text; :func:`parse` reads text back into a
statement and :func:`truth` evaluates it against a scene. Going through
text is what makes the checker an independent oracle for generated labels.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from essen.data.scene import COLORS, SHAPES, SIZES, Scene, SceneError, SceneObject, gen_scene

RELATIONS = ("left of", "right of", "above", "below")
DEAD_ZONE = 4
NUMBERS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
           "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen")
ATTRIBUTES = ("color", "shape", "size")
ENTAIL_LABELS = ("entail", "neutral", "contradict")


class GrammarError(ValueError):
    pass


@dataclass(frozen=True)
class Desc:
    size: str | None = None
    color: str | None = None
    shape: str | None = None

    def matches(self, obj: SceneObject) -> bool:
        return ((self.size is None or obj.size == self.size)
                and (self.color is None or obj.color == self.color)
                and (self.shape is None or obj.shape == self.shape))

    def phrase(self, plural: bool = False) -> str:
        noun = self.shape or "shape"
        if plural:
            noun += "s"
        return " ".join(w for w in (self.size, self.color, noun) if w)

    @classmethod
    def of(cls, obj: SceneObject, attributes) -> "Desc":
        return cls(size=obj.size if "size" in attributes else None,
                   color=obj.color if "color" in attributes else None,
                   shape=obj.shape if "shape" in attributes else None)


@dataclass(frozen=True)
class Exists:
    desc: Desc


@dataclass(frozen=True)
class Count:
    n: int
    desc: Desc


@dataclass(frozen=True)
class Relation:
    subject: Desc
    rel: str
    landmark: Desc


@dataclass(frozen=True)
class Hedged:
    inner: object


@dataclass(frozen=True)
class Both:
    desc: Desc


@dataclass(frozen=True)
class OnlyOne:
    desc: Desc


@dataclass(frozen=True)
class More:
    desc: Desc


@dataclass(frozen=True)
class Ref:
    desc: Desc
    rel: str | None = None
    landmark: Desc | None = None


# -- rendering ---------------------------------------------------------------

def to_text(stmt) -> str:
    if isinstance(stmt, Exists):
        return f"a {stmt.desc.phrase()}"
    if isinstance(stmt, Count):
        return f"{NUMBERS[stmt.n]} {stmt.desc.phrase(plural=True)}"
    if isinstance(stmt, Relation):
        return f"a {stmt.subject.phrase()} {stmt.rel} a {stmt.landmark.phrase()}"
    if isinstance(stmt, Hedged):
        return "possibly " + to_text(stmt.inner)
    if isinstance(stmt, Both):
        return f"both images contain a {stmt.desc.phrase()}"
    if isinstance(stmt, OnlyOne):
        return f"only one image contains a {stmt.desc.phrase()}"
    if isinstance(stmt, More):
        return f"the left image has more {stmt.desc.phrase(plural=True)} than the right image"
    if isinstance(stmt, Ref):
        text = f"the {stmt.desc.phrase()}"
        if stmt.rel:
            text += f" {stmt.rel} the {stmt.landmark.phrase()}"
        return text
    raise TypeError(f"not a statement: {stmt!r}")


# -- parsing -----------------------------------------------------------------

_NOUNS = {s: s for s in SHAPES} | {"shape": None}
_PLURALS = {s + "s": s for s in SHAPES} | {"shapes": None}


class _Reader:
    def __init__(self, text: str):
        self.words = text.split()
        self.i = 0

    def peek(self, k=0):
        j = self.i + k
        return self.words[j] if j < len(self.words) else None

    def take(self, *expected):
        word = self.peek()
        if expected and word not in expected:
            raise GrammarError(f"expected {' or '.join(expected)} at word {self.i}, got {word!r}")
        if word is None:
            raise GrammarError("unexpected end of statement")
        self.i += 1
        return word

    def done(self):
        if self.i != len(self.words):
            raise GrammarError(f"trailing words: {' '.join(self.words[self.i:])!r}")

    def noun_phrase(self, plural=False) -> Desc:
        size = self.take() if self.peek() in SIZES else None
        color = self.take() if self.peek() in COLORS else None
        nouns = _PLURALS if plural else _NOUNS
        word = self.take()
        if word not in nouns:
            raise GrammarError(f"expected a {'plural ' if plural else ''}shape noun, got {word!r}")
        return Desc(size, color, nouns[word])

    def relation(self):
        w = self.peek()
        if w in ("left", "right") and self.peek(1) == "of":
            self.i += 2
            return f"{w} of"
        if w in ("above", "below"):
            self.i += 1
            return w
        return None


def parse(text: str):
    """Parse any statement the grammar can emit."""
    r = _Reader(text)
    first = r.peek()
    if first == "possibly":
        r.take()
        return Hedged(parse(" ".join(r.words[r.i:])))
    if first == "both":
        r.take("both"), r.take("images"), r.take("contain"), r.take("a")
        stmt = Both(r.noun_phrase())
    elif first == "only":
        r.take("only"), r.take("one"), r.take("image"), r.take("contains"), r.take("a")
        stmt = OnlyOne(r.noun_phrase())
    elif first == "the" and r.peek(1) == "left" and r.peek(2) == "image":
        r.take("the"), r.take("left"), r.take("image"), r.take("has"), r.take("more")
        desc = r.noun_phrase(plural=True)
        r.take("than"), r.take("the"), r.take("right"), r.take("image")
        stmt = More(desc)
    elif first == "the":
        r.take("the")
        desc = r.noun_phrase()
        rel = r.relation()
        landmark = None
        if rel:
            r.take("the")
            landmark = r.noun_phrase()
        stmt = Ref(desc, rel, landmark)
    elif first == "a":
        r.take("a")
        subject = r.noun_phrase()
        rel = r.relation()
        if rel:
            r.take("a")
            stmt = Relation(subject, rel, r.noun_phrase())
        else:
            stmt = Exists(subject)
    elif first in NUMBERS:
        n = NUMBERS.index(r.take())
        stmt = Count(n, r.noun_phrase(plural=True))
    else:
        raise GrammarError(f"unrecognized statement: {text!r}")
    r.done()
    return stmt


# -- truth -------------------------------------------------------------------

def holds(a: SceneObject, rel: str, b: SceneObject) -> bool:
    """Spatial relation of ``a`` to ``b`` by center coordinates, with a dead zone."""
    if rel == "left of":
        return a.cx < b.cx - DEAD_ZONE
    if rel == "right of":
        return a.cx > b.cx + DEAD_ZONE
    if rel == "above":
        return a.cy < b.cy - DEAD_ZONE
    if rel == "below":
        return a.cy > b.cy + DEAD_ZONE
    raise GrammarError(f"unknown relation {rel!r}")


def count(desc: Desc, scene: Scene) -> int:
    return sum(desc.matches(o) for o in scene.objects)


def truth(stmt, scene: Scene):
    """True/False for single-image statements; None for hedged (neutral) ones."""
    if isinstance(stmt, str):
        stmt = parse(stmt)
    if isinstance(stmt, Hedged):
        return None
    if isinstance(stmt, Exists):
        return count(stmt.desc, scene) > 0
    if isinstance(stmt, Count):
        return count(stmt.desc, scene) == stmt.n
    if isinstance(stmt, Relation):
        objs = scene.objects
        return any(stmt.subject.matches(a) and stmt.landmark.matches(b) and holds(a, stmt.rel, b)
                   for i, a in enumerate(objs) for j, b in enumerate(objs) if i != j)
    raise GrammarError(f"{type(stmt).__name__} is not a single-image statement")


def entail_label(stmt, scene: Scene) -> str:
    t = truth(stmt, scene)
    return "neutral" if t is None else ("entail" if t else "contradict")


def truth_pair(stmt, left: Scene, right: Scene) -> bool:
    if isinstance(stmt, str):
        stmt = parse(stmt)
    if isinstance(stmt, Both):
        return count(stmt.desc, left) > 0 and count(stmt.desc, right) > 0
    if isinstance(stmt, OnlyOne):
        return (count(stmt.desc, left) > 0) != (count(stmt.desc, right) > 0)
    if isinstance(stmt, More):
        return count(stmt.desc, left) > count(stmt.desc, right)
    raise GrammarError(f"{type(stmt).__name__} is not a two-image statement")


def satisfiers(ref, scene: Scene) -> list[int]:
    """Indices of every object the referring expression picks out."""
    if isinstance(ref, str):
        ref = parse(ref)
    if not isinstance(ref, Ref):
        raise GrammarError("not a referring expression")
    objs = scene.objects
    out = []
    for i, o in enumerate(objs):
        if not ref.desc.matches(o):
            continue
        if ref.rel is None or any(ref.landmark.matches(l) and holds(o, ref.rel, l)
                                  for j, l in enumerate(objs) if j != i):
            out.append(i)
    return out


# -- generation --------------------------------------------------------------

# attribute subsets for descriptions, each naming something visible
_DESC_PATTERNS = (("shape",), ("color", "shape"), ("size", "shape"),
                  ("size", "color", "shape"), ("color",), ("size",))


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def random_desc(obj: SceneObject, rng) -> Desc:
    return Desc.of(obj, _pick(rng, _DESC_PATTERNS))


def gen_caption_stmt(scene: Scene, rng):
    objs = scene.objects
    kinds = ["exists", "count", "relation"]
    while True:
        kind = _pick(rng, kinds)
        if kind == "exists":
            return Exists(random_desc(_pick(rng, objs), rng))
        if kind == "count":
            desc = random_desc(_pick(rng, objs), rng)
            n = count(desc, scene)
            if n >= 2:
                return Count(n, desc)
            continue
        pairs = [(a, b, rel) for a, b in itertools.permutations(objs, 2)
                 for rel in RELATIONS if holds(a, rel, b)]
        if not pairs:
            kinds = ["exists"]
            continue
        a, b, rel = _pick(rng, pairs)
        return Relation(random_desc(a, rng), rel, random_desc(b, rng))


def gen_caption(scene: Scene, rng) -> str:
    """A caption that is true of ``scene``."""
    stmt = gen_caption_stmt(scene, rng)
    if not truth(stmt, scene):  # construction guarantees this
        raise AssertionError(f"generated a false caption: {to_text(stmt)}")
    return to_text(stmt)


def _contradiction(stmt, scene: Scene, rng):
    present_colors = {o.color for o in scene.objects}
    present_shapes = {o.shape for o in scene.objects}
    absent_colors = [c for c in COLORS if c not in present_colors]
    absent_shapes = [s for s in SHAPES if s not in present_shapes]
    options = []
    if absent_colors:
        options.append(("color", absent_colors))
    if absent_shapes:
        options.append(("shape", absent_shapes))
    if not options:
        return None
    attr, values = _pick(rng, options)
    value = _pick(rng, values)
    if isinstance(stmt, Relation):
        return replace(stmt, subject=replace(stmt.subject, **{attr: value}))
    return replace(stmt, desc=replace(stmt.desc, **{attr: value}))


def gen_entail(scene: Scene, rng, label: str | None = None):
    """Return (hypothesis, label) with the label checkable against ``scene``.

    Neutral hypotheses are hedged ("possibly ...") claims about a
    color-shape combination seen in a fresh distractor scene but absent here.
    """
    if label is None:
        label = _pick(rng, ENTAIL_LABELS)
    if label not in ENTAIL_LABELS:
        raise ValueError(f"unknown entailment label {label!r}")
    if label == "entail":
        return gen_caption(scene, rng), label
    if label == "contradict":
        for _ in range(100):
            flipped = _contradiction(gen_caption_stmt(scene, rng), scene, rng)
            if flipped is not None and truth(flipped, scene) is False:
                return to_text(flipped), label
        raise GrammarError("could not build a contradiction for this scene")
    present = {(o.color, o.shape) for o in scene.objects}
    for _ in range(100):
        try:
            distractor = gen_scene(rng, scene.canvas, (2, 4))
        except SceneError:
            continue
        fresh = [o for o in distractor.objects if (o.color, o.shape) not in present]
        if fresh:
            o = _pick(rng, fresh)
            return to_text(Hedged(Exists(Desc(color=o.color, shape=o.shape)))), label
    raise GrammarError("could not build a neutral hypothesis for this scene")


def _pair_stmt(left: Scene, right: Scene, rng):
    kind = _pick(rng, ("both", "only", "more"))
    pool = left.objects + right.objects
    if rng.random() < 0.2:
        desc = Desc(color=_pick(rng, COLORS), shape=_pick(rng, SHAPES))
    else:
        desc = random_desc(_pick(rng, pool), rng)
    return {"both": Both, "only": OnlyOne, "more": More}[kind](desc)


def gen_pairjudge(left: Scene, right: Scene, rng, label: bool | None = None,
                  max_tries: int = 200):
    """Return (statement, label) over an ordered pair of scenes."""
    stmt = _pair_stmt(left, right, rng)
    if label is not None:
        for _ in range(max_tries):
            if truth_pair(stmt, left, right) == label:
                break
            stmt = _pair_stmt(left, right, rng)
    return to_text(stmt), truth_pair(stmt, left, right)


def _unique_desc(target: int, scene: Scene, attributes, max_attributes: int):
    ordered = [a for a in ATTRIBUTES if a in attributes]
    obj = scene.objects[target]
    for k in range(1, max_attributes + 1):
        for combo in itertools.combinations(ordered, k):
            desc = Desc.of(obj, combo)
            if satisfiers(Ref(desc), scene) == [target]:
                # name the head noun when allowed; narrowing keeps the match unique
                return replace(desc, shape=obj.shape) if "shape" in ordered else desc
    return None


def gen_refexp(scene: Scene, rng, attributes=ATTRIBUTES, max_attributes: int = 3,
               relations: bool = True):
    """Return (expression, gold index) naming exactly one object.

    Prefers the smallest distinguishing attribute set (color, then shape,
    then size), always naming the object's shape as the head noun when shape
    is an allowed attribute, then falls back to a spatial relation to a uniquely describable landmark.
    Targets are tried in random order until one can be named.
    """
    if len(scene.objects) < 2:
        raise ValueError("referring expressions need at least two objects")
    order = [int(i) for i in rng.permutation(len(scene.objects))]
    for target in order:
        desc = _unique_desc(target, scene, attributes, max_attributes)
        if desc is not None:
            ref = Ref(desc)
        elif relations:
            ref = _relational(target, scene, attributes, max_attributes)
        else:
            ref = None
        if ref is not None:
            text = to_text(ref)
            if satisfiers(text, scene) != [target]:
                raise AssertionError(f"non-unique expression {text!r}")
            return text, target
    raise GrammarError("no object in the scene can be uniquely described")


def _relational(target: int, scene: Scene, attributes, max_attributes):
    obj = scene.objects[target]
    ordered = [a for a in ATTRIBUTES if a in attributes]
    for j, landmark in enumerate(scene.objects):
        if j == target:
            continue
        l_desc = _unique_desc(j, scene, attributes, max_attributes)
        if l_desc is None:
            continue
        for rel in RELATIONS:
            if not holds(obj, rel, landmark):
                continue
            for k in range(1, max_attributes + 1):
                for combo in itertools.combinations(ordered, k):
                    ref = Ref(Desc.of(obj, combo), rel, l_desc)
                    if satisfiers(ref, scene) == [target]:
                        return ref
    return None


def grammar_lexicon() -> set[str]:
    words = set(SIZES) | set(COLORS) | set(SHAPES) | {s + "s" for s in SHAPES}
    words |= {"shape", "shapes", "a", "the", "possibly", "both", "images", "contain", "only",
              "one", "image", "contains", "left", "right", "has", "more", "than", "of",
              "above", "below"}
    return words | set(NUMBERS)
