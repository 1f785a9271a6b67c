"""Symbolic shape-world scenes, rasterization, and the binary PPM codec."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple")
SIZES = ("small", "large")
RGB = {
    "red": (220, 40, 40),
    "green": (40, 180, 70),
    "blue": (50, 80, 220),
    "yellow": (230, 210, 50),
    "purple": (150, 60, 190),
}
BACKGROUND = (255, 255, 255)
MAX_ATTEMPTS = 1000
MAX_OBJECTS = 16


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cx: int
    cy: int
    radius: int

    @property
    def box(self) -> tuple[int, int, int, int]:
        """Half-open pixel bounding box (x0, y0, x1, y1)."""
        r = self.radius
        return (self.cx - r, self.cy - r, self.cx + r + 1, self.cy + r + 1)


@dataclass
class Scene:
    objects: list[SceneObject]
    canvas: int
    seed: int | None = None

    def __len__(self):
        return len(self.objects)


def radius_for(size: str, canvas: int) -> int:
    if size == "small":
        return max(2, round(canvas / 12))
    return max(4, round(canvas / 7))


def _separated(a_x, a_y, a_r, b: SceneObject) -> bool:
    # disjoint bounding boxes with a one-pixel gap; implies centers farther
    # apart than the sum of radii
    return max(abs(a_x - b.cx), abs(a_y - b.cy)) > a_r + b.radius + 1


def gen_scene(rng: np.random.Generator, canvas: int = 32, object_count_range=(2, 4),
              seed: int | None = None) -> Scene:
    """Rejection-sample a scene of non-overlapping objects."""
    if canvas < 32:
        raise ValueError(f"canvas must be >= 32 pixels, got {canvas}")
    lo, hi = object_count_range
    if not 2 <= lo <= hi <= MAX_OBJECTS:
        raise ValueError(f"object count range must lie within [2, {MAX_OBJECTS}], got {object_count_range}")
    n = int(rng.integers(lo, hi + 1))
    objects: list[SceneObject] = []
    for _ in range(n):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        size = SIZES[int(rng.integers(len(SIZES)))]
        r = radius_for(size, canvas)
        for _attempt in range(MAX_ATTEMPTS):
            cx = int(rng.integers(r, canvas - r))
            cy = int(rng.integers(r, canvas - r))
            if all(_separated(cx, cy, r, o) for o in objects):
                objects.append(SceneObject(shape, color, size, cx, cy, r))
                break
        else:
            raise SceneError(f"could not place object {len(objects) + 1} of {n} on a "
                             f"{canvas}px canvas after {MAX_ATTEMPTS} attempts")
    return Scene(objects, canvas, seed)


def object_mask(obj: SceneObject, canvas: int) -> np.ndarray:
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    dx, dy = xs - obj.cx, ys - obj.cy
    r = obj.radius
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upright isosceles: apex (cx, cy - r), base from (cx - r, cy + r) to (cx + r, cy + r)
    # base half-plane, then the two slanted edges through the apex
    return (dy <= r) & (2 * dx >= -(dy + r)) & (2 * dx <= dy + r)


def render(scene: Scene) -> np.ndarray:
    """Rasterize to a (H, W, 3) uint8 array."""
    img = np.empty((scene.canvas, scene.canvas, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in scene.objects:
        img[object_mask(obj, scene.canvas)] = RGB[obj.color]
    return img


def to_tensor(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, c = rgb.shape
    if c != 3 or rgb.dtype != np.uint8:
        raise ValueError("PPM encoding expects an (H, W, 3) uint8 array")
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """Parse binary P6 with maxval 255 (comments allowed in the header)."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}")
    raster = data[pos:pos + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise ValueError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def render_ppm(scene: Scene) -> tuple[np.ndarray, bytes]:
    """Render a scene; returns the float image tensor and its P6 bytes."""
    rgb = render(scene)
    return to_tensor(rgb), encode_ppm(rgb)


def write_ppm(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample of a (3, H, W) float image to (3, size, size)."""
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]
    if t.shape[-1] == size and t.shape[-2] == size:
        return t[0].numpy().copy()
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].numpy()


def crop_resize(img: np.ndarray, box, size: int) -> np.ndarray:
    """Crop a half-open (x0, y0, x1, y1) box from a (3, H, W) image and resample it."""
    x0, y0, x1, y1 = (int(v) for v in box)
    _, h, w = img.shape
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate box {tuple(box)} (zero area)")
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"box {tuple(box)} outside the {w}x{h} image")
    return resize(img[:, y0:y1, x0:x1], size)
