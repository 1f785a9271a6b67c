"""Architecture descriptions for the one-tower and two-tower encoders.

A :class:`ModelConfig` is the single source of truth for both model
construction and parameter accounting. Configs are frozen value objects;
edits go through :func:`dataclasses.replace` or :func:`sweep_grid`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

ARCHS = ("one-tower", "two-tower")
SWEEP_AXES = ("fusion_layers", "fusion_hidden", "text_backbone", "vision_backbone", "arch")


class ConfigError(ValueError):
    """Raised when a config violates its invariants; carries every violation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config: " + "; ".join(self.violations))


@dataclass(frozen=True)
class TextTowerConfig:
    vocab_size: int
    hidden: int
    layers: int
    heads: int
    ffn: int
    max_len: int


@dataclass(frozen=True)
class VisionPatchConfig:
    image_size: int
    patch_size: int
    hidden: int
    layers: int
    heads: int
    ffn: int

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def out_width(self) -> int:
        return self.hidden


@dataclass(frozen=True)
class VisionCnnConfig:
    image_size: int
    stage_channels: tuple
    blocks_per_stage: int
    out_proj: int

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))

    @property
    def grid(self) -> int:
        return self.image_size // (2 ** len(self.stage_channels))

    @property
    def out_width(self) -> int:
        return self.out_proj


VisionConfig = Union[VisionPatchConfig, VisionCnnConfig]


@dataclass(frozen=True)
class FusionConfig:
    hidden: int
    ffn: int
    layers: int
    heads: int
    # set to decouple ffn from the 4x hidden convention
    free_ffn: bool = False


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    text: TextTowerConfig
    vision: VisionConfig
    fusion: FusionConfig | None = None
    seed: int = 0

    @property
    def n_visual_tokens(self) -> int:
        """Visual tokens reaching the cross-modal core.

        The patch tower prepends an image-[CLS] token; the one-tower
        front-end feeds raw patch embeddings without it.
        """
        v = self.vision
        if isinstance(v, VisionCnnConfig):
            return v.grid ** 2
        if self.arch == "one-tower":
            return v.n_patches
        return v.n_patches + 1

    @property
    def joint_max_len(self) -> int:
        # [CLS] text [SEP] + pad, then one extra [SEP], then the visual tokens
        return self.text.max_len + 1 + self.n_visual_tokens

    @property
    def width(self) -> int:
        """Width of the multimodal states and the pooled vector."""
        if self.arch == "two-tower":
            return self.fusion.hidden
        return self.text.hidden

    @property
    def image_size(self) -> int:
        return self.vision.image_size


def _positive(violations, where, **values):
    for name, value in values.items():
        if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
            violations.append(f"{where}.{name} must be a positive integer, got {value!r}")


def validate_config(cfg: ModelConfig) -> list[str]:
    """Return every violated invariant of ``cfg`` as a readable message."""
    out: list[str] = []
    if cfg.arch not in ARCHS:
        out.append(f"arch must be one of {ARCHS}, got {cfg.arch!r}")

    t = cfg.text
    _positive(out, "text", vocab_size=t.vocab_size, hidden=t.hidden, layers=t.layers,
              heads=t.heads, ffn=t.ffn, max_len=t.max_len)
    if t.heads > 0 and t.hidden % t.heads:
        out.append(f"text.hidden ({t.hidden}) must be divisible by text.heads ({t.heads})")
    if t.ffn < t.hidden:
        out.append(f"text.ffn ({t.ffn}) must be >= text.hidden ({t.hidden})")
    if t.max_len < 2:
        out.append(f"text.max_len ({t.max_len}) must be >= 2")

    v = cfg.vision
    if isinstance(v, VisionPatchConfig):
        _positive(out, "vision", image_size=v.image_size, patch_size=v.patch_size,
                  hidden=v.hidden, layers=v.layers, heads=v.heads, ffn=v.ffn)
        if v.patch_size > 0 and v.image_size % v.patch_size:
            out.append(f"vision.image_size ({v.image_size}) must be divisible by "
                       f"vision.patch_size ({v.patch_size})")
        if v.heads > 0 and v.hidden % v.heads:
            out.append(f"vision.hidden ({v.hidden}) must be divisible by vision.heads ({v.heads})")
    elif isinstance(v, VisionCnnConfig):
        _positive(out, "vision", image_size=v.image_size,
                  blocks_per_stage=v.blocks_per_stage, out_proj=v.out_proj)
        if len(v.stage_channels) < 1:
            out.append("vision.stage_channels must have at least one stage")
        for i, c in enumerate(v.stage_channels):
            _positive(out, "vision", **{f"stage_channels[{i}]": c})
        if v.stage_channels and v.image_size % (2 ** len(v.stage_channels)):
            out.append(f"vision.image_size ({v.image_size}) must be divisible by "
                       f"2^{len(v.stage_channels)} (one stride-2 per stage)")
    else:
        out.append(f"vision must be a patch or CNN config, got {type(v).__name__}")

    f = cfg.fusion
    if cfg.arch == "one-tower" and f is not None:
        out.append("one-tower configs must not carry a fusion block")
    if cfg.arch == "two-tower":
        if f is None:
            out.append("two-tower configs require a fusion block")
        else:
            _positive(out, "fusion", hidden=f.hidden, ffn=f.ffn, heads=f.heads)
            if not isinstance(f.layers, int) or f.layers < 0:
                out.append(f"fusion.layers must be a non-negative integer, got {f.layers!r}")
            if f.heads > 0 and f.hidden % f.heads:
                out.append(f"fusion.hidden ({f.hidden}) must be divisible by fusion.heads ({f.heads})")
            if not f.free_ffn and f.ffn != 4 * f.hidden:
                out.append(f"fusion.ffn ({f.ffn}) must equal 4 x fusion.hidden "
                           f"({4 * f.hidden}) unless free_ffn is set")

    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        out.append(f"seed must be an unsigned integer, got {cfg.seed!r}")
    return out


def check_config(cfg: ModelConfig) -> ModelConfig:
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


# -- JSON --------------------------------------------------------------------

def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError([f"{where} must be an object"])
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError([f"unknown key(s) in {where}: {', '.join(unknown)}"])
    required = {f.name for f in dataclasses.fields(cls)
                if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING}
    missing = sorted(required - set(data))
    if missing:
        raise ConfigError([f"missing key(s) in {where}: {', '.join(missing)}"])
    return cls(**data)


def config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    for key in ("text", "vision"):
        if key not in data:
            raise ConfigError([f"missing key: {key}"])
    data["text"] = _build(TextTowerConfig, data["text"], "text")
    vision = data["vision"]
    if isinstance(vision, dict) and "stage_channels" in vision:
        data["vision"] = _build(VisionCnnConfig, vision, "vision")
    else:
        data["vision"] = _build(VisionPatchConfig, vision, "vision")
    if data.get("fusion") is not None:
        data["fusion"] = _build(FusionConfig, data["fusion"], "fusion")
    return _build(ModelConfig, data, "config")


def config_to_dict(cfg: ModelConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    if isinstance(cfg.vision, VisionCnnConfig):
        d["vision"]["stage_channels"] = list(cfg.vision.stage_channels)
    return d


def load_config(path) -> ModelConfig:
    text = Path(path).read_text(encoding="utf-8")
    return check_config(config_from_dict(json.loads(text)))


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf-8")


# -- presets -----------------------------------------------------------------

def _fusion(hidden, layers, heads=4):
    return FusionConfig(hidden=hidden, ffn=4 * hidden, layers=layers, heads=heads)


TEXT_BACKBONES = {
    # desk-scale analogs, proportions only
    "electra-tiny": TextTowerConfig(vocab_size=320, hidden=32, layers=2, heads=4, ffn=128, max_len=24),
    "electra-small": TextTowerConfig(vocab_size=320, hidden=64, layers=3, heads=4, ffn=256, max_len=24),
    "mobilebert": TextTowerConfig(vocab_size=320, hidden=64, layers=6, heads=4, ffn=256, max_len=24),
}

VISION_BACKBONES = {
    "deit-tiny": VisionPatchConfig(image_size=32, patch_size=8, hidden=32, layers=2, heads=4, ffn=128),
    "deit-small": VisionPatchConfig(image_size=32, patch_size=8, hidden=64, layers=3, heads=4, ffn=256),
    "efficientnet": VisionCnnConfig(image_size=32, stage_channels=(16, 32, 64), blocks_per_stage=2, out_proj=96),
}


def _tiny_text(**kw):
    base = dict(vocab_size=320, hidden=32, layers=2, heads=4, ffn=128, max_len=24)
    base.update(kw)
    return TextTowerConfig(**base)


def _tiny_patch(**kw):
    base = dict(image_size=32, patch_size=8, hidden=32, layers=2, heads=4, ffn=128)
    base.update(kw)
    return VisionPatchConfig(**base)


PRESETS: dict[str, ModelConfig] = {
    "tiny": ModelConfig("two-tower", _tiny_text(), _tiny_patch(), _fusion(32, 2)),
    "tiny-two-tower": ModelConfig("two-tower", _tiny_text(), _tiny_patch(), _fusion(32, 2)),
    "tiny-one-tower": ModelConfig("one-tower", _tiny_text(layers=4), _tiny_patch()),
    "tiny-essen": ModelConfig(
        "two-tower", _tiny_text(),
        VisionCnnConfig(image_size=32, stage_channels=(16, 32, 48), blocks_per_stage=1, out_proj=48),
        _fusion(40, 2)),
    # gradient-check sized: d=8, one fusion layer
    "gradcheck-two-tower": ModelConfig(
        "two-tower",
        TextTowerConfig(vocab_size=300, hidden=8, layers=1, heads=2, ffn=16, max_len=8),
        VisionPatchConfig(image_size=8, patch_size=4, hidden=8, layers=1, heads=2, ffn=16),
        FusionConfig(hidden=8, ffn=32, layers=1, heads=2)),
    "gradcheck-one-tower": ModelConfig(
        "one-tower",
        TextTowerConfig(vocab_size=300, hidden=8, layers=2, heads=2, ffn=16, max_len=8),
        VisionPatchConfig(image_size=8, patch_size=4, hidden=8, layers=1, heads=2, ffn=16)),
    "gradcheck-cnn": ModelConfig(
        "two-tower",
        TextTowerConfig(vocab_size=300, hidden=8, layers=1, heads=2, ffn=16, max_len=8),
        VisionCnnConfig(image_size=8, stage_channels=(4, 8), blocks_per_stage=1, out_proj=8),
        FusionConfig(hidden=8, ffn=32, layers=1, heads=2)),
    # named shapes: matched proportions at desk scale, not absolute counts
    "one-tower-33m-analog": ModelConfig(
        "one-tower", TextTowerConfig(vocab_size=320, hidden=96, layers=6, heads=4, ffn=384, max_len=24),
        _tiny_patch(hidden=96)),
    "two-tower-33m-analog": ModelConfig(
        "two-tower", TEXT_BACKBONES["electra-small"], VISION_BACKBONES["deit-tiny"], _fusion(64, 7)),
    "essen": ModelConfig(
        "two-tower", TEXT_BACKBONES["electra-small"], VISION_BACKBONES["efficientnet"], _fusion(80, 6)),
    # full-size shape of the final model's fusion block (backbones desk-sized)
    "essen-full-fusion": ModelConfig(
        "two-tower", TEXT_BACKBONES["electra-small"], VISION_BACKBONES["efficientnet"],
        _fusion(320, 6, heads=8)),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def resolve_config(spec) -> ModelConfig:
    """Accept a ModelConfig, a preset name, or a path to a JSON config."""
    if isinstance(spec, ModelConfig):
        return check_config(spec)
    if isinstance(spec, str) and spec in PRESETS:
        return PRESETS[spec]
    return load_config(spec)


# -- sweeps ------------------------------------------------------------------

def _backbone(value, table, kind):
    if isinstance(value, str):
        try:
            return table[value]
        except KeyError:
            raise ConfigError([f"unknown {kind} backbone {value!r}"]) from None
    return value


def _largest_divisor(n, at_most):
    return max(h for h in range(1, at_most + 1) if n % h == 0)


def sweep_grid(base: ModelConfig, axis: str, values) -> list[ModelConfig]:
    """One config per value along ``axis``, every other field copied from ``base``."""
    if axis not in SWEEP_AXES:
        raise ConfigError([f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}"])
    out = []
    for value in values:
        if axis == "fusion_layers":
            cfg = dataclasses.replace(base, fusion=dataclasses.replace(base.fusion, layers=value))
        elif axis == "fusion_hidden":
            f = base.fusion
            ffn = f.ffn if f.free_ffn else 4 * value
            cfg = dataclasses.replace(base, fusion=dataclasses.replace(f, hidden=value, ffn=ffn))
        elif axis == "text_backbone":
            cfg = dataclasses.replace(base, text=_backbone(value, TEXT_BACKBONES, "text"))
        elif axis == "vision_backbone":
            cfg = dataclasses.replace(base, vision=_backbone(value, VISION_BACKBONES, "vision"))
        else:
            if value == "one-tower":
                cfg = dataclasses.replace(base, arch=value, fusion=None)
            elif base.fusion is None:
                d = base.text.hidden
                cfg = dataclasses.replace(base, arch=value,
                                          fusion=_fusion(d, 2, _largest_divisor(d, 4)))
            else:
                cfg = dataclasses.replace(base, arch=value)
        out.append(check_config(cfg))
    return out
