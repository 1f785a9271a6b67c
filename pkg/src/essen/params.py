"""Exact trainable-parameter accounting and parameter-budget solving.

Two independent routes produce a :class:`ParameterReport`: a closed form
over the config, and enumeration of the live model's parameter arrays.
They must agree exactly for every valid config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from essen.config import (
    FusionConfig,
    ModelConfig,
    VisionCnnConfig,
    check_config,
)


class NoSolutionError(ValueError):
    pass


@dataclass
class ParameterReport:
    per_module: dict[str, int]
    method: str
    # output widths of the towers, used by the budget solver
    widths: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_module.values())

    def to_dict(self) -> dict:
        return {"per_module": dict(self.per_module), "total": self.total, "method": self.method}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        rows = [(k, f"{v:,}") for k, v in self.per_module.items()]
        rows.append(("total", f"{self.total:,}"))
        kw = max(len(k) for k, _ in rows)
        vw = max(len(v) for _, v in rows)
        lines = [f"{'module':<{kw}}  {'params':>{vw}}", "-" * (kw + vw + 2)]
        lines += [f"{k:<{kw}}  {v:>{vw}}" for k, v in rows]
        return "\n".join(lines)


def linear(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def layer_norm(d: int) -> int:
    return 2 * d


def attention(d: int) -> int:
    return 4 * linear(d, d)


def encoder_block(d: int, ffn: int) -> int:
    return attention(d) + linear(d, ffn) + linear(ffn, d) + 2 * layer_norm(d)


def fusion_layer(d: int, ffn: int) -> int:
    """One dual-stream fusion layer: two (cross-attention + FFN + 2 LN) stacks."""
    return 2 * encoder_block(d, ffn)


def separable_block(c_in: int, c_out: int) -> int:
    return c_in * 9 + c_in + c_in * c_out + c_out


def cnn_tower(v: VisionCnnConfig) -> int:
    chans = v.stage_channels
    n = 3 * 9 * chans[0] + chans[0]
    c_in = chans[0]
    for c_out in chans:
        for _ in range(v.blocks_per_stage):
            n += separable_block(c_in, c_out)
            c_in = c_out
    return n + linear(chans[-1], v.out_proj)


def projection(n_in: int, n_out: int) -> int:
    return 0 if n_in == n_out else linear(n_in, n_out)


def fusion_params(f: FusionConfig) -> int:
    return f.layers * fusion_layer(f.hidden, f.ffn)


def param_count_closed_form(cfg: ModelConfig) -> ParameterReport:
    cfg = check_config(cfg)
    t, v = cfg.text, cfg.vision
    d = cfg.width
    per: dict[str, int] = {}
    if cfg.arch == "two-tower":
        per["text_tower"] = (t.vocab_size * t.hidden + t.max_len * t.hidden
                             + t.layers * encoder_block(t.hidden, t.ffn))
        if isinstance(v, VisionCnnConfig):
            per["vision_tower"] = cnn_tower(v)
        else:
            per["vision_tower"] = (linear(3 * v.patch_size ** 2, v.hidden) + v.hidden
                                   + (v.n_patches + 1) * v.hidden
                                   + v.layers * encoder_block(v.hidden, v.ffn))
        per["text_proj"] = projection(t.hidden, d)
        per["vision_proj"] = projection(v.out_width, d)
        per["fusion"] = fusion_params(cfg.fusion)
    else:
        per["encoder"] = (t.vocab_size * d + cfg.joint_max_len * d + 2 * d
                          + t.layers * encoder_block(d, t.ffn))
        if isinstance(v, VisionCnnConfig):
            per["vision_embed"] = cnn_tower(v)
        else:
            per["vision_embed"] = linear(3 * v.patch_size ** 2, v.hidden)
        per["vision_proj"] = projection(v.out_width, d)
    per["pooler"] = linear(d, d)
    return ParameterReport(per, "closed-form", {"text": t.hidden, "vision": v.out_width})


def param_count_enumerate(model) -> ParameterReport:
    """Sum element counts of every parameter array, grouped by top-level submodule."""
    per = {name: sum(p.numel() for p in child.parameters())
           for name, child in model.named_children()}
    owned = sum(p.numel() for p in model.parameters(recurse=False))
    if owned:
        per["<root>"] = owned
    cfg = getattr(model, "cfg", None)
    widths = {"text": cfg.text.hidden, "vision": cfg.vision.out_width} if cfg else {}
    return ParameterReport(per, "enumeration", widths)


def _fusion_total(h: int, layers: int, widths: dict) -> int:
    """Everything that scales with the fusion width: bridges, layers, pooler."""
    return (projection(widths["text"], h) + projection(widths["vision"], h)
            + layers * fusion_layer(h, 4 * h) + linear(h, h))


def backbone_total(report: ParameterReport) -> int:
    return report.per_module.get("text_tower", 0) + report.per_module.get("vision_tower", 0)


def solve_fusion_dims(target_total: int, backbone_report: ParameterReport,
                      hidden_candidates, heads: int = 4, max_layers: int = 32,
                      overshoot: float = 0.02, feasibility: float = 0.10) -> FusionConfig:
    """Pick the fusion (hidden, layers) whose model total lands closest to ``target_total``.

    Totals more than ``overshoot`` above the target are never chosen. Ties
    go to fewer total parameters, then fewer layers.
    """
    hidden_candidates = list(hidden_candidates)
    if not hidden_candidates:
        raise ValueError("hidden_candidates must be nonempty")
    if not backbone_report.widths:
        raise ValueError("backbone report carries no tower widths")
    base = backbone_total(backbone_report)
    if target_total <= base:
        raise NoSolutionError(f"target {target_total:,} does not exceed the backbone total {base:,}")
    best = None
    for h in hidden_candidates:
        for layers in range(1, max_layers + 1):
            total = base + _fusion_total(h, layers, backbone_report.widths)
            if total > target_total * (1 + overshoot):
                break
            key = (abs(total - target_total), total, layers)
            if best is None or key < best[0]:
                best = (key, h, layers)
    if best is None or best[0][0] > feasibility * target_total:
        raise NoSolutionError(f"no fusion shape within {feasibility:.0%} of {target_total:,}")
    _, h, layers = best
    n_heads = max(k for k in range(1, heads + 1) if h % k == 0)
    return FusionConfig(hidden=h, ffn=4 * h, layers=layers, heads=n_heads)
