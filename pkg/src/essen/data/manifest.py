"""JSONL dataset manifests: one record per line, UTF-8."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

TASKS = ("pretrain", "entail", "pairjudge", "refres")

REQUIRED = {
    "pretrain": ("id", "task", "image", "text"),
    "entail": ("id", "task", "image", "text", "label"),
    "pairjudge": ("id", "task", "image_a", "image_b", "text", "label"),
    "refres": ("id", "task", "image", "text", "boxes", "gold"),
}


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    id: str
    task: str
    text: str
    image: str | None = None
    image_a: str | None = None
    image_b: str | None = None
    label: object = None
    boxes: list | None = None
    gold: int | None = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, ensure_ascii=False, sort_keys=False)

    def image_paths(self) -> list[str]:
        return [p for p in (self.image, self.image_a, self.image_b) if p is not None]


_FIELDS = {f.name for f in fields(ManifestRecord)}


def parse_record(line: str, lineno: int = 1) -> ManifestRecord:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ManifestError(f"line {lineno}: record must be a JSON object")
    task = data.get("task")
    if task not in REQUIRED:
        raise ManifestError(f"line {lineno}: missing or unknown field 'task' ({task!r})")
    for name in REQUIRED[task]:
        if name not in data:
            raise ManifestError(f"line {lineno}: missing required field '{name}'")
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        raise ManifestError(f"line {lineno}: unknown field(s) {', '.join(unknown)}")
    if data.get("boxes") is not None:
        data["boxes"] = [list(b) for b in data["boxes"]]
    return ManifestRecord(**data)


def write_manifest(path, records) -> None:
    records = list(records)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError("manifest ids must be unique")
    text = "".join(r.to_json() + "\n" for r in records)
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path, check_files: bool = False) -> list[ManifestRecord]:
    path = Path(path)
    out, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = parse_record(line, lineno)
            if rec.id in seen:
                raise ManifestError(f"line {lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            if check_files:
                for p in rec.image_paths():
                    if not (path.parent / p).exists():
                        raise ManifestError(f"line {lineno}: image file {p!r} does not exist")
            out.append(rec)
    return out
