"""Deterministic JSON / JSON Lines reading and writing."""

from __future__ import annotations

import json
from pathlib import Path

from .geom import CameraModel


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc.msg}") from exc
    return out


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, allow_nan=False))
            fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n")


def read_camera(path) -> CameraModel:
    return CameraModel.from_dict(read_json(path))


def write_camera(path, camera: CameraModel) -> None:
    write_json(path, camera.to_dict())
