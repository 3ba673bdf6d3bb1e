"""On-disk formats: sequence directories, annotation JSON, mask RLE.

A sequence directory holds frames as 8-bit RGB PNGs (``00000.png``, ...)
plus ``annotations.json``:

    {
      "schema_version": 1,
      "resolution": [H, W],
      "frame_count": T,
      "objects": ["0", "1", ...],
      "frames": [
        {"index": 0,
         "objects": {
            "0": {"mask_rle": [[1, start, length], ...] | null,
                   "box": [x1, y1, x2, y2] | null,
                   "point": [x, y] | null,
                   "visible": 0 | 1}}}
      ]
    }

Masks are run-length encoded row-major as (value, start, length) triples;
only foreground runs are stored.  Predictions reuse the same schema, which
is also the ingestion contract for any external data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import atomic_write_text
from .synthetic import ObjectAnnotation

SCHEMA_VERSION = 1


def rle_encode(mask: np.ndarray) -> list[list[int]]:
    """Row-major runs of foreground pixels as [value, start, length]."""
    flat = np.asarray(mask).astype(bool).ravel()
    if not flat.any():
        return []
    padded = np.concatenate([[False], flat, [False]])
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = changes[::2], changes[1::2]
    return [[1, int(s), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs: list[list[int]], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=np.uint8)
    for value, start, length in runs:
        if start < 0 or start + length > flat.size:
            raise ValueError(f"RLE run [{value},{start},{length}] exceeds mask of size {flat.size}")
        flat[start : start + length] = value
    return flat.reshape(shape)


@dataclass
class SequenceAnnotations:
    """In-memory form of annotations.json."""

    resolution: tuple[int, int]
    frames: list[dict[int, ObjectAnnotation]]

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def object_ids(self) -> list[int]:
        ids: set[int] = set()
        for frame in self.frames:
            ids.update(frame.keys())
        return sorted(ids)


def annotations_to_json(ann: SequenceAnnotations) -> str:
    frames_payload = []
    for t, frame in enumerate(ann.frames):
        objects = {}
        for obj_id, record in sorted(frame.items()):
            objects[str(obj_id)] = {
                "mask_rle": rle_encode(record.mask) if record.mask is not None else None,
                "box": list(record.box) if record.box is not None else None,
                "point": list(record.point) if record.point is not None else None,
                "visible": int(record.visible),
            }
        frames_payload.append({"index": t, "objects": objects})
    payload = {
        "schema_version": SCHEMA_VERSION,
        "resolution": list(ann.resolution),
        "frame_count": len(ann.frames),
        "objects": [str(i) for i in ann.object_ids],
        "frames": frames_payload,
    }
    return json.dumps(payload, indent=1)


def annotations_from_json(text: str) -> SequenceAnnotations:
    payload = json.loads(text)
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported annotations schema_version: {version}")
    h, w = payload["resolution"]
    frames: list[dict[int, ObjectAnnotation]] = []
    for frame in payload["frames"]:
        record: dict[int, ObjectAnnotation] = {}
        for key, obj in frame["objects"].items():
            mask = rle_decode(obj["mask_rle"], (h, w)) if obj.get("mask_rle") is not None else None
            record[int(key)] = ObjectAnnotation(
                mask=mask if mask is not None else np.zeros((h, w), dtype=np.uint8),
                visible=bool(obj["visible"]),
                box=tuple(obj["box"]) if obj.get("box") is not None else None,
                point=tuple(obj["point"]) if obj.get("point") is not None else None,
            )
        frames.append(record)
    return SequenceAnnotations(resolution=(h, w), frames=frames)


def save_annotations(path: str | Path, ann: SequenceAnnotations) -> None:
    atomic_write_text(path, annotations_to_json(ann))


def load_annotations(path: str | Path) -> SequenceAnnotations:
    return annotations_from_json(Path(path).read_text(encoding="utf-8"))


def save_sequence_dir(directory: str | Path, frames: np.ndarray, annotations: SequenceAnnotations) -> None:
    """Write frames as PNG plus annotations.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        img = (np.clip(frame, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(img, mode="RGB").save(directory / f"{t:05d}.png")
    save_annotations(directory / "annotations.json", annotations)


def load_sequence_frames(directory: str | Path) -> np.ndarray:
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = []
    for p in paths:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        frames.append(arr.transpose(2, 0, 1))
    return np.stack(frames)


def load_sequence_dir(directory: str | Path) -> tuple[np.ndarray, SequenceAnnotations]:
    directory = Path(directory)
    return load_sequence_frames(directory), load_annotations(directory / "annotations.json")


def annotations_from_generator(frames_annotations, resolution: int) -> SequenceAnnotations:
    return SequenceAnnotations(resolution=(resolution, resolution), frames=list(frames_annotations))
