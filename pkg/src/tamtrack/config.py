"""Model and training configuration, plus the flat key=value config format.

Config files are UTF-8 text, one ``key = value`` per line, ``#`` comments.
Keys are namespaced ``model.*`` / ``train.*``; unknown keys are rejected so
typos fail loudly.  Paper-scale reference values are noted next to the
fields they override; the defaults here are desk-scale.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

TASKS = ("mask", "box", "point")


@dataclass
class ModelConfig:
    resolution: int = 128          # paper trains at 1024
    channels: int = 64
    feature_stride: int = 16
    num_mask_tokens: int = 3
    memory_capacity: int = 7       # num_maskmem
    decoder_layers: int = 2
    memory_attention_layers: int = 2
    lora_rank: int = 4
    lora_alpha: float = 8.0
    attention_heads: int = 4
    image_encoder_lora: bool = False
    decoupled_memory: bool = True  # False = fully-shared memory path (ablation)
    dtype: str = "float64"         # float64 in tests/oracles, float32 for training speed

    def __post_init__(self):
        if self.resolution % self.feature_stride:
            raise ValueError("resolution must be divisible by feature_stride")
        if self.num_mask_tokens < 1:
            raise ValueError("need at least one mask token")
        if self.memory_capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        if self.channels % (2 * self.attention_heads):
            raise ValueError("channels must be divisible by 2 * attention_heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def grid_size(self) -> int:
        return self.resolution // self.feature_stride

    @property
    def np_dtype(self):
        import numpy as np

        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class TrainConfig:
    # task sampling; paper ratio 1:4:5
    sample_probs: tuple[float, float, float] = (0.1, 0.4, 0.5)
    frames_per_episode: int = 8
    max_objects_mask: int = 3
    max_objects_box: int = 1
    max_objects_point: int = 3
    max_conditional_frames: int = 2
    interactive_prob: float = 0.5
    max_corrective_frames: int = 2
    max_corrective_points: int = 7
    epochs: int = 6
    steps_per_epoch: int = 40
    batch_size: int = 4
    learning_rate: float = 1e-3          # paper fine-tunes at 3e-6
    backbone_learning_rate: float = 1e-3  # paper: 5e-6
    weight_decay: float = 0.01
    grad_clip_norm: float = 0.1
    seed: int = 0
    workers: int = 1
    # gaussian prompt schedule at reference resolution 1024: (start, end, radius, sigma)
    gaussian_stages: tuple[tuple[float, float, float, float], ...] = (
        (0, 20, 50.0, 16.0),
        (20, 50, 20.0, 8.0),
        (50, 100, 5.0, 2.0),
    )
    push_memory_when_occluded: bool = True
    augment: bool = True

    def __post_init__(self):
        if abs(sum(self.sample_probs) - 1.0) > 1e-9:
            raise ValueError("sample_probs must sum to 1")
        if self.frames_per_episode < 2:
            raise ValueError("episodes need at least 2 frames")

    def max_objects(self, task: str) -> int:
        return {"mask": self.max_objects_mask, "box": self.max_objects_box, "point": self.max_objects_point}[task]


def _parse_value(text: str, target_type):
    text = text.strip()
    if target_type is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if target_type is str:
        return text
    # tuples: comma/semicolon separated; nested stages use ; between stages
    if ";" in text:
        return tuple(tuple(float(v) for v in part.split(",")) for part in text.split(";") if part.strip())
    return tuple(float(v) for v in text.split(","))


def read_config_file(path: str | Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def configs_from_file(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    """Build (ModelConfig, TrainConfig) from a flat config file."""
    entries = read_config_file(path)
    model_kwargs = {}
    train_kwargs = {}
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for key, raw in entries.items():
        if key.startswith("model."):
            name = key[len("model.") :]
            if name not in model_fields:
                raise ValueError(f"unknown config key: {key}")
            model_kwargs[name] = _parse_value(raw, _field_type(model_fields[name]))
        elif key.startswith("train."):
            name = key[len("train.") :]
            if name not in train_fields:
                raise ValueError(f"unknown config key: {key}")
            train_kwargs[name] = _parse_value(raw, _field_type(train_fields[name]))
        else:
            raise ValueError(f"unknown config key: {key} (expected model.* or train.*)")
    if "sample_probs" in train_kwargs:
        train_kwargs["sample_probs"] = tuple(train_kwargs["sample_probs"])
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def _field_type(f: dataclasses.Field):
    mapping = {"int": int, "float": float, "str": str, "bool": bool}
    return mapping.get(f.type if isinstance(f.type, str) else f.type.__name__, tuple)


def config_to_text(model: ModelConfig, train: TrainConfig) -> str:
    """Serialize configs back to the flat format (for reproducibility logs)."""
    lines = []
    for prefix, cfg in (("model", model), ("train", train)):
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple) and value and isinstance(value[0], tuple):
                text = "; ".join(",".join(str(x) for x in stage) for stage in value)
            elif isinstance(value, tuple):
                text = ",".join(str(x) for x in value)
            else:
                text = str(value)
            lines.append(f"{prefix}.{f.name} = {text}")
    return "\n".join(lines) + "\n"
