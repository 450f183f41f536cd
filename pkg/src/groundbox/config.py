"""Training/run configuration: YAML file, flag overrides, resolved hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml


@dataclass
class TrainConfig:
    input_size: int = 64
    d_model: int = 32
    embed_width: int = 16
    visual_channels: tuple[int, int, int] = (32, 24, 16)  # level order: stride 32, 16, 8
    anchors: str = "anchors.txt"
    lambda_coord: float = 5.0
    lr: float = 1e-4
    steps: int = 2000
    batch: int = 32
    seed: int = 0
    flip: bool = True
    use_spatial: bool = True
    triplet: bool = False
    margin: float = 1.0
    w_reg: float = 1.0
    triplets_per_batch: int = 8
    visual_provider: str = "toy"  # toy | file
    text_provider: str = "toy"  # toy | file
    visual_lr_mult: float = 0.1
    checkpoint_every: int = 1000
    dtype: str = "float64"  # float64 | float32

    def __post_init__(self):
        self.visual_channels = tuple(int(c) for c in self.visual_channels)
        if len(self.visual_channels) != 3:
            raise ValueError("visual_channels needs one width per pyramid level")
        for name in ("lambda_coord", "margin", "w_reg", "visual_lr_mult"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.visual_provider not in ("toy", "file") or self.text_provider not in ("toy", "file"):
            raise ValueError("providers must be 'toy' or 'file'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def resolved(self) -> dict:
        d = asdict(self)
        d["visual_channels"] = list(self.visual_channels)
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(path: str | Path | None, overrides: dict | None = None) -> TrainConfig:
    """Config file values, then overrides (non-None entries win)."""
    values: dict = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a mapping of keys to values")
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        values.update(raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    return TrainConfig(**values)


def save_config(path: str | Path, cfg: TrainConfig) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.resolved(), sort_keys=True))
