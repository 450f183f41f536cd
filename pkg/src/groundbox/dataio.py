"""Dataset containers and the line-oriented file formats the pipeline exchanges.

Annotation file: one JSON object per line with fields
    {"id": str, "image_w": int, "image_h": int, "query": str,
     "box": [x1, y1, x2, y2]}   (box in original-image pixels)

Prediction file: one `id x1 y1 x2 y2 confidence` line per sample.
Proposal file:   one `id rank x1 y1 x2 y2 [score]` line per proposal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import Box

UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class GroundingSample:
    sample_id: str
    image_w: int
    image_h: int
    query: str
    box: Box


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    box: Box
    confidence: float


@dataclass
class Dataset:
    samples: list[GroundingSample]
    rasters: np.ndarray | None = None  # (N, S, S, C), aligned with samples
    blob_dir: Path | None = None

    def __len__(self) -> int:
        return len(self.samples)


def tokenize(query: str) -> list[str]:
    return query.lower().split()


def build_vocab(samples: list[GroundingSample]) -> list[str]:
    """UNK followed by the sorted unique tokens of the sample queries."""
    tokens = sorted({t for s in samples for t in tokenize(s.query)})
    return [UNK_TOKEN] + tokens


def encode_tokens(queries: list[str], vocab: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Pad per-query token ids to a common length; returns (ids, mask)."""
    index = {t: i for i, t in enumerate(vocab)}
    token_lists = [tokenize(q) for q in queries]
    if any(len(t) == 0 for t in token_lists):
        raise ValueError("empty query cannot be encoded")
    width = max(len(t) for t in token_lists)
    ids = np.zeros((len(queries), width), dtype=np.int64)
    mask = np.zeros((len(queries), width), dtype=np.float64)
    for r, toks in enumerate(token_lists):
        for c, tok in enumerate(toks):
            ids[r, c] = index.get(tok, 0)
            mask[r, c] = 1.0
    return ids, mask


def write_annotations(path: str | Path, samples: list[GroundingSample]) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(
                json.dumps(
                    {
                        "id": s.sample_id,
                        "image_w": s.image_w,
                        "image_h": s.image_h,
                        "query": s.query,
                        "box": [s.box.x1, s.box.y1, s.box.x2, s.box.y2],
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_annotations(path: str | Path) -> list[GroundingSample]:
    samples = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            box = rec["box"]
            samples.append(
                GroundingSample(
                    sample_id=str(rec["id"]),
                    image_w=int(rec["image_w"]),
                    image_h=int(rec["image_h"]),
                    query=str(rec["query"]),
                    box=Box(float(box[0]), float(box[1]), float(box[2]), float(box[3])),
                )
            )
        except (KeyError, IndexError, TypeError, ValueError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}:{n}: bad annotation record: {e}") from e
    return samples


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    ann = directory / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.jsonl under {directory}")
    samples = read_annotations(ann)
    rasters = None
    raster_path = directory / "rasters.npy"
    if raster_path.exists():
        rasters = np.load(raster_path)
        if len(rasters) != len(samples):
            raise FormatError(
                f"{raster_path}: {len(rasters)} rasters for {len(samples)} annotations"
            )
    blob_dir = directory / "blobs"
    return Dataset(samples=samples, rasters=rasters, blob_dir=blob_dir if blob_dir.is_dir() else None)


def format_prediction(p: PredictionRecord) -> str:
    b = p.box
    return f"{p.sample_id} {b.x1:.6f} {b.y1:.6f} {b.x2:.6f} {b.y2:.6f} {p.confidence:.6f}"


def write_predictions(path: str | Path, preds: list[PredictionRecord]) -> None:
    Path(path).write_text("".join(format_prediction(p) + "\n" for p in preds))


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}:{n}: expected `id x1 y1 x2 y2 confidence`, got {line!r}")
        try:
            out.append(
                PredictionRecord(
                    sample_id=parts[0],
                    box=Box(*(float(v) for v in parts[1:5])),
                    confidence=float(parts[5]),
                )
            )
        except ValueError as e:
            raise FormatError(f"{path}:{n}: {e}") from e
    return out


def write_proposals(path: str | Path, proposals: dict[str, list[Box]],
                    scores: dict[str, list[float]] | None = None) -> None:
    with open(path, "w") as f:
        for sid, boxes in proposals.items():
            for rank, b in enumerate(boxes):
                line = f"{sid} {rank} {b.x1:.6f} {b.y1:.6f} {b.x2:.6f} {b.y2:.6f}"
                if scores is not None:
                    line += f" {scores[sid][rank]:.6f}"
                f.write(line + "\n")


def read_proposals(path: str | Path) -> dict[str, list[Box]]:
    """Ranked proposals per sample id; ranks must be dense from 0 within each id."""
    staged: dict[str, list[tuple[int, Box]]] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) not in (6, 7):
            raise FormatError(f"{path}:{n}: expected `id rank x1 y1 x2 y2 [score]`, got {line!r}")
        try:
            rank = int(parts[1])
            box = Box(*(float(v) for v in parts[2:6]))
        except ValueError as e:
            raise FormatError(f"{path}:{n}: {e}") from e
        staged.setdefault(parts[0], []).append((rank, box))
    out: dict[str, list[Box]] = {}
    for sid, entries in staged.items():
        entries.sort(key=lambda e: e[0])
        if [r for r, _ in entries] != list(range(len(entries))):
            raise FormatError(f"{path}: ranks for id {sid} are not dense from 0")
        out[sid] = [b for _, b in entries]
    return out
