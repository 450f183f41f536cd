"""Deterministic synthetic grounding scenes with exactly known ground truth.

Two profiles:

  appearance  every object in a scene has a unique color and shape, so queries
              resolve without any positional reasoning.
  spatial     each scene contains an identical-looking twin pair split across
              image halves plus a distractor; every query carries a half
              qualifier ("left"/"right"/"top"/"bottom") and is unanswerable
              from appearance alone.

Each scene emits several samples (same image, different queries), which also
provides the positive bags for the triplet regularizer. Sample ids are
`<scene>-<variant>` so samples of one image share the prefix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import GroundingSample, write_annotations
from .encoders import KIND_PYRAMID, KIND_QUERY, write_blob
from .geometry import Box, iou_matrix

COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle", "triangle")
LATERAL = ("left", "right")
VERTICAL = ("top", "bottom")
QUALIFIERS = LATERAL + VERTICAL

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 220, 40),
    "blue": (40, 40, 220),
}
BACKGROUND = (30, 30, 30)

GRAMMAR_VOCAB = sorted(COLORS + SHAPES + QUALIFIERS)


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    box: Box


@dataclass
class GenConfig:
    profile: str = "spatial"  # spatial | appearance
    input_size: int = 64
    min_size: float = 12.0
    max_size: float = 28.0
    overlap_cap: float = 0.1
    margin: float = 2.0

    def __post_init__(self):
        if self.profile not in ("spatial", "appearance"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.max_size + 2 * self.margin > self.input_size / 2:
            raise ValueError(
                "objects of max_size cannot sit strictly inside an image half; "
                "shrink max_size or grow input_size"
            )


def in_half(box: Box, qualifier: str, size: float) -> bool:
    if qualifier == "left":
        return box.x2 <= size / 2
    if qualifier == "right":
        return box.x1 >= size / 2
    if qualifier == "top":
        return box.y2 <= size / 2
    if qualifier == "bottom":
        return box.y1 >= size / 2
    raise ValueError(f"unknown qualifier {qualifier!r}")


def match_query(query: str, objects: list[SceneObject], image_size: float) -> list[SceneObject]:
    """All objects a query describes; generation guarantees exactly one."""
    cands = list(objects)
    for tok in query.split():
        if tok in COLORS:
            cands = [o for o in cands if o.color == tok]
        elif tok in SHAPES:
            cands = [o for o in cands if o.shape == tok]
        elif tok in QUALIFIERS:
            cands = [o for o in cands if in_half(o.box, tok, image_size)]
        else:
            raise ValueError(f"token {tok!r} is outside the scene grammar")
    return cands


def render_scene(objects: list[SceneObject], size: int) -> np.ndarray:
    """(S, S, 3) uint8 raster; later objects paint over earlier ones."""
    raster = np.empty((size, size, 3), dtype=np.uint8)
    raster[:] = BACKGROUND
    ys, xs = np.mgrid[0:size, 0:size]
    xs = xs + 0.5
    ys = ys + 0.5
    for obj in objects:
        b = obj.box
        cx, cy, w, h = b.cx, b.cy, b.w, b.h
        if obj.shape == "square":
            mask = (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
        elif obj.shape == "circle":
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= (w / 2) ** 2
        else:  # triangle: apex at top center, base at the bottom edge
            rel = (ys - (cy - h / 2)) / h
            mask = (rel >= 0) & (rel <= 1) & (np.abs(xs - cx) <= (w / 2) * rel)
        raster[mask] = PALETTE[obj.color]
    return raster


def _place(
    rng: np.random.Generator,
    size_px: float,
    scene_size: int,
    placed: list[Box],
    cap: float,
    margin: float,
    half: str | None = None,
    tries: int = 200,
) -> Box:
    lo = margin + size_px / 2
    hi = scene_size - margin - size_px / 2
    x_lo, x_hi, y_lo, y_hi = lo, hi, lo, hi
    gap = 1.0  # keep a strict gap to the center line
    if half == "left":
        x_hi = scene_size / 2 - gap - size_px / 2
    elif half == "right":
        x_lo = scene_size / 2 + gap + size_px / 2
    elif half == "top":
        y_hi = scene_size / 2 - gap - size_px / 2
    elif half == "bottom":
        y_lo = scene_size / 2 + gap + size_px / 2
    if x_hi < x_lo or y_hi < y_lo:
        raise ValueError("unsatisfiable placement: object too large for its half")
    for _ in range(tries):
        cx = rng.uniform(x_lo, x_hi)
        cy = rng.uniform(y_lo, y_hi)
        box = Box.from_center(cx, cy, size_px, size_px)
        if not placed:
            return box
        ious = iou_matrix(box.as_array()[None, :], np.array([b.as_array() for b in placed]))
        if ious.max() <= cap:
            return box
    raise ValueError("unsatisfiable placement: could not respect the overlap cap")


def _spatial_scene(rng: np.random.Generator, cfg: GenConfig) -> tuple[list[SceneObject], list[tuple[str, int]]]:
    """Twin pair across an axis plus one distractor; returns objects and
    (query, referent index) variants."""
    color = str(rng.choice(COLORS))
    shape = str(rng.choice(SHAPES))
    axis = LATERAL if rng.random() < 0.5 else VERTICAL
    size_px = rng.uniform(cfg.min_size, cfg.max_size)
    objects: list[SceneObject] = []
    boxes: list[Box] = []
    for half in axis:
        b = _place(rng, size_px, cfg.input_size, boxes, cfg.overlap_cap, cfg.margin, half=half)
        objects.append(SceneObject(color, shape, b))
        boxes.append(b)
    d_shape = str(rng.choice([s for s in SHAPES if s != shape]))
    d_color = str(rng.choice(COLORS))
    d_size = rng.uniform(cfg.min_size, cfg.max_size)
    d_box = _place(rng, d_size, cfg.input_size, boxes, cfg.overlap_cap, cfg.margin)
    objects.append(SceneObject(d_color, d_shape, d_box))

    variants = []
    for ref, half in enumerate(axis):
        variants.append((f"{color} {shape} {half}", ref))
        variants.append((f"{shape} {half}", ref))
    return objects, variants


def _appearance_scene(rng: np.random.Generator, cfg: GenConfig) -> tuple[list[SceneObject], list[tuple[str, int]]]:
    """2-3 objects with pairwise-unique colors and shapes; queries need no qualifier."""
    n = int(rng.integers(2, 4))
    colors = rng.permutation(COLORS)[:n]
    shapes = rng.permutation(SHAPES)[:n]
    objects: list[SceneObject] = []
    boxes: list[Box] = []
    for c, s in zip(colors, shapes):
        size_px = rng.uniform(cfg.min_size, cfg.max_size)
        b = _place(rng, size_px, cfg.input_size, boxes, cfg.overlap_cap, cfg.margin)
        objects.append(SceneObject(str(c), str(s), b))
        boxes.append(b)
    variants = []
    for ref in (0, 1):
        obj = objects[ref]
        variants.append((f"{obj.color} {obj.shape}", ref))
        reduced = obj.shape if rng.random() < 0.5 else obj.color
        variants.append((reduced, ref))
    return objects, variants


def generate(count: int, seed: int, cfg: GenConfig, out_dir: str | Path, blobs: bool = False) -> Path:
    """Write `count` samples under out_dir: annotations.jsonl, rasters.npy,
    meta.json, and optional per-sample feature blobs.

    Deterministic per (count, seed, cfg). Every emitted query is checked to
    resolve to exactly one object by the exhaustive matcher.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples: list[GroundingSample] = []
    rasters: list[np.ndarray] = []
    scene_idx = 0
    blob_dir = out_dir / "blobs"
    if blobs:
        blob_dir.mkdir(exist_ok=True)
    while len(samples) < count:
        make = _spatial_scene if cfg.profile == "spatial" else _appearance_scene
        objects, variants = make(rng, cfg)
        raster = render_scene(objects, cfg.input_size)
        for variant_idx, (query, ref) in enumerate(variants):
            if len(samples) == count:
                break
            matches = match_query(query, objects, cfg.input_size)
            if len(matches) != 1 or matches[0] is not objects[ref]:
                raise AssertionError(
                    f"scene {scene_idx}: query {query!r} matched {len(matches)} objects"
                )
            sid = f"{cfg.profile[0]}{scene_idx:05d}-{variant_idx}"
            samples.append(
                GroundingSample(
                    sample_id=sid,
                    image_w=cfg.input_size,
                    image_h=cfg.input_size,
                    query=query,
                    box=objects[ref].box,
                )
            )
            rasters.append(raster)
            if blobs:
                _write_sample_blobs(blob_dir / f"{sid}.glob", sid, raster, query, blob_dir)
        scene_idx += 1
    write_annotations(out_dir / "annotations.jsonl", samples)
    np.save(out_dir / "rasters.npy", np.stack(rasters))
    meta = {
        "count": count,
        "input_size": cfg.input_size,
        "profile": cfg.profile,
        "seed": seed,
        "vocab": GRAMMAR_VOCAB,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return out_dir


def _write_sample_blobs(_, sid: str, raster: np.ndarray, query: str, blob_dir: Path) -> None:
    """Model-free feature blobs: per-cell mean color pyramids and a
    bag-of-words query vector over the grammar vocabulary."""
    norm = raster.astype(np.float64) / 255.0
    size = raster.shape[0]
    grids = []
    for stride in (32, 16, 8):
        g = size // stride
        pooled = norm.reshape(g, stride, g, stride, 3).mean(axis=(1, 3))
        grids.append(pooled)
    write_blob(blob_dir / f"{sid}.g1fb", KIND_PYRAMID, grids)
    bow = np.zeros(len(GRAMMAR_VOCAB), dtype=np.float64)
    for tok in query.split():
        bow[GRAMMAR_VOCAB.index(tok)] += 1.0
    write_blob(blob_dir / f"{sid}.query.g1fb", KIND_QUERY, [bow / max(bow.sum(), 1.0)])
