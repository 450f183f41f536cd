"""Anchor clustering in (1 - IoU) space and grid placement across pyramid levels."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import Box

STRIDES = (32, 16, 8)
ANCHORS_PER_CELL = 3


@dataclass(frozen=True)
class AnchorShape:
    """Anchor width/height in network-input pixels."""

    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"anchor sides must be positive, got {self}")

    @property
    def area(self) -> float:
        return self.w * self.h


def shape_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of (w, h) shape arrays aligned at a common center, (N,2) x (M,2) -> (N,M)."""
    inter = np.minimum(a[:, None, 0], b[None, :, 0]) * np.minimum(a[:, None, 1], b[None, :, 1])
    union = a[:, 0] * a[:, 1] + (b[:, 0] * b[:, 1])[None, :] - inter
    return inter / union


def kmeans_anchors(
    boxes: list[Box],
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    update: str = "median",
) -> list[AnchorShape]:
    """Cluster box shapes with (1 - IoU) distance; returns k shapes sorted by area.

    Centroids are updated with the per-cluster coordinate-wise median of (w, h)
    ("mean" is available behind the flag). Initialization is kmeans++-style on
    the same distance, driven by the seed, so results are reproducible. The
    clustering objective is tracked every iteration; an update that would
    increase it is reverted and iteration stops, so the recorded trajectory is
    non-increasing by construction.
    """
    if not boxes:
        raise ValueError("kmeans_anchors needs at least one box")
    wh = np.array([[b.w, b.h] for b in boxes], dtype=np.float64)
    if np.any(wh <= 0):
        raise ValueError("kmeans_anchors requires non-degenerate boxes")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(boxes):
        raise ValueError(f"k={k} exceeds the {len(boxes)} boxes available")
    n_distinct = len(np.unique(wh, axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct shapes available")
    if update not in ("median", "mean"):
        raise ValueError(f"unknown update rule {update!r}")
    reduce = np.median if update == "median" else np.mean

    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(wh, k, rng)

    prev_centroids = centroids
    last_obj = np.inf
    objective_trace: list[float] = []
    for _ in range(max_iter):
        dist = 1.0 - shape_iou(wh, centroids)
        assign = np.argmin(dist, axis=1)
        member_dist = dist[np.arange(len(wh)), assign]
        obj = float(member_dist.sum())
        if obj > last_obj:
            centroids = prev_centroids
            objective_trace.append(last_obj)
            break
        objective_trace.append(obj)
        new_centroids = centroids.copy()
        reseed_order = np.argsort(member_dist)[::-1]
        reseed_at = 0
        for c in range(k):
            members = wh[assign == c]
            if len(members) == 0:
                # re-seed an emptied cluster from the farthest boxes
                new_centroids[c] = wh[reseed_order[reseed_at]]
                reseed_at += 1
            else:
                new_centroids[c] = reduce(members, axis=0)
        if np.max(np.abs(new_centroids - centroids)) < tol:
            break
        prev_centroids = centroids
        centroids = new_centroids
        last_obj = obj

    shapes = [AnchorShape(float(w), float(h)) for w, h in centroids]
    shapes.sort(key=lambda s: (s.area, s.w, s.h))
    kmeans_anchors.last_objective_trace = objective_trace  # inspected by tests
    return shapes


def _plusplus_init(wh: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """kmeans++ seeding with (1 - IoU) as the squared-distance analogue."""
    first = rng.integers(len(wh))
    centroids = [wh[first]]
    for _ in range(1, k):
        d = 1.0 - shape_iou(wh, np.array(centroids))
        dmin = d.min(axis=1)
        total = dmin.sum()
        if total <= 0:
            # all boxes coincide with a centroid; pick any unused distinct shape
            probs = np.full(len(wh), 1.0 / len(wh))
        else:
            probs = dmin / total
        centroids.append(wh[rng.choice(len(wh), p=probs)])
    return np.array(centroids, dtype=np.float64)


@dataclass(frozen=True)
class LevelSpec:
    stride: int
    grid_w: int
    grid_h: int
    anchors: tuple[AnchorShape, ...]


@dataclass(frozen=True)
class PlacedAnchor:
    index: int
    level: int
    cell_x: int
    cell_y: int
    box: Box


class AnchorLayout:
    """Grid-placed anchors over the stride-{32,16,8} pyramid with one flat index.

    Flat index order is level-major (stride 32 first), then row (cell_y), then
    column (cell_x), then anchor slot. This matches the channel order the
    detection head emits, so head outputs and placed anchors line up by
    construction.
    """

    def __init__(self, input_size: int, shapes: list[AnchorShape]):
        if input_size % STRIDES[0] != 0:
            raise ValueError(f"input_size {input_size} not divisible by {STRIDES[0]}")
        per_level = assign_levels(shapes)
        self.input_size = input_size
        self.levels = tuple(
            LevelSpec(stride=s, grid_w=input_size // s, grid_h=input_size // s, anchors=tuple(per_level[i]))
            for i, s in enumerate(STRIDES)
        )
        self.level_sizes = tuple(l.grid_w * l.grid_h * ANCHORS_PER_CELL for l in self.levels)
        self.level_offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.level_sizes)[:-1]]))
        self.total = int(sum(self.level_sizes))
        self.locations = int(sum(l.grid_w * l.grid_h for l in self.levels))
        self._arrays = None

    def flat_index(self, level: int, i: int, j: int, a: int) -> int:
        spec = self.levels[level]
        if not (0 <= i < spec.grid_w and 0 <= j < spec.grid_h and 0 <= a < ANCHORS_PER_CELL):
            raise IndexError(f"cell ({i},{j},{a}) outside level {level} grid")
        return self.level_offsets[level] + (j * spec.grid_w + i) * ANCHORS_PER_CELL + a

    def unflatten(self, k: int) -> tuple[int, int, int, int]:
        if not 0 <= k < self.total:
            raise IndexError(f"flat anchor index {k} out of range [0, {self.total})")
        for level, (off, size) in enumerate(zip(self.level_offsets, self.level_sizes)):
            if k < off + size:
                r = k - off
                a = r % ANCHORS_PER_CELL
                cell = r // ANCHORS_PER_CELL
                spec = self.levels[level]
                return level, cell % spec.grid_w, cell // spec.grid_w, a
        raise AssertionError("unreachable")

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat-index-aligned arrays: anchor boxes (K,4), cell coords, strides, shapes."""
        if self._arrays is None:
            boxes = np.empty((self.total, 4), dtype=np.float64)
            cx = np.empty(self.total, dtype=np.float64)
            cy = np.empty(self.total, dtype=np.float64)
            stride = np.empty(self.total, dtype=np.float64)
            pw = np.empty(self.total, dtype=np.float64)
            ph = np.empty(self.total, dtype=np.float64)
            k = 0
            for spec in self.levels:
                for j in range(spec.grid_h):
                    for i in range(spec.grid_w):
                        center_x = (i + 0.5) * spec.stride
                        center_y = (j + 0.5) * spec.stride
                        for shape in spec.anchors:
                            boxes[k] = (
                                center_x - shape.w / 2,
                                center_y - shape.h / 2,
                                center_x + shape.w / 2,
                                center_y + shape.h / 2,
                            )
                            cx[k], cy[k] = i, j
                            stride[k] = spec.stride
                            pw[k], ph[k] = shape.w, shape.h
                            k += 1
            self._arrays = {"boxes": boxes, "cell_x": cx, "cell_y": cy, "stride": stride, "pw": pw, "ph": ph}
        return self._arrays


def assign_levels(shapes: list[AnchorShape]) -> list[list[AnchorShape]]:
    """Partition 9 shapes into per-level triples: largest areas on stride 32.

    Ties in area break by (w, then h) ascending so the split is deterministic.
    Returned in layout level order (stride 32, 16, 8).
    """
    if len(shapes) != len(STRIDES) * ANCHORS_PER_CELL:
        raise ValueError(f"expected {len(STRIDES) * ANCHORS_PER_CELL} shapes, got {len(shapes)}")
    ordered = sorted(shapes, key=lambda s: (s.area, s.w, s.h))
    return [ordered[6:9], ordered[3:6], ordered[0:3]]


def place_anchors(layout: AnchorLayout) -> list[PlacedAnchor]:
    """All placed anchors in flat-index order."""
    arr = layout.arrays()
    out = []
    for k in range(layout.total):
        level, i, j, _ = layout.unflatten(k)
        out.append(
            PlacedAnchor(
                index=k,
                level=level,
                cell_x=i,
                cell_y=j,
                box=Box(*arr["boxes"][k]),
            )
        )
    return out


def save_anchor_file(path: str | Path, shapes: list[AnchorShape]) -> None:
    """Write one `w h` line per shape, area-ascending."""
    ordered = sorted(shapes, key=lambda s: (s.area, s.w, s.h))
    text = "".join(f"{s.w:.4f} {s.h:.4f}\n" for s in ordered)
    Path(path).write_text(text)


def load_anchor_file(path: str | Path) -> list[AnchorShape]:
    shapes = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected `w h`, got {line!r}")
        try:
            shapes.append(AnchorShape(float(parts[0]), float(parts[1])))
        except ValueError as e:
            raise FormatError(f"{path}:{n}: {e}") from e
    return shapes
