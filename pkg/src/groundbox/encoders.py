"""Feature providers: trainable toy encoders and frozen file-loaded features.

The toy encoders stand in for a pre-trained detection backbone and a large
language model at desk scale. Both emit *raw* features; the mapping layers
that bring every source to the shared model width live in the model, so
frozen file-loaded features still receive gradient through those layers.

Feature-blob file format (all integers little-endian u32):

    magic "G1FB" | version | kind (1 = pyramid, 2 = query) | tensor count
    per tensor: rank | dims... | float64 values (LE)

A pyramid blob carries three (H, W, C) grids in level order (stride 32, 16,
8); a query blob carries one (E,) vector.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ShapeMismatch

BLOB_MAGIC = b"G1FB"
BLOB_VERSION = 1
KIND_PYRAMID = 1
KIND_QUERY = 2

PATCH = 8  # pixels folded per cell of the finest grid


def _init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ToyVisualEncoder:
    """Strided per-patch affine+ReLU stack producing the three raw grids.

    Stage 1 folds 8x8 pixel patches into vectors and maps them to the finest
    grid; each later stage folds 2x2 cells of the previous one. Channel widths
    are given in level order (stride 32, 16, 8), coarsest first.
    """

    def __init__(self, input_size: int, channels: tuple[int, int, int] = (32, 24, 16),
                 in_channels: int = 3, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        if input_size % 32 != 0:
            raise ValueError(f"input_size {input_size} must be divisible by 32")
        self.input_size = input_size
        self.channels = channels
        c32, c16, c8 = channels
        w8 = PATCH * PATCH * in_channels
        self.params = {
            "vis.s8.w": ad.param(_init(rng, w8, (w8, c8), dtype)),
            "vis.s8.b": ad.param(np.zeros(c8, dtype=dtype)),
            "vis.s16.w": ad.param(_init(rng, 4 * c8, (4 * c8, c16), dtype)),
            "vis.s16.b": ad.param(np.zeros(c16, dtype=dtype)),
            "vis.s32.w": ad.param(_init(rng, 4 * c16, (4 * c16, c32), dtype)),
            "vis.s32.b": ad.param(np.zeros(c32, dtype=dtype)),
        }

    def raw_widths(self) -> tuple[int, int, int]:
        return self.channels

    def forward(self, rasters: np.ndarray) -> list[Tensor]:
        """(B, S, S, C) rasters -> raw grids in level order (stride 32, 16, 8)."""
        if rasters.ndim != 4 or rasters.shape[1] != self.input_size or rasters.shape[2] != self.input_size:
            raise ShapeMismatch(
                f"expected rasters (B, {self.input_size}, {self.input_size}, C), got {rasters.shape}"
            )
        p = self.params
        x = ad.constant(rasters)
        f8 = ad.relu(ad.affine(ad.space_to_depth(x, PATCH), p["vis.s8.w"], p["vis.s8.b"]))
        f16 = ad.relu(ad.affine(ad.space_to_depth(f8, 2), p["vis.s16.w"], p["vis.s16.b"]))
        f32 = ad.relu(ad.affine(ad.space_to_depth(f16, 2), p["vis.s32.w"], p["vis.s32.b"]))
        return [f32, f16, f8]


class ToyTextEncoder:
    """Mean of learned token embeddings; projection to model width happens in the model."""

    def __init__(self, vocab_size: int, embed_width: int = 16,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.vocab_size = vocab_size
        self.embed_width = embed_width
        self.params = {"txt.embed": ad.param(rng.standard_normal((vocab_size, embed_width)).astype(dtype))}

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        if np.any(np.asarray(ids) >= self.vocab_size) or np.any(np.asarray(ids) < 0):
            raise ValueError("token id outside vocabulary; map unknown tokens to the UNK id first")
        return ad.embedding_mean(self.params["txt.embed"], ids, mask)


def write_blob(path: str | Path, kind: int, arrays: list[np.ndarray]) -> None:
    if kind not in (KIND_PYRAMID, KIND_QUERY):
        raise ValueError(f"unknown blob kind {kind}")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<III", BLOB_VERSION, kind, len(arrays)))
        for arr in arrays:
            arr = np.asarray(arr)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_blob(path: str | Path) -> tuple[int, list[np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != BLOB_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {BLOB_MAGIC!r}")
    version, kind, count = struct.unpack_from("<III", blob, 4)
    if version != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported blob version {version}")
    if kind not in (KIND_PYRAMID, KIND_QUERY):
        raise FormatError(f"{path}: unknown blob kind {kind}")
    off = 16
    arrays = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy().reshape(dims))
        off += 8 * n
    if kind == KIND_PYRAMID:
        if count != 3 or any(a.ndim != 3 for a in arrays):
            raise FormatError(f"{path}: pyramid blob needs three rank-3 grids, got "
                              f"{count} tensors of ranks {[a.ndim for a in arrays]}")
    else:
        if count != 1 or arrays[0].ndim != 1:
            raise FormatError(f"{path}: query blob needs one rank-1 vector, got "
                              f"{count} tensors of ranks {[a.ndim for a in arrays]}")
    return kind, arrays


class FileFeatureProvider:
    """Loads per-sample feature blobs named `<sample id>.g1fb` from a directory.

    Loaded features are frozen: they never receive gradient, mirroring an
    offline-computed backbone or language-model embedding.
    """

    def __init__(self, blob_dir: str | Path, kind: int):
        self.blob_dir = Path(blob_dir)
        self.kind = kind

    def load(self, sample_id: str) -> list[np.ndarray]:
        path = self.blob_dir / f"{sample_id}.g1fb"
        kind, arrays = read_blob(path)
        if kind != self.kind:
            raise FormatError(f"{path}: expected blob kind {self.kind}, found {kind}")
        return arrays

    def forward_pyramid(self, sample_ids: list[str]) -> list[Tensor]:
        """Stack per-sample pyramid blobs into batched frozen grids."""
        per_level: list[list[np.ndarray]] = [[], [], []]
        for sid in sample_ids:
            arrays = self.load(sid)
            for lvl, arr in enumerate(arrays):
                per_level[lvl].append(arr)
        return [ad.constant(np.stack(grids)) for grids in per_level]

    def forward_query(self, sample_ids: list[str]) -> Tensor:
        return ad.constant(np.stack([self.load(sid)[0] for sid in sample_ids]))
