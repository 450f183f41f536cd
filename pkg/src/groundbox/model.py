"""Query-conditioned detection model: fusion of visual/text/spatial features,
per-anchor regression, and one confidence softmax over every anchor box."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import ANCHORS_PER_CELL, AnchorLayout
from .autodiff import Tensor
from .dataio import Dataset, PredictionRecord, encode_tokens
from .encoders import FileFeatureProvider, ToyTextEncoder, ToyVisualEncoder
from .errors import ShapeMismatch
from .geometry import Box, letterbox, letterbox_raster
from .spatial import spatial_map

T_CLAMP = 8.0  # |t_w|, |t_h| cap before exp

REG_CHANNELS = 4
HEAD_CHANNELS = REG_CHANNELS + 1


@dataclass
class Batch:
    """Inputs for one forward pass; rasters are letterboxed network-frame arrays."""

    sample_ids: list[str]
    rasters: np.ndarray | None
    token_ids: np.ndarray
    token_mask: np.ndarray


@dataclass
class ModelOutput:
    logits: Tensor  # (B, K) in flat anchor order
    offsets: Tensor  # (B, K, 4) as (t_x, t_y, t_w, t_h)
    pooled: Tensor  # (B, D) mean of fused features over all locations

    def probabilities(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


class GroundingModel:
    """Owns the mapping, projection, fusion, and head parameters.

    Visual and text providers plug in underneath; frozen file-backed providers
    contribute no gradient of their own while these layers keep training.
    """

    def __init__(
        self,
        layout: AnchorLayout,
        d_model: int,
        visual,
        text,
        raw_widths: tuple[int, int, int] | None = None,
        embed_width: int | None = None,
        use_spatial: bool = True,
        seed: int = 0,
        dtype=np.float64,
    ):
        self.layout = layout
        self.d_model = d_model
        self.visual = visual
        self.text = text
        self.use_spatial = use_spatial
        self.dtype = dtype
        rng = np.random.default_rng(seed)

        if raw_widths is None:
            raw_widths = visual.raw_widths()
        if embed_width is None:
            embed_width = text.embed_width
        self.raw_widths = tuple(raw_widths)
        self.embed_width = int(embed_width)

        def init(fan_in, shape):
            return ad.param((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))

        d = d_model
        self.params: dict[str, Tensor] = {}
        for lvl, c_raw in enumerate(self.raw_widths):
            self.params[f"map.{lvl}.w"] = init(c_raw, (c_raw, d))
            self.params[f"map.{lvl}.b"] = ad.param(np.zeros(d, dtype=dtype))
        self.params["txt.proj1.w"] = init(self.embed_width, (self.embed_width, d))
        self.params["txt.proj1.b"] = ad.param(np.zeros(d, dtype=dtype))
        self.params["txt.proj2.w"] = init(d, (d, d))
        self.params["txt.proj2.b"] = ad.param(np.zeros(d, dtype=dtype))
        fuse_in = 2 * d + (8 if use_spatial else 0)
        for lvl in range(3):
            self.params[f"fuse.{lvl}.w"] = init(fuse_in, (fuse_in, d))
            self.params[f"fuse.{lvl}.b"] = ad.param(np.zeros(d, dtype=dtype))
            self.params[f"head.{lvl}.w"] = init(d, (d, ANCHORS_PER_CELL * HEAD_CHANNELS))
            self.params[f"head.{lvl}.b"] = ad.param(
                np.zeros(ANCHORS_PER_CELL * HEAD_CHANNELS, dtype=dtype)
            )
        for enc in (visual, text):
            if hasattr(enc, "params"):
                self.params.update(enc.params)

    # -- parameter groups -------------------------------------------------

    def backbone_params(self) -> list[Tensor]:
        """The visual-encoder portion, eligible for a reduced learning rate."""
        return list(self.visual.params.values()) if hasattr(self.visual, "params") else []

    def main_params(self) -> list[Tensor]:
        backbone = {id(p) for p in self.backbone_params()}
        return [p for p in self.params.values() if id(p) not in backbone]

    # -- forward -----------------------------------------------------------

    def _raw_pyramid(self, batch: Batch) -> list[Tensor]:
        if isinstance(self.visual, FileFeatureProvider):
            return self.visual.forward_pyramid(batch.sample_ids)
        return self.visual.forward(batch.rasters)

    def _raw_query(self, batch: Batch) -> Tensor:
        if isinstance(self.text, FileFeatureProvider):
            return self.text.forward_query(batch.sample_ids)
        return self.text.forward(batch.token_ids, batch.token_mask)

    def encode_query(self, raw: Tensor) -> Tensor:
        p = self.params
        hidden = ad.relu(ad.affine(raw, p["txt.proj1.w"], p["txt.proj1.b"]))
        return ad.affine(hidden, p["txt.proj2.w"], p["txt.proj2.b"])

    def fuse(self, raw_pyramid: list[Tensor], query_raw: Tensor) -> list[Tensor]:
        """Per level: normalize each stream, concatenate, 1x1 affine + ReLU to width D."""
        p = self.params
        query = ad.l2_normalize(self.encode_query(query_raw))
        fused_levels = []
        for lvl, (grid, spec) in enumerate(zip(raw_pyramid, self.layout.levels)):
            if grid.shape[1] != spec.grid_h or grid.shape[2] != spec.grid_w:
                raise ShapeMismatch(
                    f"level {lvl} grid {grid.shape} does not match layout "
                    f"{spec.grid_h}x{spec.grid_w}"
                )
            vis = ad.l2_normalize(ad.relu(ad.affine(grid, p[f"map.{lvl}.w"], p[f"map.{lvl}.b"])))
            parts = [vis, ad.broadcast_spatial(query, spec.grid_h, spec.grid_w)]
            if self.use_spatial:
                smap = spatial_map(spec.grid_w, spec.grid_h)
                norm = smap / np.sqrt((smap * smap).sum(axis=-1, keepdims=True))
                tiled = np.broadcast_to(
                    norm.astype(self.dtype), (grid.shape[0],) + norm.shape
                )
                parts.append(ad.constant(tiled))
            cat = ad.concat(parts, axis=-1)
            fused_levels.append(
                ad.relu(ad.affine(cat, p[f"fuse.{lvl}.w"], p[f"fuse.{lvl}.b"]))
            )
        return fused_levels

    def head(self, fused_levels: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Per-level affine D -> 3*5, gathered in flat anchor order -> logits, offsets."""
        p = self.params
        per_level = []
        for lvl, fused in enumerate(fused_levels):
            raw = ad.affine(fused, p[f"head.{lvl}.w"], p[f"head.{lvl}.b"])
            b, gh, gw, _ = raw.shape
            per_level.append(ad.reshape(raw, (b, gh * gw * ANCHORS_PER_CELL, HEAD_CHANNELS)))
        allk = ad.concat(per_level, axis=1)
        offsets = ad.slice_last(allk, 0, REG_CHANNELS)
        logits = ad.reshape(ad.slice_last(allk, REG_CHANNELS, HEAD_CHANNELS), allk.shape[:2])
        return logits, offsets

    def forward(self, batch: Batch) -> ModelOutput:
        fused = self.fuse(self._raw_pyramid(batch), self._raw_query(batch))
        logits, offsets = self.head(fused)
        flat = [ad.reshape(f, (f.shape[0], 1, f.shape[1] * f.shape[2], f.shape[3])) for f in fused]
        pooled = ad.mean_pool(ad.concat(flat, axis=2))
        return ModelOutput(logits=logits, offsets=offsets, pooled=pooled)

    # -- persistence -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ShapeMismatch(f"checkpoint missing tensors: {sorted(missing)}")
        for name, t in self.params.items():
            arr = arrays[name]
            if tuple(arr.shape) != t.shape:
                raise ShapeMismatch(f"checkpoint tensor {name} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(self.dtype)


def decode(layout: AnchorLayout, k: int, t: np.ndarray) -> Box:
    """One anchor's (t_x, t_y, t_w, t_h) -> corner-form box in the input frame.

    Center: (sigma(t_x) + c_x) * stride, so it stays strictly inside cell k's
    cell; size: anchor side * exp(t) with t clamped to +-8.
    """
    arr = layout.arrays()
    sx = 1.0 / (1.0 + np.exp(-float(t[0])))
    sy = 1.0 / (1.0 + np.exp(-float(t[1])))
    cx = (sx + arr["cell_x"][k]) * arr["stride"][k]
    cy = (sy + arr["cell_y"][k]) * arr["stride"][k]
    w = arr["pw"][k] * np.exp(np.clip(float(t[2]), -T_CLAMP, T_CLAMP))
    h = arr["ph"][k] * np.exp(np.clip(float(t[3]), -T_CLAMP, T_CLAMP))
    return Box.from_center(float(cx), float(cy), float(w), float(h))


def decode_batch(layout: AnchorLayout, ks: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Vectorized decode: ks (N,), ts (N, 4) -> corner boxes (N, 4)."""
    arr = layout.arrays()
    ks = np.asarray(ks, dtype=np.int64)
    sx = 1.0 / (1.0 + np.exp(-ts[:, 0]))
    sy = 1.0 / (1.0 + np.exp(-ts[:, 1]))
    cx = (sx + arr["cell_x"][ks]) * arr["stride"][ks]
    cy = (sy + arr["cell_y"][ks]) * arr["stride"][ks]
    w = arr["pw"][ks] * np.exp(np.clip(ts[:, 2], -T_CLAMP, T_CLAMP))
    h = arr["ph"][ks] * np.exp(np.clip(ts[:, 3], -T_CLAMP, T_CLAMP))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def make_batch(dataset: Dataset, indices: list[int], vocab: list[str], input_size: int) -> Batch:
    """Letterbox rasters into the network frame and encode queries."""
    samples = [dataset.samples[i] for i in indices]
    rasters = None
    if dataset.rasters is not None:
        stacked = []
        for i in indices:
            r, _ = letterbox_raster(dataset.rasters[i], input_size)
            stacked.append(r)
        rasters = np.stack(stacked).astype(np.float64)
    ids, mask = encode_tokens([s.query for s in samples], vocab)
    return Batch(
        sample_ids=[s.sample_id for s in samples],
        rasters=rasters,
        token_ids=ids,
        token_mask=mask,
    )


def predict(
    model: GroundingModel,
    dataset: Dataset,
    vocab: list[str],
    batch_size: int = 64,
) -> list[PredictionRecord]:
    """Exactly one region per sample: global argmax anchor, decoded, mapped back
    to the original image frame."""
    records: list[PredictionRecord] = []
    input_size = model.layout.input_size
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        batch = make_batch(dataset, idx, vocab, input_size)
        out = model.forward(batch)
        probs = out.probabilities()
        best = probs.argmax(axis=1)
        ts = out.offsets.data[np.arange(len(idx)), best]
        boxes = decode_batch(model.layout, best, ts)
        for row, i in enumerate(idx):
            s = dataset.samples[i]
            t = letterbox((s.image_w, s.image_h), input_size)
            records.append(
                PredictionRecord(
                    sample_id=s.sample_id,
                    box=t.invert_box(Box(*boxes[row])),
                    confidence=float(probs[row, best[row]]),
                )
            )
    return records
