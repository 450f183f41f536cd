"""Hit-rate analysis of ranked region-proposal sets against ground truth."""

from __future__ import annotations

import numpy as np

from .dataio import Dataset, GroundingSample
from .geometry import Box, iou_matrix


def hit_rate(
    proposals: dict[str, list[Box]],
    annotations: list[GroundingSample],
    top_n: int,
    iou_threshold: float = 0.5,
) -> float:
    """Fraction of gt regions hit by the top-N proposals of their sample.

    A gt region counts as hit when its IoU with any of the top-N candidates is
    strictly greater than the threshold (note: strict, unlike the inclusive
    rule used for single-prediction accuracy). Samples with no proposal list
    count as misses.
    """
    if top_n < 1:
        raise ValueError("top_n must be at least 1")
    if not annotations:
        raise ValueError("hit rate needs at least one annotation")
    hits = 0
    for a in annotations:
        cands = proposals.get(a.sample_id, [])[:top_n]
        if not cands:
            continue
        arr = np.array([[b.x1, b.y1, b.x2, b.y2] for b in cands])
        best = iou_matrix(a.box.as_array()[None, :], arr).max()
        if best > iou_threshold:
            hits += 1
    return hits / len(annotations)


def model_as_proposer(
    model, dataset: Dataset, vocab: list[str], top_n: int, batch_size: int = 64
) -> tuple[dict[str, list[Box]], dict[str, list[float]]]:
    """Top-N anchors by confidence, decoded and mapped to the original frame."""
    from .geometry import letterbox
    from .model import decode_batch, make_batch

    n_keep = min(top_n, model.layout.total)
    proposals: dict[str, list[Box]] = {}
    scores: dict[str, list[float]] = {}
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        batch = make_batch(dataset, idx, vocab, model.layout.input_size)
        out = model.forward(batch)
        probs = out.probabilities()
        for row, i in enumerate(idx):
            s = dataset.samples[i]
            order = np.argsort(-probs[row], kind="stable")[:n_keep]
            ts = out.offsets.data[row, order]
            boxes = decode_batch(model.layout, order, ts)
            t = letterbox((s.image_w, s.image_h), model.layout.input_size)
            proposals[s.sample_id] = [t.invert_box(Box(*b)) for b in boxes]
            scores[s.sample_id] = [float(probs[row, k]) for k in order]
    return proposals, scores


def render_hit_table(rates: dict[str, float], top_n: int, iou_threshold: float) -> str:
    """Method-by-rate grid, one row per proposal source."""
    width = max([len(m) for m in rates] + [6])
    head = f"{'method':<{width}}  hit rate (N={top_n}, IoU>{iou_threshold:g})"
    rows = [f"{m:<{width}}  {r * 100:.2f}" for m, r in rates.items()]
    return "\n".join([head, "-" * len(head)] + rows)
