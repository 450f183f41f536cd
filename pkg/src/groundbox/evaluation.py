"""Accuracy-at-IoU scoring of prediction files and the inference timing harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .dataio import Dataset, GroundingSample, PredictionRecord
from .geometry import iou


@dataclass
class EvalReport:
    iou_threshold: float
    correct: int
    total: int
    per_sample_iou: list[tuple[str, float]] = field(default_factory=list)  # sorted by id
    mean_ms: float | None = None

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


def score(
    predictions: list[PredictionRecord],
    annotations: list[GroundingSample],
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Fraction of samples whose prediction reaches IoU >= threshold (inclusive).

    Predictions are clipped to the annotated image bounds before scoring.
    Requires exactly one prediction per annotation; offenders are listed.
    """
    by_id: dict[str, PredictionRecord] = {}
    duplicates = set()
    for p in predictions:
        if p.sample_id in by_id:
            duplicates.add(p.sample_id)
        by_id[p.sample_id] = p
    if duplicates:
        raise ValueError(f"duplicate prediction ids: {sorted(duplicates)}")
    ann_ids = set()
    dup_ann = set()
    for a in annotations:
        if a.sample_id in ann_ids:
            dup_ann.add(a.sample_id)
        ann_ids.add(a.sample_id)
    if dup_ann:
        raise ValueError(f"duplicate annotation ids: {sorted(dup_ann)}")
    missing = sorted(ann_ids - set(by_id))
    if missing:
        raise ValueError(f"annotations without a prediction: {missing}")
    unmatched = sorted(set(by_id) - ann_ids)
    if unmatched:
        raise ValueError(f"predictions without an annotation: {unmatched}")

    per_sample = []
    correct = 0
    for a in annotations:
        pred = by_id[a.sample_id].box.clip(a.image_w, a.image_h)
        v = iou(pred, a.box)
        per_sample.append((a.sample_id, v))
        if v >= iou_threshold:
            correct += 1
    per_sample.sort(key=lambda e: e[0])
    return EvalReport(
        iou_threshold=iou_threshold,
        correct=correct,
        total=len(annotations),
        per_sample_iou=per_sample,
    )


def render_report(report: EvalReport) -> str:
    lines = [
        "metric              value",
        "------------------  ----------",
        f"iou threshold       {report.iou_threshold:.2f}",
        f"correct / total     {report.correct} / {report.total}",
        f"accuracy            {report.accuracy:.4f}",
    ]
    if report.mean_ms is not None:
        lines.append(f"mean inference ms   {report.mean_ms:.3f}")
    return "\n".join(lines)


def render_kv(report: EvalReport) -> str:
    lines = [
        f"iou_threshold={report.iou_threshold:.6f}",
        f"correct={report.correct}",
        f"total={report.total}",
        f"accuracy={report.accuracy:.6f}",
    ]
    if report.mean_ms is not None:
        lines.append(f"mean_ms={report.mean_ms:.3f}")
    return "\n".join(lines)


@dataclass
class TimingReport:
    mean_ms: float
    samples: int
    warmup: int
    config_hash: str

    def render(self) -> str:
        return "\n".join(
            [
                f"mean_ms={self.mean_ms:.3f}",
                f"samples={self.samples}",
                f"warmup={self.warmup}",
                f"config_hash={self.config_hash}",
                # context only; full-scale GPU reference latencies are not a target here
                "reference_full_scale_ms=16-38 (1080Ti-class GPU, large backbone; not asserted)",
            ]
        )


def time_inference(
    model,
    dataset: Dataset,
    vocab: list[str],
    warmup: int = 3,
    config_hash: str = "",
) -> TimingReport:
    """Wall-clock mean per image-query pair over single-sample forwards.

    The first `warmup` (>= 1) iterations are discarded.
    """
    from .model import decode_batch, make_batch  # local import avoids a cycle

    if warmup < 1:
        raise ValueError("warmup must be at least 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("timing needs at least one sample")

    def run_one(i: int) -> None:
        batch = make_batch(dataset, [i], vocab, model.layout.input_size)
        out = model.forward(batch)
        probs = out.probabilities()
        best = probs.argmax(axis=1)
        decode_batch(model.layout, best, out.offsets.data[[0], best[0]])

    for i in range(warmup):
        run_one(i % n)
    start = time.perf_counter()
    for i in range(n):
        run_one(i)
    elapsed = time.perf_counter() - start
    return TimingReport(
        mean_ms=elapsed / n * 1000.0,
        samples=n,
        warmup=warmup,
        config_hash=config_hash,
    )
