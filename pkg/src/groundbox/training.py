"""Target assignment, the composite grounding loss, and the training loop."""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .anchors import AnchorLayout, load_anchor_file
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .config import TrainConfig, save_config
from .dataio import Dataset, build_vocab, encode_tokens, tokenize
from .encoders import (
    KIND_PYRAMID,
    KIND_QUERY,
    FileFeatureProvider,
    ToyTextEncoder,
    ToyVisualEncoder,
)
from .errors import TrainingDiverged
from .geometry import Box, iou_matrix, letterbox, letterbox_raster
from .model import Batch, GroundingModel, ModelOutput, T_CLAMP
from .optim import PolynomialSchedule, RmsProp

log = logging.getLogger(__name__)

SIGMA_EPS = 1e-6  # clamp for the inverse-sigmoid argument at cell boundaries
LATERAL_TOKENS = frozenset({"left", "right"})


@dataclass(frozen=True)
class TrainTarget:
    anchor_index: int
    offsets: np.ndarray  # (t_x, t_y, t_w, t_h)


def assign_targets(gt_boxes: np.ndarray, layout: AnchorLayout) -> tuple[np.ndarray, np.ndarray]:
    """Positive anchor index and regression offsets for each input-frame gt box.

    The positive anchor is the placed anchor with the highest IoU against the
    gt box; ties break toward the lowest flat index. Offsets invert the decode
    parameterization, with the inverse-sigmoid argument clamped to
    [1e-6, 1 - 1e-6] for centers that fall on a cell boundary.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64)
    w = gt[:, 2] - gt[:, 0]
    h = gt[:, 3] - gt[:, 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("target assignment requires non-degenerate gt boxes")
    arr = layout.arrays()
    ious = iou_matrix(gt, arr["boxes"])
    k = ious.argmax(axis=1)
    stride = arr["stride"][k]
    fx = (gt[:, 0] + gt[:, 2]) / 2 / stride - arr["cell_x"][k]
    fy = (gt[:, 1] + gt[:, 3]) / 2 / stride - arr["cell_y"][k]
    fx = np.clip(fx, SIGMA_EPS, 1.0 - SIGMA_EPS)
    fy = np.clip(fy, SIGMA_EPS, 1.0 - SIGMA_EPS)
    offsets = np.stack(
        [
            np.log(fx / (1.0 - fx)),
            np.log(fy / (1.0 - fy)),
            np.clip(np.log(w / arr["pw"][k]), -T_CLAMP, T_CLAMP),
            np.clip(np.log(h / arr["ph"][k]), -T_CLAMP, T_CLAMP),
        ],
        axis=1,
    )
    return k, offsets


def assign_target(gt: Box, layout: AnchorLayout) -> TrainTarget:
    k, offsets = assign_targets(gt.as_array()[None, :], layout)
    return TrainTarget(anchor_index=int(k[0]), offsets=offsets[0])


def grounding_loss(
    output: ModelOutput,
    anchor_idx: np.ndarray,
    target_offsets: np.ndarray,
    lambda_coord: float,
    rows: int | None = None,
) -> Tensor:
    """Cross entropy over all anchors plus weighted squared offset error at the
    positive anchor only, averaged over the batch.

    `rows` restricts the loss to the first rows of the output (the rest of the
    forward batch may carry triplet partners).
    """
    logits, offsets = output.logits, output.offsets
    if rows is not None and rows != logits.shape[0]:
        sel = np.arange(rows)
        logits = ad.take_rows(logits, sel)
        offsets = ad.take_rows(offsets, sel)
    n = logits.shape[0]
    ce = ad.softmax_cross_entropy(logits, anchor_idx)
    picked = ad.gather_rows(offsets, anchor_idx)
    sq = ad.squared_error(picked, ad.constant(np.asarray(target_offsets, dtype=picked.data.dtype)))
    return ad.weighted_sum([ad.mean_all(ce), ad.sum_all(sq)], [1.0, lambda_coord / n])


def triplet_regularizer(
    f_anchor: Tensor, f_pos: Tensor, f_neg: Tensor, margin: float, w_reg: float = 1.0
) -> Tensor:
    """Hinge on pooled-feature distances, summed over the triplets, scaled by w_reg:

        sum_i [ ||f_a - f_p||^2 - ||f_a - f_n||^2 + margin ]_+
    """
    d_pos = ad.squared_distance(f_anchor, f_pos)
    d_neg = ad.squared_distance(f_anchor, f_neg)
    return ad.scale(ad.sum_all(ad.hinge(ad.add_const(ad.sub(d_pos, d_neg), margin))), w_reg)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    run_dir: Path
    final_checkpoint: Path
    losses: list[float]
    model: GroundingModel
    vocab: list[str]
    layout: AnchorLayout


def np_dtype(cfg: TrainConfig):
    return np.float64 if cfg.dtype == "float64" else np.float32


def build_model(
    cfg: TrainConfig,
    layout: AnchorLayout,
    dataset: Dataset,
    vocab: list[str],
    seed: int,
) -> GroundingModel:
    dtype = np_dtype(cfg)
    seeds = np.random.SeedSequence(seed).generate_state(3)
    raw_widths = None
    embed_width = None
    if cfg.visual_provider == "file":
        if dataset.blob_dir is None:
            raise ValueError("visual_provider=file needs a blobs/ directory in the dataset")
        visual = FileFeatureProvider(dataset.blob_dir, KIND_PYRAMID)
        probe = visual.load(dataset.samples[0].sample_id)
        raw_widths = tuple(a.shape[2] for a in probe)
        for arr, spec in zip(probe, layout.levels):
            if arr.shape[:2] != (spec.grid_h, spec.grid_w):
                raise ValueError(
                    f"pyramid blob grid {arr.shape[:2]} does not match layout "
                    f"{spec.grid_h}x{spec.grid_w} at stride {spec.stride}"
                )
    else:
        in_channels = dataset.rasters.shape[3] if dataset.rasters is not None else 3
        visual = ToyVisualEncoder(
            cfg.input_size,
            cfg.visual_channels,
            in_channels=in_channels,
            rng=np.random.default_rng(int(seeds[0])),
            dtype=dtype,
        )
    if cfg.text_provider == "file":
        if dataset.blob_dir is None:
            raise ValueError("text_provider=file needs a blobs/ directory in the dataset")
        text = FileFeatureProvider(dataset.blob_dir, KIND_QUERY)
        embed_width = int(text.load(dataset.samples[0].sample_id)[0].shape[0])
    else:
        text = ToyTextEncoder(
            len(vocab), cfg.embed_width, rng=np.random.default_rng(int(seeds[1])), dtype=dtype
        )
    return GroundingModel(
        layout,
        cfg.d_model,
        visual,
        text,
        raw_widths=raw_widths,
        embed_width=embed_width,
        use_spatial=cfg.use_spatial,
        seed=int(seeds[2]),
        dtype=dtype,
    )


class _TripletIndex:
    """Positive/negative bag lookup over the dataset.

    Samples whose ids share the prefix before the final hyphen are treated as
    views of the same image. Positives share the image and the gt box under a
    different query; intra-image negatives share the image with a different
    box; inter-image negatives come from other images.
    """

    def __init__(self, dataset: Dataset):
        def image_key(sid: str) -> str:
            return sid.rsplit("-", 1)[0] if "-" in sid else sid

        def box_key(b: Box) -> tuple:
            return tuple(np.round([b.x1, b.y1, b.x2, b.y2], 6))

        self.image_keys = [image_key(s.sample_id) for s in dataset.samples]
        by_image: dict[str, list[int]] = {}
        for i, key in enumerate(self.image_keys):
            by_image.setdefault(key, []).append(i)
        self.positives: list[list[int]] = []
        self.intra: list[list[int]] = []
        for i, s in enumerate(dataset.samples):
            mates = by_image[self.image_keys[i]]
            bk = box_key(s.box)
            self.positives.append(
                [j for j in mates if j != i and box_key(dataset.samples[j].box) == bk
                 and dataset.samples[j].query != s.query]
            )
            self.intra.append(
                [j for j in mates if box_key(dataset.samples[j].box) != bk]
            )
        self.n = len(dataset.samples)

    def sample(self, anchor: int, use_intra: bool, rng: np.random.Generator) -> tuple[int, int] | None:
        """(positive index, negative index) or None when the anchor has no positives."""
        if not self.positives[anchor]:
            return None
        pos = int(rng.choice(self.positives[anchor]))
        if use_intra and self.intra[anchor]:
            neg = int(rng.choice(self.intra[anchor]))
        else:
            neg = int(rng.integers(self.n))
            while self.image_keys[neg] == self.image_keys[anchor]:
                neg = int(rng.integers(self.n))
        return pos, neg


def _prepare_sample(
    dataset: Dataset, i: int, input_size: int, flip: bool, dtype
) -> tuple[np.ndarray | None, np.ndarray]:
    """Letterboxed raster (or None) and the network-frame gt box for one sample."""
    s = dataset.samples[i]
    box = s.box
    raster = None
    if dataset.rasters is not None:
        raster = dataset.rasters[i]
        if flip:
            raster = raster[:, ::-1, :]
    if flip:
        box = Box(s.image_w - s.box.x2, s.box.y1, s.image_w - s.box.x1, s.box.y2)
    if raster is not None:
        raster, t = letterbox_raster(raster, input_size)
        raster = raster.astype(dtype)
    else:
        t = letterbox((s.image_w, s.image_h), input_size)
    return raster, t.apply_box(box).as_array()


def train(dataset: Dataset, cfg: TrainConfig, run_dir: str | Path) -> TrainResult:
    """Batched RMSProp with polynomial LR decay; deterministic given cfg.seed.

    Writes the resolved config, vocabulary, anchors, and checkpoints into
    run_dir; aborts on a non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    layout = AnchorLayout(cfg.input_size, load_anchor_file(cfg.anchors))
    vocab = build_vocab(dataset.samples)
    log.info("resolved config (hash %s): %s", cfg.content_hash(), cfg.resolved())
    save_config(run_dir / "resolved_config.yaml", cfg)
    (run_dir / "vocab.txt").write_text("".join(t + "\n" for t in vocab))
    if Path(cfg.anchors).resolve() != (run_dir / "anchors.txt").resolve():
        shutil.copyfile(cfg.anchors, run_dir / "anchors.txt")

    seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
    model = build_model(cfg, layout, dataset, vocab, seed=int(seeds[0]))
    shuffle_rng = np.random.default_rng(int(seeds[1]))
    flip_rng = np.random.default_rng(int(seeds[2]))
    triplet_rng = np.random.default_rng(int(seeds[3]))

    if cfg.flip and dataset.rasters is None and cfg.visual_provider == "file":
        raise ValueError("flip augmentation requires raster data; disable flip for file features")

    opt = RmsProp()
    opt.register(model.main_params(), 1.0)
    opt.register(model.backbone_params(), cfg.visual_lr_mult)
    schedule = PolynomialSchedule(cfg.lr, cfg.steps, power=1.0)

    flippable = [
        cfg.flip and not (LATERAL_TOKENS & set(tokenize(s.query))) for s in dataset.samples
    ]
    use_triplet = cfg.triplet and cfg.w_reg > 0
    trip_index = _TripletIndex(dataset) if use_triplet else None

    dtype = np_dtype(cfg)
    order: list[int] = []
    losses: list[float] = []
    neg_toggle = 0
    for step in range(cfg.steps):
        while len(order) < cfg.batch:
            order.extend(shuffle_rng.permutation(len(dataset)).tolist())
        idxs = order[: cfg.batch]
        order = order[cfg.batch :]

        flips = [flippable[i] and flip_rng.random() < 0.5 for i in idxs]
        triplet_rows: list[tuple[int, int, int]] = []  # (anchor row, pos row, neg row)
        extra: list[int] = []
        if use_triplet:
            for row, i in enumerate(idxs):
                if len(triplet_rows) == cfg.triplets_per_batch:
                    break
                drawn = trip_index.sample(i, use_intra=neg_toggle % 2 == 0, rng=triplet_rng)
                neg_toggle += 1
                if drawn is None:
                    continue
                pos, neg = drawn
                triplet_rows.append((row, cfg.batch + len(extra), cfg.batch + len(extra) + 1))
                extra.extend([pos, neg])

        all_idx = idxs + extra
        all_flips = flips + [False] * len(extra)
        rasters = []
        gts = np.empty((cfg.batch, 4))
        for row, (i, fl) in enumerate(zip(all_idx, all_flips)):
            raster, gt_net = _prepare_sample(dataset, i, cfg.input_size, fl, dtype)
            if raster is not None:
                rasters.append(raster)
            if row < cfg.batch:
                gts[row] = gt_net
        ids, mask = encode_tokens([dataset.samples[i].query for i in all_idx], vocab)
        batch = Batch(
            sample_ids=[dataset.samples[i].sample_id for i in all_idx],
            rasters=np.stack(rasters) if rasters else None,
            token_ids=ids,
            token_mask=mask,
        )
        anchor_idx, target_offsets = assign_targets(gts, layout)

        ad.zero_grads(opt.params)
        out = model.forward(batch)
        loss = grounding_loss(out, anchor_idx, target_offsets, cfg.lambda_coord, rows=cfg.batch)
        if triplet_rows:
            rows = np.array(triplet_rows, dtype=np.int64)
            reg = triplet_regularizer(
                ad.take_rows(out.pooled, rows[:, 0]),
                ad.take_rows(out.pooled, rows[:, 1]),
                ad.take_rows(out.pooled, rows[:, 2]),
                cfg.margin,
                cfg.w_reg,
            )
            loss = ad.weighted_sum([loss, reg], [1.0, 1.0])
        value = float(loss.data)
        lr = schedule.lr(step)
        if not np.isfinite(value):
            raise TrainingDiverged(f"step {step}: non-finite loss, last lr {lr:.3e}")
        losses.append(value)
        ad.backward(loss)
        opt.step(lr)

        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("step %d/%d loss %.4f lr %.3e", step, cfg.steps, value, lr)
        if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
            save_checkpoint(run_dir / f"step_{step + 1:06d}.g1ck", model.state_arrays())

    final = run_dir / "final.g1ck"
    save_checkpoint(final, model.state_arrays())
    return TrainResult(
        run_dir=run_dir,
        final_checkpoint=final,
        losses=losses,
        model=model,
        vocab=vocab,
        layout=layout,
    )


def load_run(run_dir: str | Path, dataset: Dataset, checkpoint: str | Path | None = None):
    """Rebuild the model of a finished run for prediction or analysis."""
    from .checkpoint import load_checkpoint
    from .config import load_config

    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "resolved_config.yaml")
    cfg.anchors = str(run_dir / "anchors.txt")
    vocab = (run_dir / "vocab.txt").read_text().splitlines()
    layout = AnchorLayout(cfg.input_size, load_anchor_file(cfg.anchors))
    model = build_model(cfg, layout, dataset, vocab, seed=0)
    model.load_state(load_checkpoint(checkpoint or run_dir / "final.g1ck"))
    return model, vocab, layout, cfg
