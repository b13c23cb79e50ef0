"""Dataset loading, heatmap targets, the training loop and validation AP."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DatasetError, NumericalError, ShapeError
from .heatmap import (
    DEFAULT_MIN_PROBABILITY,
    DEFAULT_SIGMA,
    DEFAULT_WINDOW,
    DetectedKeypoint,
    average_precision,
    extract_keypoints,
    render_target,
)
from .nnet import AdamState, Checkpoint, KeypointNet, ModelSpec, adam_step, save_checkpoint
from .nnet.layers import bce_loss_backward, bce_loss_forward
from .render.dataset import load_annotations, read_image
from .render.raster import KeypointAnnotation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    learning_rate: float = 1e-3
    sigma_px: float = DEFAULT_SIGMA
    resolution: int = 128
    val_fraction: float = 0.1
    seed: int = 0
    base_channels: int = 8
    depth: int = 3
    bottleneck_blocks: int = 2
    head_prior: float = 0.01  # initial mean heatmap output; <= 0 keeps a zero head bias
    min_probability: float = DEFAULT_MIN_PROBABILITY
    window: int = DEFAULT_WINDOW
    eval_batch_size: int = 16
    strict: bool = True  # single BLAS thread, fixed order: bit-reproducible
    max_steps: int | None = None  # stop early after this many optimizer steps

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction", f"must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be positive")
        if not self.sigma_px > 0:
            raise ConfigError("sigma_px", "must be positive")
        if self.resolution % 2 ** self.depth:
            raise ConfigError("resolution", f"must be divisible by 2**depth = {2 ** self.depth}")
        if not self.head_prior < 1:
            raise ConfigError("head_prior", "must be < 1")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(base_channels=self.base_channels, depth=self.depth,
                         bottleneck_blocks=self.bottleneck_blocks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown training config key")
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    annotation: KeypointAnnotation

    @property
    def image_id(self) -> str:
        return self.annotation.image_id

    # duck-typed truth for heatmap.average_precision
    @property
    def corners_px(self):
        return self.annotation.corners_px

    @property
    def visible(self):
        return self.annotation.visible


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_ap: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_ap: float = 0.0
    wall_time_s: float = 0.0
    checkpoint_path: str | None = None
    last_checkpoint_path: str | None = None
    steps: int = 0
    config: dict = field(default_factory=dict)
    model: KeypointNet | None = field(default=None, repr=False, compare=False)  # not serialised

    @property
    def final_val_ap(self) -> float:
        return self.epochs[-1].val_ap if self.epochs else 0.0

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("model", "epochs")}
        d["epochs"] = [asdict(r) for r in self.epochs]
        d["final_val_ap"] = self.final_val_ap
        return d


# ------------------------------------------------------------------ data


def _resize(img_u8: np.ndarray, res: int) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.fromarray(img_u8).resize((res, res), Image.BILINEAR))


def load_dataset(path, resolution: int | None = None) -> list[Sample]:
    """Loads a generated dataset directory (or its manifest.json).

    Images whose size differs from ``resolution`` are bilinearly resampled;
    annotations follow the pixel-centre mapping ``u' = (u + 0.5) * s - 0.5``.

    Raises:
        DatasetError: missing or unreadable files, malformed JSON, or a
            visible corner outside its image. The message names the file.
    """
    root = Path(path)
    if root.is_file():
        root = root.parent
    records = load_annotations(root)
    samples = []
    for rec in records:
        img = read_image(root / rec["file"])
        h, w = img.shape[:2]
        corners = np.asarray(rec["corners_px"], dtype=np.float64).reshape(-1, 2)
        visible = tuple(bool(v) for v in rec["visible"])
        if len(corners) != 4 or len(visible) != 4:
            raise DatasetError(f"{rec['file']}: expected 4 corners and 4 visibility flags")
        for (u, v), vis in zip(corners, visible):
            if vis and not (0 <= u < w and 0 <= v < h):
                raise DatasetError(f"{rec['file']}: visible corner ({u:.2f}, {v:.2f}) outside the image")
        res = resolution or w
        if (h, w) != (res, res):
            if h != w:
                raise DatasetError(f"{rec['file']}: non-square image {w}x{h}")
            img = _resize(img, res)
            corners = (corners + 0.5) * (res / w) - 0.5
        ann = KeypointAnnotation(
            image_id=str(rec["image_id"]),
            corners_px=tuple((float(u), float(v)) for u, v in corners),
            visible=visible,
            towel_size_m=tuple(rec.get("towel_size_m", (0.0, 0.0))),
        )
        chw = np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)
        samples.append(Sample(chw, ann))
    return samples


def make_target(ann: KeypointAnnotation, resolution: int, sigma: float) -> np.ndarray:
    """Heatmap target from the visible corners only."""
    pts = [c for c, vis in zip(ann.corners_px, ann.visible) if vis]
    return render_target(pts, sigma, resolution, dtype=np.float32)


def split_dataset(samples: Sequence[Sample], val_fraction: float, seed: int):
    n = len(samples)
    if n < 2:
        raise DatasetError("need at least 2 samples to split into train and validation")
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 1])).permutation(n)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [samples[i] for i in train], [samples[i] for i in val]


# -------------------------------------------------------------- inference


def predict(model: KeypointNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Heatmaps (N, H, W) for images (N, 3, H, W), evaluated in fixed batches."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.forward(images[i:i + batch_size])[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=model.dtype)


def _validate(model, samples, config: TrainConfig):
    if not samples:
        return 0.0, 1.0, {}
    images = np.stack([s.image for s in samples])
    heat = predict(model, images, config.eval_batch_size)
    targets = np.stack([make_target(s.annotation, config.resolution, config.sigma_px) for s in samples])
    loss, _ = bce_loss_forward(heat, targets)
    dets = {s.image_id: extract_keypoints(h, config.min_probability, config.window) for s, h in zip(samples, heat)}
    truths = {s.image_id: s for s in samples}
    return loss, average_precision(dets, truths, 2.0), dets


def evaluate(
    samples: Sequence[Sample],
    checkpoint: Checkpoint | KeypointNet,
    min_probability: float = DEFAULT_MIN_PROBABILITY,
    window: int = DEFAULT_WINDOW,
    thresholds: Sequence[float] = (2.0,),
    batch_size: int = 16,
) -> dict:
    """AP of ``checkpoint`` on ``samples`` at each pixel threshold.

    Raises:
        ShapeError: if the images do not fit the model.
    """
    model = checkpoint if isinstance(checkpoint, KeypointNet) else checkpoint.model()
    if not samples:
        raise DatasetError("evaluation set is empty")
    images = np.stack([s.image for s in samples])
    model.spec.check_input(images.shape)
    heat = predict(model, images, batch_size)
    dets = {s.image_id: extract_keypoints(h, min_probability, window) for s, h in zip(samples, heat)}
    truths = {s.image_id: s for s in samples}
    aps = {f"{t:g}": average_precision(dets, truths, t) for t in thresholds}
    return {
        "ap": aps.get("2", next(iter(aps.values()))),
        "ap_at": aps,
        "n_images": len(samples),
        "n_detections": int(sum(len(d) for d in dets.values())),
        "min_probability": min_probability,
        "window": window,
    }


def detections_from_heatmap(heat: np.ndarray, min_probability=DEFAULT_MIN_PROBABILITY,
                            window=DEFAULT_WINDOW) -> list[DetectedKeypoint]:
    return extract_keypoints(heat, min_probability, window)


# ---------------------------------------------------------------- training


def _init_model(config: TrainConfig) -> KeypointNet:
    model = KeypointNet(config.model_spec(), seed=config.seed)
    if config.head_prior > 0:
        # start from the target's sparsity instead of p = 0.5 everywhere
        model.params["head.b"][...] = math.log(config.head_prior / (1 - config.head_prior))
    return model


def _write_epoch_csv(path: Path, records: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_ap", "seconds"])
        for r in records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_ap), f"{r.seconds:.3f}"])


def train(samples: Sequence[Sample], config: TrainConfig | None = None, out_dir=None,
          val_samples: Sequence[Sample] | None = None) -> TrainReport:
    """Trains the keypoint network with BCE + Adam and tracks val AP@2px per epoch.

    When ``val_samples`` is None the data is split by ``config.val_fraction``.
    With ``out_dir`` set, writes ``best.ckpt``, ``last.ckpt``, ``report.json``
    and ``metrics.csv`` there.

    Raises:
        NumericalError: the loss became NaN/Inf; the message names epoch and batch.
    """
    config = config or TrainConfig()
    if not samples:
        raise DatasetError("training set is empty")
    if val_samples is None:
        train_set, val_set = split_dataset(samples, config.val_fraction, config.seed)
    else:
        train_set, val_set = list(samples), list(val_samples)
    res = config.resolution
    for s in train_set[:1]:
        if s.image.shape != (3, res, res):
            raise ShapeError(f"images are {s.image.shape}, config expects (3, {res}, {res})")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    limits = threadpool_limits(limits=1, user_api="blas") if config.strict else nullcontext()
    with limits:
        return _train_loop(train_set, val_set, config, out)


def _train_loop(train_set, val_set, config: TrainConfig, out: Path | None) -> TrainReport:
    start = time.perf_counter()
    model = _init_model(config)
    adam = AdamState.zeros_like(model.params)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 2]))
    images = np.stack([s.image for s in train_set])
    targets = np.stack([make_target(s.annotation, config.resolution, config.sigma_px) for s in train_set])[:, None]

    report = TrainReport(config=config.to_dict())
    best_ap = -1.0
    steps = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses = []
        for b, i in enumerate(range(0, len(order), config.batch_size)):
            idx = order[i:i + config.batch_size]
            try:
                pred = model.forward(images[idx], keep_tape=True)
            except NumericalError as e:
                raise NumericalError(f"non-finite model output at epoch {epoch}, batch {b}") from e
            loss, cache = bce_loss_forward(pred, targets[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"loss is {loss} at epoch {epoch}, batch {b}")
            grads = model.backward(bce_loss_backward(cache))
            adam_step(model.params, grads, adam, lr=config.learning_rate)
            losses.append(loss)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        val_loss, val_ap, _ = _validate(model, val_set, config)
        rec = EpochRecord(epoch, float(np.mean(losses)), float(val_loss), float(val_ap), time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("epoch %d  train %.5f  val %.5f  AP@2px %.4f  (%.1fs)",
                 epoch, rec.train_loss, rec.val_loss, rec.val_ap, rec.seconds)

        ckpt = Checkpoint(
            spec=model.spec, params=model.params, adam=adam,
            optimizer={"name": "adam", "lr": config.learning_rate, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
            rng_state=rng.bit_generator.state,
            meta={"epoch": epoch, "val_ap": val_ap, "train_config": config.to_dict()},
        )
        if val_ap > best_ap:
            best_ap = val_ap
            report.best_epoch, report.best_val_ap = epoch, val_ap
            if out is not None:
                save_checkpoint(out / "best.ckpt", ckpt)
                report.checkpoint_path = str(out / "best.ckpt")
        if out is not None:
            save_checkpoint(out / "last.ckpt", ckpt)
            report.last_checkpoint_path = str(out / "last.ckpt")
            _write_epoch_csv(out / "metrics.csv", report.epochs)
        if config.max_steps is not None and steps >= config.max_steps:
            break

    report.steps = steps
    report.wall_time_s = time.perf_counter() - start
    if out is not None:
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    report.model = model
    return report
