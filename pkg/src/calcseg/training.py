"""Masked BCE with online hard negative mining, SGD with classic momentum,
and rotation/flip augmentation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import model as M
from .tensor import sigmoid
from .errors import ConfigError, DataError, DegenerateBatchError, DimensionMismatchError, NumericalError

log = logging.getLogger(__name__)

TRAINING_LOG_HEADER = (
    "# calcseg training log v1: one record per epoch; loss is the mean over the epoch's steps "
    "of the masked BCE, counts are cumulative since epoch 1, seconds is wall-clock since start\n"
    "epoch\tmean_masked_loss\tcumulative_positives\tcumulative_negatives\tseconds\n"
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    pos_neg_ratio: int = 3
    epochs: int = 500
    crop_size: int = 256
    rotation_range_deg: tuple[float, float] = (-35.0, 35.0)
    hflip: bool = True
    fallback_negatives: int = 64
    positive_crop_probability: float = 0.5
    # False trains on every pixel of the crop (the no-mining ablation)
    hard_negative_mining: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotation_range_deg", tuple(map(float, self.rotation_range_deg)))
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.pos_neg_ratio < 1:
            raise ConfigError(f"pos_neg_ratio must be >= 1, got {self.pos_neg_ratio}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        lo, hi = self.rotation_range_deg
        if lo > hi:
            raise ConfigError(f"empty rotation range {self.rotation_range_deg}")


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: M.Model) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in model.parameters()])


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    loss: float
    positives: int
    negatives_available: int
    negatives_selected: int


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    cumulative_positives: int
    cumulative_negatives: int
    seconds: float


@dataclass
class TrainingLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def deterministic_rows(self):
        """Epoch records without the wall-clock column."""
        return [(e.epoch, e.mean_loss, e.cumulative_positives, e.cumulative_negatives)
                for e in self.epochs]


def format_epoch(rec: EpochRecord) -> str:
    return (f"{rec.epoch}\t{rec.mean_loss!r}\t{rec.cumulative_positives}\t"
            f"{rec.cumulative_negatives}\t{rec.seconds:.3f}\n")


def read_training_log(path) -> list[EpochRecord]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("epoch"):
            continue
        e, loss, pos, neg, sec = line.split("\t")
        rows.append(EpochRecord(int(e), float(loss), int(pos), int(neg), float(sec)))
    return rows


# --- loss and mining --------------------------------------------------------

def per_pixel_bce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """-[y log s(z) + (1-y) log(1-s(z))] in the overflow-free form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


def bce_loss_masked(logits, labels, contribution_mask):
    """Mean BCE over the masked pixels, and its gradient w.r.t. the logits.

    The gradient is exactly zero outside the mask.
    """
    logits = np.asarray(logits)
    if not (logits.shape == np.shape(labels) == np.shape(contribution_mask)):
        raise DimensionMismatchError("logits, labels and mask must share a shape",
                                     logits.shape, (np.shape(labels), np.shape(contribution_mask)))
    m = np.asarray(contribution_mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise DegenerateBatchError("contribution mask selects no pixels")
    per_pixel = per_pixel_bce(logits, labels)
    loss = float(per_pixel[m].sum() / count)
    s = sigmoid(logits.astype(np.float64))
    grad = np.where(m, (s - np.asarray(labels, dtype=np.float64)) / count, 0.0)
    return loss, grad.astype(logits.dtype)


def select_hard_negatives(per_pixel_loss, labels, ratio: int = 3, fallback: int = 64) -> np.ndarray:
    """All positives plus the min(ratio * N_pos, N_neg) highest-loss negatives.

    Ties go to the lower row-major index. With no positives the top
    ``fallback`` negatives are taken instead.
    """
    loss = np.asarray(per_pixel_loss)
    lab = np.asarray(labels).astype(bool)
    if loss.shape != lab.shape:
        raise DimensionMismatchError("loss and labels must share a shape", loss.shape, lab.shape)
    flat_loss, flat_lab = loss.ravel(), lab.ravel()
    n_pos = int(flat_lab.sum())
    neg_idx = np.flatnonzero(~flat_lab)
    k = min(ratio * n_pos if n_pos else fallback, neg_idx.size)
    selected = flat_lab.copy()
    if k > 0:
        order = np.argsort(-flat_loss[neg_idx], kind="stable")
        selected[neg_idx[order[:k]]] = True
    return selected.reshape(lab.shape)


# --- optimiser ----------------------------------------------------------------

def sgd_momentum_step(model: M.Model, grads, state: OptimizerState, config: TrainConfig):
    """v <- momentum * v + g;  p <- p - lr * v.  Updates in place and returns both.

    Every gradient is checked before anything is modified, so a failed step
    leaves model and state untouched.
    """
    params = model.parameters()
    if len(grads) != len(params) or len(state.velocity) != len(params):
        raise DimensionMismatchError("gradient/state count does not match parameters",
                                     len(params), (len(grads), len(state.velocity)))
    names = model.parameter_names()
    for name, p, g, v in zip(names, params, grads, state.velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionMismatchError(f"shape mismatch for {name}", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient", layer=name)
    for p, g, v in zip(params, grads, state.velocity):
        v *= config.momentum
        v += g
        p -= (config.learning_rate * v).astype(p.dtype)
    return model, state


# --- augmentation and crops ---------------------------------------------------

def transform(image, mask, angle_deg: float, flip: bool):
    """Rotate both arrays by ``angle_deg`` about the centre, then optionally flip
    left-right. Bilinear for the image, nearest for the mask, zero fill."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask).astype(bool)
    if image.shape != mask.shape:
        raise DimensionMismatchError("image and mask must share a shape", image.shape, mask.shape)
    if angle_deg:
        image = ndimage.rotate(image, angle_deg, reshape=False, order=1, mode="constant", cval=0.0)
        mask = ndimage.rotate(mask.astype(np.uint8), angle_deg, reshape=False, order=0,
                              mode="constant", cval=0).astype(bool)
    if flip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment(image, mask, config: TrainConfig, rng):
    lo, hi = config.rotation_range_deg
    angle = float(rng.uniform(lo, hi)) if hi > lo else lo
    flip = bool(config.hflip and rng.uniform() < 0.5)
    return transform(image, mask, angle, flip)


def sample_crop(image, mask, size: int, rng, positive_probability: float = 0.5):
    """Random ``size`` x ``size`` crop; with ``positive_probability`` it is centred
    on a random positive pixel (clamped to the frame). Small images are zero-padded."""
    h, w = image.shape
    if h < size or w < size:
        ph, pw = max(0, size - h), max(0, size - w)
        image = np.pad(image, ((0, ph), (0, pw)))
        mask = np.pad(mask, ((0, ph), (0, pw)))
        h, w = image.shape
    pos = np.flatnonzero(mask)
    if pos.size and rng.uniform() < positive_probability:
        cy, cx = divmod(int(pos[rng.integers(pos.size)]), w)
        y0 = min(max(cy - size // 2, 0), h - size)
        x0 = min(max(cx - size // 2, 0), w - size)
    else:
        y0 = int(rng.integers(h - size + 1))
        x0 = int(rng.integers(w - size + 1))
    return image[y0:y0 + size, x0:x0 + size], mask[y0:y0 + size, x0:x0 + size]


# --- loop ---------------------------------------------------------------------

def train(dataset, arch: M.ArchConfig = M.ArchConfig(), config: TrainConfig = TrainConfig(),
          log_path=None, checkpoint_path=None, init_model: M.Model | None = None):
    """Train from scratch (or from ``init_model``) and return (model, TrainingLog).

    One optimisation step per training image per epoch, visiting images in a
    seeded random order.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    rf = M.receptive_field(arch)
    if config.crop_size < rf:
        raise ConfigError(f"crop_size {config.crop_size} is smaller than the receptive field {rf}")
    pairs = [(s.image(), s.mask()) for s in dataset]
    if sum(int(m.sum()) for _, m in pairs) == 0:
        raise DataError("dataset has no positive pixels; training would collapse to "
                        "an all-negative predictor")
    rng = np.random.default_rng(config.seed)
    model = init_model.copy() if init_model is not None else M.build_model(arch, seed=config.seed)
    model.dataset = model.dataset or getattr(dataset, "tag", None)
    state = OptimizerState.zeros_like(model)
    tlog = TrainingLog()
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w")
        fh.write(TRAINING_LOG_HEADER)
    start = time.perf_counter()
    cum_pos = cum_neg = 0
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            losses = []
            for idx in rng.permutation(len(pairs)):
                img, msk = pairs[idx]
                img, msk = sample_crop(img, msk, config.crop_size, rng,
                                       config.positive_crop_probability)
                img, msk = augment(img, msk, config, rng)
                logits, cache = M.forward(model, img[None, None], keep=True)
                labels = msk[None, None]
                if config.hard_negative_mining:
                    contrib = select_hard_negatives(per_pixel_bce(logits, labels), labels,
                                                    config.pos_neg_ratio, config.fallback_negatives)
                else:
                    contrib = np.ones_like(labels, dtype=bool)
                loss, grad = bce_loss_masked(logits, labels, contrib)
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
                grads = M.backward(model, cache, grad)
                sgd_momentum_step(model, grads, state, config)
                n_pos = int(labels.sum())
                n_sel = int(contrib.sum()) - n_pos
                tlog.steps.append(StepRecord(epoch, step, loss, n_pos,
                                             int(labels.size - n_pos), n_sel))
                cum_pos += n_pos
                cum_neg += n_sel
                losses.append(loss)
                step += 1
            rec = EpochRecord(epoch, float(np.mean(losses)), cum_pos, cum_neg,
                              time.perf_counter() - start)
            tlog.epochs.append(rec)
            if fh is not None:
                fh.write(format_epoch(rec))
                fh.flush()
            if epoch == 1 or epoch % max(1, config.epochs // 10) == 0:
                log.info("epoch %d/%d loss %.4f", epoch, config.epochs, rec.mean_loss)
            if checkpoint_path is not None and config.checkpoint_every and \
                    epoch % config.checkpoint_every == 0:
                M.save_checkpoint(model, checkpoint_path)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        M.save_checkpoint(model, checkpoint_path)
    return model, tlog
