"""Losses with dental domain knowledge, mirroring, DAE pretraining and the training loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .architecture import ArchConfig, UMamba2Net, build_network
from .prompts import ClickPrompt, sample_clicks
from .schema import LabelSchema
from .tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Raised when the training loss stops being finite."""


# -- targets and loss -----------------------------------------------------------

def smoothing_table(schema: LabelSchema, smoothing: float = 0.1) -> np.ndarray:
    """(K, K) matrix whose row k is the soft target of a class-k voxel."""
    k = schema.num_classes
    table = np.eye(k)
    for c in schema.classes:
        if c.related and smoothing > 0:
            table[c.id, c.id] = 1.0 - smoothing
            table[c.id, list(c.related)] = smoothing / len(c.related)
    return table


def smooth_targets(labels: np.ndarray, schema: LabelSchema, smoothing: float = 0.1) -> np.ndarray:
    """Soft targets with the class axis inserted after the batch axis (or first for 3D input)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= schema.num_classes):
        bad = sorted(set(np.unique(labels).tolist()) - set(range(schema.num_classes)))
        raise ValueError(f"label ids {bad} not in schema")
    soft = smoothing_table(schema, smoothing)[labels]
    axis = 0 if labels.ndim == 3 else 1
    return np.moveaxis(soft, -1, axis)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.moveaxis(np.eye(num_classes)[np.asarray(labels)], -1, 1)


def dice_ce_loss(logits, soft_targets: np.ndarray, hard_labels: np.ndarray, schema: LabelSchema | None = None,
                 weights: np.ndarray | None = None, ce_weight: float = 1.0, dice_weight: float = 1.0,
                 eps: float = 1e-5, return_terms: bool = False):
    """Weighted soft-target cross-entropy plus (1 - weighted mean foreground soft Dice).

    ``logits`` is (B, K, ...). CE uses the soft targets with each voxel weighted by the weight
    of its hard class and is averaged over voxels. Dice uses one-hot hard labels, per sample,
    over foreground classes 1..K-1.
    """
    logits = T.as_tensor(logits)
    k = logits.shape[1]
    if weights is None:
        weights = schema.loss_weights if schema is not None else np.ones(k)
    weights = np.asarray(weights, dtype=np.float64)
    hard_labels = np.asarray(hard_labels)
    if soft_targets.shape != logits.shape or hard_labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise T.ShapeError(f"loss shapes disagree: logits {logits.shape}, targets {soft_targets.shape}, "
                           f"labels {hard_labels.shape}")
    spatial = tuple(range(2, logits.ndim))
    n_vox = math.prod(hard_labels.shape)

    voxel_w = np.expand_dims(weights[hard_labels], 1)
    ce = T.tsum(T.log_softmax(logits, axis=1) * (soft_targets * voxel_w)) * (-1.0 / n_vox)

    probs = T.softmax(logits, axis=1)
    gt = one_hot(hard_labels, k)
    inter = T.tsum(probs * gt, axis=spatial)
    denom = T.tsum(probs, axis=spatial) + (gt.sum(axis=spatial) + eps)
    dsc = (inter * 2.0 + eps) / denom
    fg_w = weights[1:] / weights[1:].sum()
    mean_dsc = T.tsum(dsc[:, 1:] * fg_w) * (1.0 / logits.shape[0])
    loss = ce * ce_weight + (1.0 - mean_dsc) * dice_weight
    if return_terms:
        return loss, {"ce": float(ce.data), "dice": float(mean_dsc.data)}
    return loss


def l1_loss(pred, target) -> Tensor:
    pred = T.as_tensor(pred)
    return T.mean(T.absolute(pred - target))


# -- mirroring --------------------------------------------------------------------

def mirror_augment(volume: np.ndarray, labels: np.ndarray | None, axes_subset: Sequence[int],
                   schema: LabelSchema, rng=None, clicks: Sequence[ClickPrompt] | None = None):
    """Flip spatial axes (last three dims); swap laterality partners when axis 2 is flipped.

    ``rng`` is accepted for interface symmetry with the stochastic wrapper and unused here.
    Returns ``(volume, labels)`` or ``(volume, labels, clicks)`` when clicks are given.
    """
    axes = sorted(set(int(a) for a in axes_subset))
    if any(a not in (0, 1, 2) for a in axes):
        raise ValueError(f"mirror axes must be within (0, 1, 2), got {axes_subset}")
    spatial = [volume.ndim - 3 + a for a in axes]
    vol = np.flip(volume, axis=spatial).copy() if axes else volume.copy()
    lab = None
    if labels is not None:
        lab = np.flip(labels, axis=[labels.ndim - 3 + a for a in axes]).copy() if axes else labels.copy()
        if 2 in axes:
            lab = schema.partner_map()[lab].astype(labels.dtype)
    if clicks is None:
        return vol, lab
    extents = volume.shape[-3:]
    partner = schema.partner_map()
    return vol, lab, [c.mirrored(axes, extents, partner) for c in clicks]


def random_mirror(volume, labels, schema: LabelSchema, rng: np.random.Generator, prob: float = 0.5,
                  allow_lr: bool = True):
    from .inference import axes_subsets
    if rng.random() >= prob:
        return volume, labels, ()
    subsets = axes_subsets((0, 1, 2) if allow_lr else (0, 1))
    axes = subsets[rng.integers(len(subsets))]
    vol, lab = mirror_augment(volume, labels, axes, schema)
    return vol, lab, axes


# -- DAE corruption --------------------------------------------------------------

@dataclass
class DaeConfig:
    mask_count: tuple = (1, 4)
    mask_size: tuple = (8, 16)
    downsample_factor: int = 2
    noise_sigma: float = 0.1  # fraction of the intensity range
    p_mask: float = 0.5
    p_downsample: float = 0.5
    p_noise: float = 0.5

    def __post_init__(self) -> None:
        self.mask_count, self.mask_size = tuple(self.mask_count), tuple(self.mask_size)
        if not (1 <= self.mask_count[0] <= self.mask_count[1]):
            raise ValueError(f"bad mask_count range {self.mask_count}")
        if not (1 <= self.mask_size[0] <= self.mask_size[1]):
            raise ValueError(f"bad mask_size range {self.mask_size}")
        if self.downsample_factor < 1 or self.noise_sigma < 0:
            raise ValueError("downsample factor must be >= 1 and noise sigma >= 0")
        if not any(p > 0 for p in (self.p_mask, self.p_downsample, self.p_noise)):
            raise ValueError("at least one corruption must have positive probability")


def dae_corrupt(volume: np.ndarray, cfg: DaeConfig, rng: np.random.Generator) -> np.ndarray:
    """Random local masks, down/up-sampling and Gaussian noise; at least one is applied."""
    vol = np.asarray(volume, dtype=np.float64)
    probs = np.array([cfg.p_mask, cfg.p_downsample, cfg.p_noise])
    chosen = rng.random(3) < probs
    if not chosen.any():
        live = np.flatnonzero(probs > 0)
        chosen[live[rng.integers(len(live))]] = True
    out = vol.copy()
    if chosen[0]:
        for _ in range(rng.integers(cfg.mask_count[0], cfg.mask_count[1] + 1)):
            size = [min(int(rng.integers(cfg.mask_size[0], cfg.mask_size[1] + 1)), n) for n in vol.shape]
            start = [int(rng.integers(0, n - s + 1)) for n, s in zip(vol.shape, size)]
            out[tuple(slice(a, a + s) for a, s in zip(start, size))] = 0.0
    if chosen[1] and cfg.downsample_factor > 1:
        f = cfg.downsample_factor
        small = ndimage.zoom(out, 1.0 / f, order=1)
        out = ndimage.zoom(small, [n / m for n, m in zip(vol.shape, small.shape)], order=1)
        out = _fit(out, vol.shape)
    if chosen[2]:
        span = float(vol.max() - vol.min()) or 1.0
        out = out + rng.normal(0.0, cfg.noise_sigma * span, size=vol.shape)
    return out.astype(volume.dtype, copy=False)


def _fit(arr: np.ndarray, shape) -> np.ndarray:
    """Crop or edge-pad to ``shape`` (zoom can be off by one voxel)."""
    arr = arr[tuple(slice(0, n) for n in shape)]
    pads = [(0, n - m) for n, m in zip(shape, arr.shape)]
    return np.pad(arr, pads, mode="edge") if any(p for _, p in pads) else arr


# -- optimisation ----------------------------------------------------------------

class SGD:
    """SGD with (Nesterov) momentum and decoupled-from-nothing L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, momentum: float = 0.99,
                 nesterov: bool = True, weight_decay: float = 3e-5) -> None:
        self.params = list(params)
        self.lr, self.momentum, self.nesterov, self.weight_decay = lr, momentum, nesterov, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            update = g + self.momentum * v if self.nesterov else v
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def poly_lr(initial: float, epoch: int, max_epochs: int, exponent: float = 0.9) -> float:
    return initial * (1.0 - epoch / max_epochs) ** exponent


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


# -- training loops -------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    iters_per_epoch: int = 8
    batch_size: int = 2
    lr: float = 1e-2
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    grad_clip: float = 12.0
    poly_exponent: float = 0.9
    augment: bool = True
    mirror_prob: float = 0.5
    mirror_lr: bool = True
    label_smoothing: float = 0.1
    class_weights: bool = True
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    task: str = "seg"  # "seg" (Task 1) or "interactive" (Task 2)
    clicks_per_class: int = 1
    click_classes: list = field(default_factory=list)
    patch_size: list = field(default_factory=lambda: [32, 32, 32])
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in ("seg", "interactive"):
            raise ValueError(f"task must be 'seg' or 'interactive', got {self.task!r}")
        if self.epochs < 1 or self.iters_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, iters_per_epoch and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list
    state: dict
    seconds: float


def normalize_intensity(volume: np.ndarray) -> np.ndarray:
    """Per-volume z-score."""
    v = np.asarray(volume, dtype=np.float64)
    return (v - v.mean()) / (v.std() + 1e-8)


def random_crop(rng: np.random.Generator, arrays: Sequence[np.ndarray], patch: Sequence[int]):
    shape = arrays[0].shape[-3:]
    if any(p > n for p, n in zip(patch, shape)):
        raise ValueError(f"patch {tuple(patch)} larger than volume {shape}")
    start = [int(rng.integers(0, n - p + 1)) for n, p in zip(shape, patch)]
    sl = tuple(slice(a, a + p) for a, p in zip(start, patch))
    return [a[(...,) + sl] for a in arrays]


def _foreground_dice(pred: np.ndarray, labels: np.ndarray, k: int) -> float:
    scores = []
    for c in range(1, k):
        a, b = pred == c, labels == c
        denom = a.sum() + b.sum()
        scores.append(1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom)
    return float(np.mean(scores))


def _sample_stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def _check_finite(value: float, epoch: int, it: int, extra: dict) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at epoch {epoch} iteration {it}: {extra}")


def train(model: UMamba2Net, dataset: Sequence[tuple[np.ndarray, np.ndarray]], schema: LabelSchema,
          cfg: TrainConfig, log_path: str | Path | None = None, config_echo: dict | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Seeded SGD on ``dice_ce_loss`` over random patches; returns history and final weights.

    The patch/case selection stream is independent of the augmentation stream, so switching
    augmentation off does not shift which samples are drawn.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if cfg.task == "interactive" and not model.cfg.click_branch:
        raise ValueError("interactive training needs a network built with click_branch=True")
    dtype = np.dtype(cfg.dtype)
    model.cast(dtype)
    images = [normalize_intensity(img) for img, _ in dataset]
    labels = [np.asarray(lab, dtype=np.int64) for _, lab in dataset]
    weights = schema.loss_weights if cfg.class_weights else np.ones(schema.num_classes)
    click_classes = list(cfg.click_classes)
    params = model.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.nesterov, cfg.weight_decay)
    history = []
    sink = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        with T.default_dtype(dtype):
            for epoch in range(cfg.epochs):
                opt.lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.poly_exponent)
                losses, dices = [], []
                for it in range(cfg.iters_per_epoch):
                    pick = _sample_stream(cfg.seed, 0, epoch, it)
                    idx = pick.integers(len(dataset), size=cfg.batch_size)
                    xs, ys, clicks = [], [], []
                    for j, i in enumerate(idx):
                        x, y = random_crop(pick, [images[i], labels[i]], cfg.patch_size)
                        if cfg.augment:
                            x, y, _ = random_mirror(x, y, schema, _sample_stream(cfg.seed, 1, epoch, it, j),
                                                    cfg.mirror_prob, cfg.mirror_lr)
                        xs.append(x)
                        ys.append(y)
                        if cfg.task == "interactive":
                            present = [c for c in click_classes if np.any(y == c)]
                            clicks.append(sample_clicks(y, present, cfg.clicks_per_class,
                                                        rng_seed=int(pick.integers(2 ** 31))))
                    x = Tensor(np.stack(xs)[:, None])
                    y = np.stack(ys)
                    soft = smooth_targets(y, schema, cfg.label_smoothing).astype(dtype)
                    logits = model(x, clicks if cfg.task == "interactive" else None)
                    loss = dice_ce_loss(logits, soft, y, weights=weights, ce_weight=cfg.ce_weight,
                                        dice_weight=cfg.dice_weight)
                    value = float(loss.data)
                    _check_finite(value, epoch, it, {"lr": opt.lr})
                    opt.zero_grad()
                    loss.backward()
                    clip_grad_norm(params, cfg.grad_clip)
                    opt.step()
                    losses.append(value)
                    dices.append(_foreground_dice(np.argmax(logits.data, axis=1), y, schema.num_classes))
                record = {"epoch": epoch, "loss": float(np.mean(losses)), "mean_dice": float(np.mean(dices))}
                history.append(record)
                log.info("epoch %d loss %.4f dice %.3f", epoch, record["loss"], record["mean_dice"])
                if sink:
                    line = dict(record)
                    if config_echo is not None and epoch == 0:
                        line["config"] = config_echo
                    sink.write(json.dumps(line) + "\n")
                    sink.flush()
                if callback:
                    callback(record)
    finally:
        if sink:
            sink.close()
    return TrainResult(history, model.state_dict(), time.perf_counter() - t0)


def predict_labels(model: UMamba2Net, image: np.ndarray, clicks=None, dtype=np.float32) -> np.ndarray:
    """Argmax prediction for one whole volume whose extents fit the network strides."""
    with T.default_dtype(dtype):
        probs = model.predict_proba(Tensor(normalize_intensity(image)[None, None]), clicks)
    return np.argmax(probs[0], axis=0)


def evaluate_training_set(model: UMamba2Net, dataset, schema: LabelSchema, clicks=None,
                          classes: Sequence[int] | None = None) -> dict:
    """Mean Dice over cases, per class and averaged over ``classes`` (default: all foreground)."""
    classes = list(classes) if classes is not None else list(range(1, schema.num_classes))
    per_class = np.zeros((len(dataset), len(classes)))
    for i, (img, lab) in enumerate(dataset):
        pred = predict_labels(model, img, clicks[i] if clicks is not None else None)
        for j, c in enumerate(classes):
            a, b = pred == c, lab == c
            denom = a.sum() + b.sum()
            per_class[i, j] = 1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom
    means = per_class.mean(axis=0)
    return {"mean_dice": float(means.mean()),
            "per_class": {schema.classes[c].name: float(m) for c, m in zip(classes, means)}}


# -- DAE pretraining -------------------------------------------------------------

def dae_network(arch: ArchConfig) -> UMamba2Net:
    """Same topology with a 1-channel reconstruction head and no click branch."""
    d = arch.to_dict()
    d.update(num_classes=1, click_branch=False)
    return build_network(ArchConfig(**d))


def pretrain_dae(model: UMamba2Net, volumes: Sequence[np.ndarray], dae_cfg: DaeConfig, epochs: int,
                 iters_per_epoch: int = 4, batch_size: int = 2, lr: float = 1e-2, seed: int = 0,
                 patch_size: Sequence[int] | None = None, dtype: str = "float32",
                 grad_clip: float = 12.0, log_path: str | Path | None = None) -> TrainResult:
    """Reconstruct clean volumes from corrupted copies under an L1 loss."""
    if model.cfg.num_classes != 1:
        raise ValueError("DAE pretraining needs a 1-channel reconstruction head (see dae_network)")
    if not volumes:
        raise ValueError("no volumes to pretrain on")
    dt = np.dtype(dtype)
    model.cast(dt)
    patch = list(patch_size or model.cfg.patch_size)
    clean = [normalize_intensity(v) for v in volumes]
    params = model.parameters()
    opt = SGD(params, lr, 0.99, True, 3e-5)
    history = []
    sink = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        with T.default_dtype(dt):
            for epoch in range(epochs):
                opt.lr = poly_lr(lr, epoch, epochs)
                losses = []
                for it in range(iters_per_epoch):
                    rng = _sample_stream(seed, 2, epoch, it)
                    idx = rng.integers(len(clean), size=batch_size)
                    targets = [random_crop(rng, [clean[i]], patch)[0] for i in idx]
                    inputs = [dae_corrupt(t, dae_cfg, rng) for t in targets]
                    recon = model(Tensor(np.stack(inputs)[:, None]))
                    loss = l1_loss(recon, np.stack(targets)[:, None].astype(dt))
                    value = float(loss.data)
                    _check_finite(value, epoch, it, {"lr": opt.lr, "stage": "dae"})
                    opt.zero_grad()
                    loss.backward()
                    clip_grad_norm(params, grad_clip)
                    opt.step()
                    losses.append(value)
                record = {"epoch": epoch, "loss": float(np.mean(losses))}
                history.append(record)
                if sink:
                    sink.write(json.dumps(record) + "\n")
    finally:
        if sink:
            sink.close()
    return TrainResult(history, model.state_dict(), time.perf_counter() - t0)


def load_pretrained(model: UMamba2Net, state: dict) -> list[str]:
    """Copy transferable weights (everything except heads and the click branch)."""
    subset = {n: a for n, a in state.items() if model.transferable(n)}
    return model.load_state_dict(subset, strict=False)
