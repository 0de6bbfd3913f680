"""Weighted cross-entropy, Adam, augmentation, early stopping, fold splitting."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .preprocessing import random_crop, sample_norm
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

# best learning rate per data source and model kind
LEARNING_RATES = {
    "methaneair": {"ilr": 1e-2, "mlp": 5e-3, "scan": 1e-3, "unet": 1e-3, "combined-mlp": 1e-2, "combined-cnn": 1e-2},
    "methanesat": {"ilr": 1e-2, "mlp": 1e-2, "scan": 1e-3, "unet": 5e-3, "combined-mlp": 5e-4, "combined-cnn": 5e-4},
}
PROB_FLOOR = 1e-12


def default_learning_rate(kind: str, data_source: str = "methanesat") -> float:
    try:
        return LEARNING_RATES[data_source][kind]
    except KeyError:
        raise ValueError(f"no default learning rate for model {kind!r} on {data_source!r}") from None


@dataclass
class TrainConfig:
    learning_rate: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 20
    min_delta: float = 1e-6
    seed: int = 0
    augment: bool = True
    class_weight_mode: str = "inverse"
    crop_size: int = 224
    crops_per_scene: int = 1
    precision: str = "float32"
    data_source: str = "methanesat"

    def __post_init__(self):
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.class_weight_mode not in ("inverse", "none"):
            raise ValueError(f"unknown class_weight_mode {self.class_weight_mode!r}")
        if self.data_source not in LEARNING_RATES:
            raise ValueError(f"unknown data_source {self.data_source!r}")

    def resolved_lr(self, kind: str) -> float:
        return self.learning_rate if self.learning_rate is not None else default_learning_rate(kind, self.data_source)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- loss ------------------------------------------------------------------


def class_weights(masks, n_classes: int) -> np.ndarray:
    """Inverse class frequencies, rescaled to mean 1."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for m in masks:
        counts += np.bincount(np.asarray(m).ravel(), minlength=n_classes)[:n_classes]
    missing = [c for c in range(n_classes) if counts[c] == 0]
    if missing:
        raise ValueError(f"classes absent from the training masks: {missing}")
    inv = counts.sum() / counts.astype(np.float64)
    return inv / inv.mean()


def weighted_ce(probs: Tensor, target, weights=None) -> Tensor:
    """Mean over soundings of ``w[y] * -log p[y]`` (probabilities floored at 1e-12)."""
    target = np.asarray(target)
    if probs.shape[:-1] != target.shape:
        raise ValueError(f"probabilities {probs.shape} do not match targets {target.shape}")
    K = probs.shape[-1]
    w = np.ones(K) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (K,):
        raise ValueError(f"expected {K} class weights, got {w.shape}")
    p_true = T.gather(probs, target, axis=-1)
    nll = -T.log(T.clip(p_true, PROB_FLOOR, None))
    return (nll * w[target].astype(probs.dtype)).mean()


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params[i].data``."""
    state.step += 1
    t = state.step
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params


class Adam:
    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like(self.params)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- augmentation -------------------------------------------------------------


def sample_transform(rng) -> tuple[bool, bool, int]:
    """(vertical flip, horizontal flip, quarter turns)."""
    return bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(4))


def apply_transform(arr: np.ndarray, transform) -> np.ndarray:
    vflip, hflip, k = transform
    if vflip:
        arr = arr[::-1]
    if hflip:
        arr = arr[:, ::-1]
    return np.rot90(arr, k, axes=(0, 1))


def augment(cube, mask, rng):
    """Random flips and 90° rotations applied identically to cube and mask."""
    t = sample_transform(rng)
    return np.ascontiguousarray(apply_transform(cube, t)), np.ascontiguousarray(apply_transform(mask, t))


# -- folds ---------------------------------------------------------------------


@dataclass
class Fold:
    index: int
    train: list
    val: list
    test: list


def kfold_split(scene_ids, k: int = 3, seed: int = 0, val_fraction: float = 0.2) -> list[Fold]:
    """Scene-level k-fold; each fold's non-test scenes are split into train/val."""
    ids = list(scene_ids)
    if k < 2 or len(ids) < k:
        raise ValueError(f"need k >= 2 and at least k scenes (k={k}, scenes={len(ids)})")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    parts = np.array_split(np.arange(len(order)), k)
    folds = []
    for i, part in enumerate(parts):
        test = [order[j] for j in part]
        rest = [order[j] for j in range(len(order)) if j not in set(part)]
        rest = [rest[j] for j in rng.permutation(len(rest))]
        n_val = max(1, int(round(val_fraction * len(rest)))) if len(rest) > 1 else 0
        folds.append(Fold(i, rest[n_val:], rest[:n_val], test))
    return folds


# -- training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    epochs_run: int = 0
    stopped_early: bool = False


def crop_side(shapes, crop_size: int, multiple: int = 4) -> int:
    side = min([crop_size] + [min(s[:2]) for s in shapes])
    side -= side % multiple
    if side < multiple:
        raise ValueError(f"scenes are too small to crop ({shapes})")
    return side


def epoch_samples(cubes, masks, config: TrainConfig, rng, side: int):
    xs, ys = [], []
    for cube, mask in zip(cubes, masks):
        for _ in range(config.crops_per_scene):
            c, m = random_crop(cube, mask, (side, side), rng)
            if config.augment:
                c, m = augment(c, m, rng)
            xs.append(c)
            ys.append(m)
    return xs, ys


def center_samples(cubes, masks, side: int):
    xs, ys = [], []
    for cube, mask in zip(cubes, masks):
        top, left = (cube.shape[0] - side) // 2, (cube.shape[1] - side) // 2
        xs.append(cube[top:top + side, left:left + side])
        ys.append(mask[top:top + side, left:left + side])
    return xs, ys


def batch_loss(net, xs, ys, weights, batch_size: int, dtype) -> float:
    total, n = 0.0, 0
    with no_grad():
        for i in range(0, len(xs), batch_size):
            x = sample_norm(np.stack(xs[i:i + batch_size]).astype(dtype))
            y = np.stack(ys[i:i + batch_size])
            total += weighted_ce(net(Tensor._wrap(x)), y, weights).item() * len(x)
            n += len(x)
    return total / n


def fit_network(net, kind: str, cubes, masks, val_cubes, val_masks, config: TrainConfig,
                n_classes: int, callback=None) -> TrainResult:
    """Train ``net`` in place and restore the parameters of the best validation epoch."""
    if not val_cubes:
        raise ValueError("validation split is empty")
    dtype = np.dtype(config.precision).type
    weights = class_weights(masks, n_classes) if config.class_weight_mode == "inverse" else np.ones(n_classes)
    side = crop_side([c.shape for c in list(cubes) + list(val_cubes)], config.crop_size)
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.parameters(), config.resolved_lr(kind), config.beta1, config.beta2, config.adam_eps)
    if not opt.params:
        raise ValueError("network has no trainable parameters")
    vx, vy = center_samples(val_cubes, val_masks, side)
    result = TrainResult()
    best_state = copy.deepcopy(net.state_dict())
    bad = 0
    for epoch in range(1, config.max_epochs + 1):
        net.train()
        xs, ys = epoch_samples(cubes, masks, config, rng, side)
        order = rng.permutation(len(xs))
        run, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = sample_norm(np.stack([xs[i] for i in idx]).astype(dtype))
            y = np.stack([ys[i] for i in idx])
            loss = weighted_ce(net(Tensor._wrap(x)), y, weights)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            run += value * len(idx)
            seen += len(idx)
        net.eval()
        val = batch_loss(net, vx, vy, weights, config.batch_size, dtype)
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        improved = val < result.best_val_loss - config.min_delta
        result.history.append({"epoch": epoch, "train_loss": run / seen, "val_loss": val, "improved": bool(improved)})
        logger.info("epoch %d train %.5f val %.5f%s", epoch, run / seen, val, " *" if improved else "")
        if callback is not None:
            callback(epoch, result.history[-1])
        result.epochs_run = epoch
        if improved:
            result.best_val_loss, result.best_epoch, bad = val, epoch, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            bad += 1
            if bad >= config.patience:
                result.stopped_early = True
                break
    net.load_state_dict(best_state)
    net.eval()
    return result
