"""Overlapping fixed-size windows over a scene, stitched by weighted averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .preprocessing import apply_band_norm, impute_nans, pad_reflect, sample_norm
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

PATCH = 224
STRIDE = 112


@dataclass(frozen=True)
class Window:
    top: int
    left: int
    height: int
    width: int

    @property
    def slices(self):
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


@dataclass
class TilePlan:
    height: int
    width: int
    windows: list[Window]

    def coverage(self) -> np.ndarray:
        cov = np.zeros((self.height, self.width), dtype=np.int64)
        for w in self.windows:
            cov[w.slices] += 1
        return cov


def axis_starts(n: int, patch: int = PATCH, stride: int = STRIDE) -> list[int]:
    if not 1 <= stride <= patch:
        raise ValueError(f"stride must be in [1, patch], got stride={stride} for patch={patch}")
    if n < patch:
        raise ValueError(f"dimension {n} is smaller than the {patch} patch; reflect-pad the scene first")
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] + patch < n:
        starts.append(n - patch)
    return starts


def tile_plan(H: int, W: int, patch: int = PATCH, stride: int = STRIDE) -> TilePlan:
    rows, cols = axis_starts(H, patch, stride), axis_starts(W, patch, stride)
    return TilePlan(H, W, [Window(r, c, patch, patch) for r in rows for c in cols])


def window_weight(height: int, width: int, kind: str = "uniform") -> np.ndarray:
    """Per-sounding stitching weight inside one window."""
    if kind == "uniform":
        return np.ones((height, width))
    if kind == "taper":
        # separable triangular profile, never exactly zero at the border
        ry = 1.0 - np.abs(np.linspace(-1, 1, height)) * (1.0 - 1.0 / height)
        rx = 1.0 - np.abs(np.linspace(-1, 1, width)) * (1.0 - 1.0 / width)
        return np.outer(ry, rx)
    raise ValueError(f"unknown window weight {kind!r}")


class StitchAccumulator:
    def __init__(self, height: int, width: int, n_classes: int, weight: str = "uniform"):
        self.sum = np.zeros((height, width, n_classes))
        self.count = np.zeros((height, width))
        self.coverage = np.zeros((height, width), dtype=np.int64)
        self.weight = weight

    def add(self, window: Window, probs: np.ndarray) -> None:
        if probs.shape[:2] != (window.height, window.width) or probs.shape[2] != self.sum.shape[2]:
            raise ValueError(
                f"window output {probs.shape} does not match {window.height}x{window.width}x{self.sum.shape[2]}"
            )
        w = window_weight(window.height, window.width, self.weight)
        self.sum[window.slices] += w[..., None] * probs
        self.count[window.slices] += w
        self.coverage[window.slices] += 1

    def result(self) -> np.ndarray:
        if (self.coverage == 0).any():
            raise ValueError("some soundings are not covered by any window")
        p = self.sum / self.count[..., None]
        # single-window soundings pass through untouched
        multi = self.coverage > 1
        p[multi] /= p[multi].sum(axis=-1, keepdims=True)
        return p


def stitch(window_probs, plan: TilePlan, weight: str = "uniform") -> np.ndarray:
    window_probs = list(window_probs)
    if len(window_probs) != len(plan.windows):
        raise ValueError(f"{len(window_probs)} window outputs for {len(plan.windows)} windows")
    acc = StitchAccumulator(plan.height, plan.width, np.asarray(window_probs[0]).shape[-1], weight)
    for win, p in zip(plan.windows, window_probs):
        acc.add(win, np.asarray(p, dtype=np.float64))
    return acc.result()


def predict_mask(probs: np.ndarray) -> np.ndarray:
    """Arg-max class per sounding; ties go to the smallest index."""
    return np.argmax(probs, axis=-1).astype(np.uint8)


def forward_windows(net, cube: np.ndarray, windows, batch_size: int = 8, normalize: bool = True) -> list[np.ndarray]:
    """Eval-mode forward of ``net`` on each window of a band-normalised cube."""
    net.eval()
    dtype = _net_dtype(net)
    out = []
    with no_grad():
        for i in range(0, len(windows), batch_size):
            chunk = windows[i:i + batch_size]
            x = np.stack([cube[w.slices] for w in chunk]).astype(dtype)
            if normalize:
                x = sample_norm(x)
            out.extend(net(Tensor._wrap(x)).data.astype(np.float64))
    return out


def _net_dtype(net):
    params = net.parameters()
    return params[0].dtype if params else np.float64


def predict_tiled(net, cube: np.ndarray, patch: int = PATCH, stride: int = STRIDE, weight: str = "uniform",
                  batch_size: int = 8, normalize: bool = True, order=None) -> np.ndarray:
    """Probability map for a conditioned cube of any size.

    Scenes smaller than ``patch`` are reflect-padded and cropped back.
    ``order`` permutes the window processing order (the result does not depend on it).
    """
    H, W = cube.shape[:2]
    padded = pad_reflect(cube, (max(H, patch), max(W, patch)))
    plan = tile_plan(*padded.shape[:2], patch, stride)
    logger.info("tile plan: %d windows over %dx%d", len(plan.windows), *padded.shape[:2])
    idx = list(range(len(plan.windows))) if order is None else list(order)
    if sorted(idx) != list(range(len(plan.windows))):
        raise ValueError("order must be a permutation of the window indices")
    probs = forward_windows(net, padded, [plan.windows[i] for i in idx], batch_size, normalize)
    acc = StitchAccumulator(plan.height, plan.width, probs[0].shape[-1], weight)
    # fixed accumulation order keeps the floating-point sum independent of processing order
    by_window = dict(zip(idx, probs))
    for i, win in enumerate(plan.windows):
        acc.add(win, by_window[i])
    return acc.result()[:H, :W]


def prepare_cube(cube: np.ndarray, stats=None, raw: bool = False) -> np.ndarray:
    cube = impute_nans(np.asarray(cube))
    if raw or stats is None:
        return cube
    return apply_band_norm(cube, stats)


def predict_scene(net, cube: np.ndarray, stats=None, **kw):
    """Impute, band-normalise (unless the model reads raw radiance), tile, stitch, arg-max."""
    raw = getattr(net, "descriptor", {}).get("kind") == "ilr"
    if stats is None and not raw:
        raise ValueError("normalization stats are required for this model")
    x = prepare_cube(cube, stats, raw)
    probs = predict_tiled(net, x, normalize=not raw, **kw)
    return probs, predict_mask(probs)
