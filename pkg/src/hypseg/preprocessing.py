"""Radiance conditioning: imputation, clipping, standardisation, crops, log-ratio."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_cube, check_scenes

STD_FLOOR = 1e-8
LOG_FLOOR = 1e-8


@dataclass
class NormalizationStats:
    clip_low: np.ndarray
    clip_high: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    fold: int | str | None = None
    bands: int = field(init=False)

    def __post_init__(self):
        for name in ("clip_low", "clip_high", "mean", "std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        lens = {len(self.clip_low), len(self.clip_high), len(self.mean), len(self.std)}
        if len(lens) != 1:
            raise ValueError("normalization stats arrays differ in length")
        if np.any(self.clip_low > self.clip_high):
            raise ValueError("clip_low exceeds clip_high")
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")
        self.bands = len(self.mean)

    def to_dict(self) -> dict:
        return {
            "bands": self.bands,
            "clip_low": self.clip_low.tolist(),
            "clip_high": self.clip_high.tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "fold": self.fold,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NormalizationStats":
        stats = cls(doc["clip_low"], doc["clip_high"], doc["mean"], doc["std"], doc.get("fold"))
        if "bands" in doc and doc["bands"] != stats.bands:
            raise ValueError(f"stats declare {doc['bands']} bands but hold {stats.bands}")
        return stats

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormalizationStats":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def impute_nans(cube: np.ndarray) -> np.ndarray:
    """Replace NaNs with the mean of the finite values of the same spectrum."""
    cube = np.asarray(cube)
    nan = np.isnan(cube)
    if not nan.any():
        return cube.copy()
    counts = (~nan).sum(axis=-1)
    if (counts == 0).any():
        bad = tuple(int(i) for i in np.argwhere(counts == 0)[0])
        raise ValueError(f"sounding {bad} has no finite values to impute from")
    means = np.where(nan, 0, cube).sum(axis=-1) / counts
    out = cube.copy()
    out[nan] = np.broadcast_to(means[..., None], cube.shape)[nan]
    return out


def fit_band_stats(cubes, fold=None) -> NormalizationStats:
    """Per-band 1st/99th percentile clip bounds, then mean/std of the clipped values."""
    cubes = check_scenes(cubes, allow_nan=False)
    C = cubes[0].shape[2]
    low, high, mu, sd = (np.empty(C) for _ in range(4))
    for c in range(C):
        band = np.concatenate([cube[..., c].ravel() for cube in cubes]).astype(np.float64)
        low[c], high[c] = np.percentile(band, [1, 99], method="linear")
        band = np.clip(band, low[c], high[c])
        mu[c] = band.mean()
        sd[c] = band.std()
        # constant band: percentiles coincide with the value
        if low[c] == high[c]:
            mu[c] = low[c]
    return NormalizationStats(low, high, mu, np.maximum(sd, STD_FLOOR), fold)


def apply_band_norm(cube: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    cube = np.asarray(cube)
    if cube.shape[-1] != stats.bands:
        raise ValueError(f"cube has {cube.shape[-1]} bands, stats were fitted on {stats.bands}")
    dtype = cube.dtype if np.issubdtype(cube.dtype, np.floating) else np.float64
    out = (np.clip(cube, stats.clip_low, stats.clip_high) - stats.mean) / stats.std
    return out.astype(dtype, copy=False)


def sample_norm(batch: np.ndarray) -> np.ndarray:
    """Standardise each sample over all of its non-batch elements."""
    batch = np.asarray(batch)
    axes = tuple(range(1, batch.ndim))
    mu = batch.mean(axis=axes, keepdims=True, dtype=np.float64)
    sd = batch.std(axis=axes, keepdims=True, dtype=np.float64)
    return ((batch - mu) / np.maximum(sd, STD_FLOOR)).astype(batch.dtype, copy=False)


def _crop_window(shape, size):
    H, W = shape
    h, w = size
    if H < h or W < w:
        raise ValueError(f"source {H}x{W} is smaller than crop {h}x{w}")
    return h, w


def center_crop(cube, mask=None, size=(300, 178)):
    h, w = _crop_window(cube.shape[:2], size)
    top, left = (cube.shape[0] - h) // 2, (cube.shape[1] - w) // 2
    win = (slice(top, top + h), slice(left, left + w))
    return cube[win], (None if mask is None else mask[win])


def random_crop(cube, mask=None, size=(224, 224), rng=None):
    h, w = _crop_window(cube.shape[:2], size)
    rng = np.random.default_rng(rng)
    top = int(rng.integers(0, cube.shape[0] - h + 1))
    left = int(rng.integers(0, cube.shape[1] - w + 1))
    win = (slice(top, top + h), slice(left, left + w))
    return cube[win], (None if mask is None else mask[win])


def log_ratio(x: np.ndarray) -> np.ndarray:
    """ln(x / mean(x)) per spectrum (last axis); drops overall brightness."""
    x = np.maximum(np.asarray(x, dtype=np.float64), LOG_FLOOR)
    m = x.mean(axis=-1, keepdims=True)
    if not np.all(m > 0):
        raise ValueError("non-positive spectrum mean in log_ratio")
    return np.log(x / m)


def pad_reflect(cube: np.ndarray, target_hw) -> np.ndarray:
    """Mirror-pad the spatial axes at the bottom/right up to ``target_hw``."""
    out = cube
    while True:
        H, W = out.shape[:2]
        need_h, need_w = max(0, target_hw[0] - H), max(0, target_hw[1] - W)
        if need_h == 0 and need_w == 0:
            return out
        tail = [(0, 0)] * (out.ndim - 2)
        if need_h < H and need_w < W:
            return np.pad(out, [(0, need_h), (0, need_w)] + tail, mode="reflect")
        # inputs smaller than the pad: mirror repeatedly
        out = np.pad(out, [(0, min(need_h, H)), (0, min(need_w, W))] + tail, mode="symmetric")


def pad_to_multiple(cube: np.ndarray, multiple: int = 4) -> np.ndarray:
    H, W = cube.shape[:2]
    return pad_reflect(cube, (-(-H // multiple) * multiple, -(-W // multiple) * multiple))


# -- sklearn transformers --------------------------------------------------


class NanImputer(TransformerMixin, BaseEstimator):
    """Spectral-mean NaN imputation for one cube or a list of cubes."""

    def fit(self, X, y=None):
        return self

    def __sklearn_is_fitted__(self):
        return True  # stateless

    def transform(self, X):
        if isinstance(X, np.ndarray) and X.ndim == 3:
            return impute_nans(check_cube(X))
        return [impute_nans(check_cube(c)) for c in X]


class BandNormalizer(TransformerMixin, BaseEstimator):
    """Per-band percentile clipping followed by standardisation.

    Fit on training scenes only; ``stats_`` holds the serialisable result.
    """

    def __init__(self, fold=None):
        self.fold = fold

    def fit(self, X, y=None):
        self.stats_ = fit_band_stats(X, fold=self.fold)
        self.n_features_in_ = self.stats_.bands
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        if isinstance(X, np.ndarray) and X.ndim == 3:
            return apply_band_norm(X, self.stats_)
        return [apply_band_norm(c, self.stats_) for c in X]

    @classmethod
    def from_stats(cls, stats: NormalizationStats) -> "BandNormalizer":
        est = cls(fold=stats.fold)
        est.stats_ = stats
        est.n_features_in_ = stats.bands
        return est


class SampleNormalizer(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        return self

    def __sklearn_is_fitted__(self):
        return True

    def transform(self, X):
        if isinstance(X, np.ndarray) and X.ndim == 3:
            return sample_norm(X[None])[0]
        return [sample_norm(np.asarray(c)[None])[0] for c in X]
