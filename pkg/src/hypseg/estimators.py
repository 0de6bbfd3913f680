"""Scikit-learn style segmenters over lists of H x W x C cubes.

``X`` is one cube, a 4-D stack, or a list of cubes; ``y`` the matching
integer masks. Every segmenter fits its own normalization stats on the
training scenes (fusion models reuse the stats of their bases).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import io
from .metrics import confusion, macro_metrics
from .models.ilr import ilr_fit
from .models.networks import build_network, combine, describe
from .preprocessing import apply_band_norm, fit_band_stats, impute_nans
from .tensor import precision
from .tiling import predict_mask, predict_tiled
from .training import TrainConfig, fit_network
from .validation import check_scenes


def _holdout(n: int, seed: int, fraction: float = 0.2):
    if n < 2:
        raise ValueError("need at least two scenes to hold out a validation split")
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


class BaseSegmenter(ClassifierMixin, BaseEstimator):
    kind: str = ""

    def __init__(self, n_classes=None, learning_rate=None, batch_size=32, max_epochs=100, patience=20,
                 seed=0, augment=True, crop_size=224, precision="float32", data_source="methanesat"):
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.augment = augment
        self.crop_size = crop_size
        self.precision = precision
        self.data_source = data_source

    # -- hooks ------------------------------------------------------------

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience, seed=self.seed,
                           augment=self.augment, crop_size=self.crop_size, precision=self.precision,
                           data_source=self.data_source)

    def _build(self, bands: int, n_classes: int):
        with precision(self.precision):
            return build_network(describe(self.kind, bands, n_classes), self.seed)

    def _fit_stats(self, cubes):
        return fit_band_stats(cubes)

    def _condition(self, cubes):
        dtype = np.dtype(self.precision)
        return [apply_band_norm(c, self.stats_).astype(dtype) for c in cubes]

    # -- public API ---------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None):
        cubes, masks = check_scenes(X, y, n_classes=self.n_classes, allow_nan=True)
        K = self.n_classes or int(max(m.max() for m in masks)) + 1
        if X_val is None:
            tr, va = _holdout(len(cubes), self.seed)
            cubes, val_cubes = [cubes[i] for i in tr], [cubes[i] for i in va]
            masks, val_masks = [masks[i] for i in tr], [masks[i] for i in va]
        else:
            val_cubes, val_masks = check_scenes(X_val, y_val, n_bands=cubes[0].shape[2], n_classes=K, allow_nan=True)
        cubes = [impute_nans(c) for c in cubes]
        val_cubes = [impute_nans(c) for c in val_cubes]
        self.stats_ = self._fit_stats(cubes)
        config = self._train_config()
        self.net_ = self._build(cubes[0].shape[2], K)
        result = fit_network(self.net_, self.kind, self._condition(cubes), masks, self._condition(val_cubes),
                             val_masks, config, K)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.train_config_ = config
        self._set_fitted(cubes[0].shape[2], K)
        return self

    def _set_fitted(self, bands, K):
        self.classes_ = np.arange(K)
        self.n_features_in_ = bands

    def predict_proba(self, X):
        """Per-scene K-band probability maps (a list, or one array for one cube)."""
        check_is_fitted(self, "net_")
        single = isinstance(X, np.ndarray) and X.ndim == 3
        cubes = check_scenes(X, n_bands=self.n_features_in_, allow_nan=True)
        out = [predict_tiled(self.net_, x, batch_size=8) for x in self._condition([impute_nans(c) for c in cubes])]
        return out[0] if single else out

    def predict(self, X):
        probs = self.predict_proba(X)
        if isinstance(probs, np.ndarray):
            return predict_mask(probs)
        return [predict_mask(p) for p in probs]

    def confusion(self, X, y) -> np.ndarray:
        cubes, masks = check_scenes(X, y, n_bands=self.n_features_in_, n_classes=len(self.classes_), allow_nan=True)
        cm = np.zeros((len(self.classes_),) * 2, dtype=np.int64)
        for pred, truth in zip(self.predict(cubes), masks):
            confusion(pred, truth, len(self.classes_), out=cm)
        return cm

    def score(self, X, y, sample_weight=None):
        """Macro-averaged F1 over all soundings of all scenes."""
        return macro_metrics(self.confusion(X, y)).macro_f1

    def save(self, path, fold=None, metadata=None) -> bytes:
        check_is_fitted(self, "net_")
        return io.save_checkpoint(path, self.net_, getattr(self, "train_config_", None), self.stats_, fold, metadata)


class MLPSegmenter(BaseSegmenter):
    kind = "mlp"


class UNetSegmenter(BaseSegmenter):
    kind = "unet"


class SCANSegmenter(BaseSegmenter):
    kind = "scan"


class _FusionSegmenter(BaseSegmenter):
    def __init__(self, unet=None, scan=None, n_classes=None, learning_rate=None, batch_size=32, max_epochs=100,
                 patience=20, seed=0, augment=True, crop_size=224, precision="float32", data_source="methanesat"):
        super().__init__(n_classes, learning_rate, batch_size, max_epochs, patience, seed, augment,
                         crop_size, precision, data_source)
        self.unet = unet
        self.scan = scan

    def _bases(self):
        if self.unet is None or self.scan is None:
            raise ValueError(f"{self.kind} needs fitted unet and scan base segmenters")
        check_is_fitted(self.unet, "net_")
        check_is_fitted(self.scan, "net_")
        if self.unet.stats_.digest() != self.scan.stats_.digest():
            raise ValueError("unet and scan bases were fitted with different normalization stats")
        return self.unet.net_, self.scan.net_

    def _fit_stats(self, cubes):
        self._bases()
        return self.unet.stats_

    def _build(self, bands, n_classes):
        unet, scan = self._bases()
        if unet.descriptor["bands"] != bands or unet.descriptor["classes"] != n_classes:
            raise ValueError(
                f"bases expect {unet.descriptor['bands']} bands / {unet.descriptor['classes']} classes, "
                f"data has {bands} / {n_classes}"
            )
        with precision(self.precision):
            return combine(self.kind, unet, scan, self.seed)


class CombinedMLPSegmenter(_FusionSegmenter):
    kind = "combined-mlp"


class CombinedCNNSegmenter(_FusionSegmenter):
    kind = "combined-cnn"


class ILRSegmenter(BaseSegmenter):
    """Iterative logistic regression on raw (imputed) radiance.

    Training soundings are subsampled to ``max_soundings`` (seeded) since
    each round is a full-batch fit.
    """

    kind = "ilr"

    def __init__(self, n_classes=None, max_components=23, f1_threshold=0.55, learning_rate=1e-2, n_iter=500,
                 l2=1e-4, max_soundings=20000, seed=0, precision="float32"):
        self.n_classes = n_classes
        self.max_components = max_components
        self.f1_threshold = f1_threshold
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.l2 = l2
        self.max_soundings = max_soundings
        self.seed = seed
        self.precision = precision

    def _condition(self, cubes):
        return [np.asarray(c, dtype=self.precision) for c in cubes]

    def fit(self, X, y, X_val=None, y_val=None):
        cubes, masks = check_scenes(X, y, n_classes=self.n_classes, allow_nan=True)
        K = self.n_classes or int(max(m.max() for m in masks)) + 1
        C = cubes[0].shape[2]
        spectra = np.concatenate([impute_nans(c).reshape(-1, C) for c in cubes])
        labels = np.concatenate([m.ravel() for m in masks])
        if len(labels) > self.max_soundings:
            keep = np.sort(np.random.default_rng(self.seed).choice(len(labels), self.max_soundings, replace=False))
            spectra, labels = spectra[keep], labels[keep]
        result = ilr_fit(spectra, labels, K, self.max_components, self.f1_threshold, self.learning_rate,
                         self.n_iter, self.l2)
        self.result_ = result
        self.n_components_ = result.directions.shape[0]
        with precision(self.precision):
            net = build_network(describe("ilr", C, K, components=self.n_components_))
        net.directions.data[...] = result.directions
        net.class_weight.data[...] = result.class_weight
        net.class_bias.data[...] = result.class_bias
        self.net_ = net
        self.stats_ = None
        self.history_ = []
        self._set_fitted(C, K)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        single = isinstance(X, np.ndarray) and X.ndim == 3
        cubes = check_scenes(X, n_bands=self.n_features_in_, allow_nan=True)
        out = [predict_tiled(self.net_, x, normalize=False) for x in self._condition([impute_nans(c) for c in cubes])]
        return out[0] if single else out


SEGMENTERS = {
    "ilr": ILRSegmenter,
    "mlp": MLPSegmenter,
    "unet": UNetSegmenter,
    "scan": SCANSegmenter,
    "combined-mlp": CombinedMLPSegmenter,
    "combined-cnn": CombinedCNNSegmenter,
}
