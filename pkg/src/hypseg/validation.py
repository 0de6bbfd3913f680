"""Input checks shared by transformers and estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def check_cube(cube, n_bands: int | None = None, allow_nan: bool = True, name: str = "cube") -> np.ndarray:
    arr = np.asarray(cube)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be H x W x C, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if min(arr.shape) == 0:
        raise ValueError(f"{name} has an empty dimension: {arr.shape}")
    if n_bands is not None and arr.shape[2] != n_bands:
        raise ValueError(f"{name} has {arr.shape[2]} bands, expected {n_bands}")
    if not allow_nan and np.isnan(arr).any():
        raise ValueError(f"{name} contains NaN values; impute first")
    return arr


def check_mask(mask, shape: tuple[int, int] | None = None, n_classes: int | None = None, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be H x W, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name} must hold integer class labels")
        arr = arr.astype(np.int64)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} does not match cube spatial shape {tuple(shape)}")
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} has negative labels")
    if n_classes is not None and arr.size and arr.max() >= n_classes:
        raise ValueError(f"{name} has label {int(arr.max())} but only {n_classes} classes")
    return arr


def check_scenes(X, y=None, n_bands: int | None = None, n_classes: int | None = None, allow_nan: bool = False):
    """Normalise ``X`` (one cube, a stack, or a list of cubes) to a list of cubes."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
        if y is not None:
            y = [y]
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    if not isinstance(X, Sequence) or isinstance(X, (str, bytes)):
        X = list(X)
    if len(X) == 0:
        raise ValueError("no scenes given")
    cubes = [check_cube(c, n_bands, allow_nan, name=f"scene {i}") for i, c in enumerate(X)]
    bands = {c.shape[2] for c in cubes}
    if len(bands) != 1:
        raise ValueError(f"scenes disagree on band count: {sorted(bands)}")
    if y is None:
        return cubes
    if isinstance(y, np.ndarray) and y.ndim == 3:
        y = list(y)
    if len(y) != len(cubes):
        raise ValueError(f"{len(cubes)} cubes but {len(y)} masks")
    masks = [check_mask(m, c.shape[:2], n_classes, name=f"mask {i}") for i, (c, m) in enumerate(zip(cubes, y))]
    return cubes, masks
