"""Deterministic synthetic hyperspectral scenes with cloud, shadow and dark-surface labels."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

BACKGROUND, CLOUD, SHADOW, DARK = 0, 1, 2, 3


@dataclass
class SynthConfig:
    height: int = 256
    width: int = 256
    bands: int = 64
    classes: int = 4
    seed: int = 0
    cloud_count: tuple[int, int] = (2, 4)
    # ellipse semi-axes as fractions of min(height, width)
    cloud_radius: tuple[float, float] = (0.06, 0.14)
    # sun direction: shadow = cloud translated by this many soundings (rows, cols)
    shadow_offset: tuple[int, int] = (24, 18)
    transmittance: tuple[float, float] = (0.2, 0.5)
    dark_count: tuple[int, int] = (1, 3)
    dark_radius: tuple[float, float] = (0.05, 0.10)
    cloud_brightness: float = 3.0
    dark_level: float = 0.06
    texture_amplitude: float = 0.08
    texture_scale: float = 6.0
    noise: float = 0.01
    nan_rate: float = 1e-3
    # per-class expected fraction bounds of the mean over many seeds
    class_fraction_bounds: dict = field(default_factory=lambda: {
        "background": [0.40, 0.95], "cloud": [0.03, 0.35], "shadow": [0.01, 0.25], "dark_surface": [0.005, 0.15],
    })

    def __post_init__(self):
        for name in ("cloud_count", "cloud_radius", "shadow_offset", "transmittance", "dark_count", "dark_radius"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.height < 1 or self.width < 1 or self.bands < 2:
            raise ValueError(f"degenerate scene size {self.height}x{self.width}x{self.bands}")
        if self.classes not in (3, 4):
            raise ValueError(f"classes must be 3 or 4, got {self.classes}")
        for name in ("cloud_count", "dark_count", "cloud_radius", "dark_radius", "transmittance"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (low, high) range, got {(lo, hi)}")
        if not 0 < self.transmittance[0] <= self.transmittance[1] < 1:
            raise ValueError("transmittance must lie in (0, 1)")
        if self.noise < 0 or not 0 <= self.nan_rate < 1:
            raise ValueError("noise must be >= 0 and nan_rate in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def full_band_config(**kw) -> SynthConfig:
    """Satellite band count with three classes; used for parameter-count checks."""
    return SynthConfig(**{"bands": 1080, "classes": 3, **kw})


def templates(config: SynthConfig) -> dict[str, np.ndarray]:
    """Mean spectra per class (shadow uses the mid-range transmittance)."""
    lam = np.linspace(0.0, 1.0, config.bands)
    continuum = 1.0 + 0.35 * np.sin(2.2 * np.pi * lam + 0.4) - 0.3 * lam
    # two surface endmembers mixed by a smooth albedo field
    end_a = continuum * (0.9 + 0.2 * lam)
    end_b = continuum * (1.1 - 0.25 * np.exp(-((lam - 0.6) ** 2) / 0.02))
    cloud = config.cloud_brightness * (0.35 * continuum + 0.65 * continuum.mean())
    dark = np.full(config.bands, config.dark_level)
    return {"continuum": continuum, "end_a": end_a, "end_b": end_b, "cloud": cloud, "dark": dark,
            "background": 0.5 * (end_a + end_b), "shadow": 0.5 * sum(config.transmittance) * 0.5 * (end_a + end_b)}


def _ellipses(rng, H, W, count, radius):
    mask = np.zeros((H, W), dtype=bool)
    yy, xx = np.mgrid[0:H, 0:W]
    scale = min(H, W)
    for _ in range(int(rng.integers(count[0], count[1] + 1))):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        a, b = rng.uniform(*radius, size=2) * scale
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / max(a, 0.5)) ** 2 + (v / max(b, 0.5)) ** 2 <= 1.0
    return mask


def translate(mask: np.ndarray, offset) -> np.ndarray:
    """Shift a boolean mask by (rows, cols); cells shifted in from outside are False."""
    dy, dx = int(offset[0]), int(offset[1])
    H, W = mask.shape
    out = np.zeros_like(mask)
    ys, yd = (slice(0, max(H - dy, 0)), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, max(W - dx, 0)), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[yd, xd] = mask[ys, xs]
    return out


def _smooth_field(rng, H, W, scale):
    f = gaussian_filter(rng.standard_normal((H, W)), scale, mode="wrap")
    return f / (f.std() + 1e-12)


def synth_scene(config: SynthConfig, seed: int | None = None):
    """Return ``(cube float32 H x W x C, mask uint8 H x W)`` fully determined by the seed."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    H, W, C = config.height, config.width, config.bands
    t = templates(config)

    cloud = _ellipses(rng, H, W, config.cloud_count, config.cloud_radius)
    shadow = translate(cloud, config.shadow_offset) & ~cloud
    mask = np.zeros((H, W), dtype=np.uint8)
    mask[shadow] = SHADOW
    mask[cloud] = CLOUD
    dark = np.zeros((H, W), dtype=bool)
    if config.classes == 4:
        dark = _ellipses(rng, H, W, config.dark_count, config.dark_radius) & ~cloud & ~shadow
        mask[dark] = DARK

    albedo = 1.0 / (1.0 + np.exp(-1.5 * _smooth_field(rng, H, W, config.texture_scale * 2)))
    texture = 1.0 + config.texture_amplitude * _smooth_field(rng, H, W, config.texture_scale)
    surface = albedo[..., None] * t["end_a"] + (1.0 - albedo[..., None]) * t["end_b"]
    tau = rng.uniform(*config.transmittance)
    surface[shadow] *= tau
    thickness = 1.0 + 0.5 * config.texture_amplitude * _smooth_field(rng, H, W, config.texture_scale)
    surface[cloud] = thickness[cloud][:, None] * t["cloud"]
    surface[dark] = t["dark"]
    cube = surface * texture[..., None]
    cube += config.noise * rng.standard_normal(cube.shape)
    cube = np.maximum(cube, 1e-4).astype(np.float32)
    if config.nan_rate > 0:
        cube[rng.random(cube.shape) < config.nan_rate] = np.nan
    return cube, mask


def class_fractions(mask: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(mask.ravel(), minlength=n_classes)[:n_classes] / mask.size
