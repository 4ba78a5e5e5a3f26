"""Desk-scale synthetic volumes: a smooth organ beside a low-contrast confuser.

Each volume holds a deformed ellipsoid "organ" (labelled foreground) and an
unlabelled blob pressed against it whose intensity differs by less than 0.1,
on a smoothly varying background, with Gaussian texture noise on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError, ShapeError

ORGAN_LEVEL = 0.62
CONFUSER_OFFSET = 0.06  # intensity gap organ vs confuser
BACKGROUND_LEVEL = 0.30
NOISE_SIGMA = 0.05


@dataclass
class Volume:
    intensities: np.ndarray  # (D, H, W) float32 in [0, 1]
    labels: np.ndarray | None = None  # (D, H, W) uint8
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 3:
            raise ShapeError(f"volume must be 3-D, got {self.intensities.shape}")
        if not np.all(np.isfinite(self.intensities)):
            raise DomainError("intensities must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.intensities.shape:
                raise ShapeError("labels must match intensities")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _blob(grid, center, axes, rotation, wobble) -> np.ndarray:
    rel = np.stack([g - c for g, c in zip(grid, center)], axis=-1) @ rotation
    r = np.sqrt(np.sum((rel / np.asarray(axes)) ** 2, axis=-1))
    return r < 1.0 + wobble


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def synth_volume(dims: tuple[int, int, int], rng: np.random.Generator, volume_id: str = "") -> Volume:
    D, H, W = dims
    grid = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    size = np.array(dims, dtype=float)
    scale = min(dims) / 64.0

    organ_axes = rng.uniform(11.0, 17.0, 3) * scale
    organ_axes[0] *= rng.uniform(0.8, 1.1)
    organ_center = size / 2 + rng.uniform(-5, 5, 3) * scale
    organ = _blob(grid, organ_center, organ_axes, _rotation(rng), 0.12 * _smooth_noise(rng, dims, 6.0))

    # confuser sits against the organ along a random in-plane direction
    direction = rng.standard_normal(3)
    direction[0] *= 0.4
    direction /= np.linalg.norm(direction)
    conf_axes = rng.uniform(7.0, 11.0, 3) * scale
    reach = float(np.mean(organ_axes)) + 0.6 * float(np.mean(conf_axes))
    conf_center = organ_center + direction * reach
    confuser = _blob(grid, conf_center, conf_axes, _rotation(rng), 0.12 * _smooth_noise(rng, dims, 5.0)) & ~organ

    background = BACKGROUND_LEVEL + 0.06 * _smooth_noise(rng, dims, 10.0)
    organ_level = ORGAN_LEVEL + 0.02 * _smooth_noise(rng, dims, 8.0)
    conf_sign = rng.choice([-1.0, 1.0])
    conf_level = organ_level + conf_sign * CONFUSER_OFFSET
    clean = np.where(organ, organ_level, np.where(confuser, conf_level, background))
    clean = ndimage.gaussian_filter(clean, 0.8)
    noisy = clean + NOISE_SIGMA * rng.standard_normal(dims)
    intensities = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    meta = {"confuser_sign": float(conf_sign), "organ_axes": organ_axes.tolist()}
    return Volume(intensities, organ.astype(np.uint8), id=volume_id, meta=meta | {"confuser_mask": confuser})


def synth_dataset(
    n_train: int,
    n_test: int,
    dims: tuple[int, int, int] = (64, 64, 64),
    seed: int = 0,
    levels: int = 3,
) -> tuple[list[Volume], list[Volume]]:
    """Deterministic train/test volumes; each volume has its own child seed."""
    if len(dims) != 3 or any(d <= 0 or d % 2**levels for d in dims):
        raise ShapeError(f"dims {dims} must be positive multiples of {2**levels}")
    if n_train < 0 or n_test < 0:
        raise DomainError("volume counts must be non-negative")
    children = np.random.SeedSequence(seed).spawn(n_train + n_test)
    vols = []
    for i, child in enumerate(children):
        tag = f"train{i:03d}" if i < n_train else f"test{i - n_train:03d}"
        vols.append(synth_volume(tuple(dims), np.random.default_rng(child), tag))
    return vols[:n_train], vols[n_train:]


def boundary_contrast(volume: Volume, width: int = 2) -> float:
    """Mean |organ band - confuser band| intensity gap where the two touch."""
    organ = volume.labels.astype(bool)
    confuser = volume.meta["confuser_mask"]
    st = ndimage.generate_binary_structure(3, 1)
    organ_band = organ & ndimage.binary_dilation(confuser, st, iterations=width)
    conf_band = confuser & ndimage.binary_dilation(organ, st, iterations=width)
    if not organ_band.any() or not conf_band.any():
        return float("nan")
    return float(abs(volume.intensities[organ_band].mean() - volume.intensities[conf_band].mean()))
