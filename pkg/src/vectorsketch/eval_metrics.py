"""Evaluation metrics: set diversity, top-5 recognizability overlap,
multi-scale SSIM and consistency matrices."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .concept_tree import consistency_matrix  # noqa: F401  (re-exported)
from .errors import DomainError

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03
WINDOW_SIZE, WINDOW_SIGMA = 11, 1.5


def _stack(images: Sequence) -> np.ndarray:
    arrs = [np.asarray(im, dtype=float) for im in images]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise DomainError("all images must have the same dimensions")
    return np.stack(arrs)


def diversity(images: Sequence) -> float:
    """Normalised average pixel variance: sum over pixels of
    sum_i (S_i - mu)^2 / (|mu|_1 n), with mu the pixelwise mean."""
    if len(images) < 2:
        raise DomainError("diversity needs at least two sketches")
    s = _stack(images)
    mu = s.mean(axis=0)
    l1 = np.abs(mu).sum()
    if l1 == 0:
        raise DomainError("mean image is blank; diversity undefined")
    return float((((s - mu) ** 2).sum(axis=0) / (l1 * len(s))).sum())


@dataclass(frozen=True)
class Top5Prediction:
    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) != 5 or len(set(labels)) != 5:
            raise DomainError(f"expected 5 distinct labels, got {labels}")


def top5_overlap_pass(img_pred: Top5Prediction, sketch_pred: Top5Prediction, min_shared: int = 2) -> bool:
    return len(set(img_pred.labels) & set(sketch_pred.labels)) >= min_shared


def load_predictions(path) -> dict[str, Top5Prediction]:
    """JSON object mapping an item name to its ordered top-5 label list."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise DomainError(f"{path}: expected a JSON object")
    return {k: Top5Prediction(tuple(v)) for k, v in data.items()}


# ----------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=float) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    a = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(a, k, axis=1) @ g


def ssim_components(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> tuple[float, float]:
    """(mean SSIM, mean contrast-structure) of two 2-D images with an 11-tap
    Gaussian window evaluated only where it fits."""
    g = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2 * sab + c2) / (saa + sbb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return float((lum * cs).mean()), float(cs.mean())


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _as_channels(img) -> np.ndarray:
    a = np.asarray(img, dtype=float)
    return a[..., None] if a.ndim == 2 else a


def msssim(a, b, data_range: float = 1.0, weights: Sequence[float] = MSSSIM_WEIGHTS) -> float:
    """Five-scale MS-SSIM with the standard weights. Negative contrast
    terms are clamped to zero so the result stays in [0, 1]. Multi-channel
    images are averaged per scale across channels."""
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    scales = len(weights)
    min_side = (WINDOW_SIZE - 1) * 2 ** (scales - 1)
    if min(a.shape[:2]) <= min_side:
        raise DomainError(f"images must be larger than {min_side} px on each side for {scales} scales")
    ca = [a[..., c] for c in range(a.shape[2])]
    cb = [b[..., c] for c in range(b.shape[2])]
    out = 1.0
    for s, w in enumerate(weights):
        comps = [ssim_components(x, y, data_range) for x, y in zip(ca, cb)]
        val = np.mean([c[0] if s == scales - 1 else c[1] for c in comps])
        out *= max(val, 0.0) ** w
        if s < scales - 1:
            ca = [_downsample(x) for x in ca]
            cb = [_downsample(y) for y in cb]
    return float(out)
