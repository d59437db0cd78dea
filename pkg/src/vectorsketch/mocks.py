"""Deterministic stand-ins for the guidance backends.

All mocks are pure functions of their constructor arguments, so they are safe
to call concurrently.

MockImageEncoder
    ink = 1 - gray; embed = W @ resize(ink, 8x8).ravel(), with W a
    (64, 64) standard-normal matrix from ``default_rng(seed)`` scaled by 1/8.
    The resize is a bilinear (triangle-filter, antialiased) resample, the
    same filter PIL's BILINEAR reduce uses. Layer ``l`` activations are the ink
    area-pooled to ``res = max(2, 64 >> (l // 3))`` pixels square and divided
    by ``res``, so deeper layers see a coarser image and every layer's squared
    norm is a per-cell mean. Valid layers: 0..11.
MockLatentCodec
    identity on 64x64 grayscale; other sizes are resampled to 64x64 first.
TargetPullingPredictor
    eps_hat = (z_t - alpha_t z_target) / sigma_t, the exact noise predictor
    for a data distribution concentrated on z_target. Then
    eps_hat - eps = (alpha_t / sigma_t)(z - z_target) so SDS pulls z toward
    the target.
MockEmbeddingGenerator
    linear blob model: mean image mu(e) = 1 - sum_d e_d blob_d on a 32x32
    canvas, noise prediction linear in the embedding.
"""
from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, InterfaceError, NumericError
from .guidance import (
    DTYPE,
    DenoisePredictor,
    EmbeddingGenerator,
    ImageEncoder,
    LatentCodec,
    NoiseSchedule,
    TextCondition,
    VideoDenoisePredictor,
    as_image,
    prompt_placeholders,
    to_gray,
)

NUM_LAYERS = 12


def resize_gray(gray: torch.Tensor, size: int) -> torch.Tensor:
    """(H, W) -> (size, size) bilinear with antialiasing."""
    if gray.shape == (size, size):
        return gray
    x = gray[None, None]
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False,
                         antialias=True)[0, 0]


def layer_resolution(layer: int) -> int:
    return max(2, 64 >> (layer // 3))


class MockImageEncoder(ImageEncoder):
    concurrent_safe = True

    def __init__(self, dim: int = 64, grid: int = 8, seed: int = 0):
        self.dim, self.grid, self.seed = dim, grid, seed
        w = np.random.default_rng(seed).standard_normal((dim, grid * grid)) / grid
        self.projection = torch.as_tensor(w, dtype=DTYPE)

    def ink(self, img) -> torch.Tensor:
        return 1.0 - to_gray(as_image(img))

    def embed(self, img) -> torch.Tensor:
        small = resize_gray(self.ink(img), self.grid)
        return self.projection @ small.reshape(-1)

    def activations(self, img, layers: Sequence[int]) -> dict[int, torch.Tensor]:
        ink = self.ink(img)
        out = {}
        for layer in layers:
            if not isinstance(layer, (int, np.integer)) or not 0 <= layer < NUM_LAYERS:
                raise InterfaceError(f"mock encoder has no layer {layer!r}")
            res = layer_resolution(int(layer))
            out[int(layer)] = F.adaptive_avg_pool2d(ink[None, None], res)[0, 0] / res
        return out


class MockLatentCodec(LatentCodec):
    concurrent_safe = True

    def __init__(self, size: int = 64):
        self.size = size

    def encode(self, img) -> torch.Tensor:
        return resize_gray(to_gray(as_image(img)), self.size)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(z, dtype=DTYPE)[..., None]


def _pulling_prediction(z_t, t, z_target, sched: NoiseSchedule):
    sched.check(t)
    if tuple(z_t.shape) != tuple(z_target.shape):
        raise DomainError(f"latent shape {tuple(z_t.shape)} does not match target {tuple(z_target.shape)}")
    s = sched.sigma[t]
    if s == 0.0:
        raise NumericError(f"sigma_{t} = 0; the mock predictor needs t >= 1")
    return (z_t - sched.alpha[t] * z_target) / s


class TargetPullingPredictor(DenoisePredictor):
    concurrent_safe = True

    def __init__(self, z_target, sched: NoiseSchedule):
        self.z_target = torch.as_tensor(z_target, dtype=DTYPE)
        self.sched = sched

    def predict_noise(self, z_t, t, condition=None, guidance_scale=None):
        return _pulling_prediction(torch.as_tensor(z_t, dtype=DTYPE), t, self.z_target, self.sched)


class TargetPullingVideoPredictor(VideoDenoisePredictor):
    """Same family for (k, H, W) videos."""

    concurrent_safe = True

    def __init__(self, video_target, sched: NoiseSchedule):
        self.z_target = torch.as_tensor(video_target, dtype=DTYPE)
        self.sched = sched

    def predict_noise(self, z_t, t, condition=None, guidance_scale=None):
        return _pulling_prediction(torch.as_tensor(z_t, dtype=DTYPE), t, self.z_target, self.sched)


class EchoPredictor(DenoisePredictor):
    """Returns a fixed array; pass the true noise to get a perfect predictor."""

    concurrent_safe = True

    def __init__(self, eps):
        self.eps = torch.as_tensor(eps, dtype=DTYPE)

    def predict_noise(self, z_t, t, condition=None, guidance_scale=None):
        return self.eps.clone()


def word_seed(word: str) -> int:
    return zlib.crc32(word.encode("utf-8"))


class MockEmbeddingGenerator(EmbeddingGenerator):
    """Images are 1 - sum_d e_d blob_d plus a little pixel noise.

    The condition vector is the sum of the prompt's placeholder slots or, for
    a prompt without placeholders, the word embedding of the whole prompt.
    The schedule defaults to constant alpha/sigma so the training loss
    ``(alpha/sigma)^2 ||z - mu(e)||^2`` does not depend on the timestep.
    """

    concurrent_safe = True

    def __init__(self, dim: int = 8, size: int = 32, seed: int = 0, pixel_noise: float = 0.02,
                 jitter: float = 0.03, sched: NoiseSchedule | None = None):
        self.embedding_dim, self.size, self.seed = dim, size, seed
        self.pixel_noise, self.jitter = pixel_noise, jitter
        self.sched = sched or NoiseSchedule.constant(1000, 0.8, 0.6)
        rng = np.random.default_rng(seed)
        centers = rng.uniform(0.2, 0.8, (dim, 2)) * size
        yy, xx = np.mgrid[0:size, 0:size].astype(float)
        rad = size / 6.0
        blobs = np.exp(-((xx[None] - centers[:, 0, None, None]) ** 2
                         + (yy[None] - centers[:, 1, None, None]) ** 2) / (2 * rad * rad))
        self.blobs = torch.as_tensor(blobs, dtype=DTYPE)

    def word_embedding(self, word: str) -> torch.Tensor:
        rng = np.random.default_rng(word_seed(word.strip().lower()))
        return torch.as_tensor(rng.uniform(0.0, 0.6, self.embedding_dim), dtype=DTYPE)

    def condition_vector(self, cond: TextCondition) -> torch.Tensor:
        tokens = prompt_placeholders(cond.prompt)
        if not tokens:
            return self.word_embedding(cond.prompt)
        missing = [t for t in tokens if t not in cond.token_slots]
        if missing:
            raise InterfaceError(f"no embedding for placeholder(s) {missing}")
        return sum((torch.as_tensor(cond.token_slots[t], dtype=DTYPE) for t in tokens),
                   torch.zeros(self.embedding_dim, dtype=DTYPE))

    def mean_image(self, e: torch.Tensor) -> torch.Tensor:
        return 1.0 - torch.einsum("d,dhw->hw", e, self.blobs)

    def generate(self, condition: TextCondition, rng: np.random.Generator) -> np.ndarray:
        with torch.no_grad():
            e = self.condition_vector(condition).numpy()
        e = e + rng.normal(0.0, self.jitter, e.shape)
        img = self.mean_image(torch.as_tensor(e)).numpy()
        img = img + rng.normal(0.0, self.pixel_noise, img.shape)
        return np.clip(img, 0.0, 1.0)[..., None]

    def predict_noise(self, z_t: torch.Tensor, t: int, e: torch.Tensor) -> torch.Tensor:
        return _pulling_prediction(z_t, t, self.mean_image(e), self.sched)

    def ldm_loss_and_grads(self, image, t, condition, eps, trainable_slots):
        z = to_gray(as_image(image))
        if z.shape != (self.size, self.size):
            z = resize_gray(z, self.size)
        eps = torch.as_tensor(eps, dtype=DTYPE)
        slots = {}
        for name in trainable_slots:
            if name not in condition.token_slots:
                raise InterfaceError(f"unknown slot {name!r}")
            slots[name] = torch.as_tensor(condition.token_slots[name], dtype=DTYPE).detach().clone().requires_grad_(True)
        cond = TextCondition(condition.prompt, condition.embedding, {**condition.token_slots, **slots})
        with torch.enable_grad():
            e = self.condition_vector(cond)
            z_t = self.sched.alpha[t] * z + self.sched.sigma[t] * eps
            loss = ((eps - self.predict_noise(z_t, t, e)) ** 2).sum()
            names = list(slots)
            grads = torch.autograd.grad(loss, [slots[n] for n in names], allow_unused=True) if names else []
        out = {}
        for n, g in zip(names, grads):
            out[n] = np.zeros(self.embedding_dim) if g is None else g.numpy()
        return float(loss.detach()), out
