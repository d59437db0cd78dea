"""Guidance backend interfaces and the loss/gradient formulas shared by every
pipeline.

Images travel as float64 torch tensors shaped (H, W, C) with values in [0, 1];
numpy arrays are accepted wherever an image is read.
"""
from __future__ import annotations

import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import DomainError, InterfaceError, NumericError

DTYPE = torch.float64


def as_image(img) -> torch.Tensor:
    t = img if isinstance(img, torch.Tensor) else torch.as_tensor(np.asarray(img, dtype=float))
    t = t.to(DTYPE)
    return t[..., None] if t.dim() == 2 else t


def to_gray(img: torch.Tensor) -> torch.Tensor:
    """(H, W, C) -> (H, W) by channel mean."""
    img = as_image(img)
    return img.mean(dim=-1)


# ----------------------------------------------------------------------------
# data types


@dataclass
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.alpha.shape != (self.T + 1,) or self.sigma.shape != (self.T + 1,):
            raise DomainError("schedule arrays must have length T + 1")
        if (self.alpha < 0).any() or (self.sigma < 0).any():
            raise DomainError("schedule coefficients must be non-negative")
        if (np.diff(self.alpha) > 0).any() or (np.diff(self.sigma) < 0).any():
            raise DomainError("alpha must be non-increasing and sigma non-decreasing")

    @classmethod
    def cosine(cls, T: int = 1000) -> "NoiseSchedule":
        """alpha_t = cos^2(pi t / 2T), sigma_t = sqrt(1 - alpha_t^2)."""
        t = np.arange(T + 1, dtype=float)
        alpha = np.cos(0.5 * np.pi * t / T) ** 2
        alpha[-1] = 0.0
        return cls(T, alpha, np.sqrt(np.clip(1.0 - alpha ** 2, 0.0, 1.0)))

    @classmethod
    def constant(cls, T: int, alpha: float, sigma: float) -> "NoiseSchedule":
        return cls(T, np.full(T + 1, alpha), np.full(T + 1, sigma))

    def check(self, t: int) -> None:
        if not 0 <= t <= self.T:
            raise DomainError(f"timestep {t} outside [0, {self.T}]")

    def weight(self, t: int, mode: str = "constant") -> float:
        """SDS weighting w(t): 1, or sigma_t^2 with mode='sigma_sq'."""
        self.check(t)
        if mode == "constant":
            return 1.0
        if mode == "sigma_sq":
            return float(self.sigma[t] ** 2)
        raise DomainError(f"unknown SDS weighting {mode!r}")


@dataclass
class TextCondition:
    prompt: str
    embedding: torch.Tensor | None = None
    token_slots: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.prompt:
            raise DomainError("prompt must be non-empty")


# ----------------------------------------------------------------------------
# interfaces


class ImageEncoder(ABC):
    concurrent_safe = False

    @abstractmethod
    def embed(self, img) -> torch.Tensor:
        ...

    @abstractmethod
    def activations(self, img, layers: Sequence[int]) -> dict[int, torch.Tensor]:
        ...


class LatentCodec(ABC):
    concurrent_safe = False

    @abstractmethod
    def encode(self, img) -> torch.Tensor:
        ...

    @abstractmethod
    def decode(self, z: torch.Tensor) -> torch.Tensor:
        ...


class DenoisePredictor(ABC):
    concurrent_safe = False

    @abstractmethod
    def predict_noise(self, z_t: torch.Tensor, t: int, condition: TextCondition | None,
                      guidance_scale: float | None = None) -> torch.Tensor:
        ...


class VideoDenoisePredictor(DenoisePredictor):
    """predict_noise receives a (k, H, W) video (or its latent)."""


class EmbeddingGenerator(ABC):
    """Text-to-image model with trainable token embeddings."""

    concurrent_safe = False
    embedding_dim: int

    @abstractmethod
    def word_embedding(self, word: str) -> torch.Tensor:
        ...

    @abstractmethod
    def generate(self, condition: TextCondition, rng: np.random.Generator) -> np.ndarray:
        ...

    @abstractmethod
    def ldm_loss_and_grads(self, image, t: int, condition: TextCondition, eps: torch.Tensor,
                           trainable_slots: Sequence[str]) -> tuple[float, dict[str, np.ndarray]]:
        ...


# ----------------------------------------------------------------------------
# losses


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = torch.linalg.norm(a), torch.linalg.norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise NumericError("zero-norm embedding")
    return torch.dot(a.reshape(-1), b.reshape(-1)) / (na * nb)


def semantic_loss(enc: ImageEncoder, target, sketch_img) -> torch.Tensor:
    """1 - cos(embed(target), embed(sketch)); lies in [0, 2].

    Computed as half the squared distance between the unit embeddings, which
    is the same quantity but is exactly 0 for identical inputs and does not
    lose precision when the two are close."""
    a = enc.embed(as_image(target)).reshape(-1)
    b = enc.embed(as_image(sketch_img)).reshape(-1)
    na, nb = torch.linalg.norm(a), torch.linalg.norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise NumericError("zero-norm embedding")
    return 0.5 * ((a / na - b / nb) ** 2).sum()


def layer_l2_loss(enc: ImageEncoder, target, sketch_img, layers: Sequence[int]) -> torch.Tensor:
    """Sum over layers of squared L2 between activations."""
    layers = list(layers)
    if not layers:
        raise DomainError("at least one layer is required")
    at = enc.activations(as_image(target), layers)
    asx = enc.activations(as_image(sketch_img), layers)
    total = torch.zeros((), dtype=DTYPE)
    for layer in layers:
        if layer not in at or layer not in asx:
            raise InterfaceError(f"encoder did not return layer {layer}")
        total = total + ((at[layer] - asx[layer]) ** 2).sum()
    return total


def noise_sample(x, t: int, eps, sched: NoiseSchedule):
    """x_t = alpha_t x + sigma_t eps."""
    sched.check(t)
    if tuple(x.shape) != tuple(eps.shape):
        raise DomainError(f"shape mismatch {tuple(x.shape)} vs {tuple(eps.shape)}")
    return sched.alpha[t] * x + sched.sigma[t] * eps


def sds_gradient(pred_noise, eps, w_t: float):
    """w(t) (eps_hat - eps); the predictor's own Jacobian is skipped."""
    if tuple(pred_noise.shape) != tuple(eps.shape):
        raise DomainError("shape mismatch")
    return w_t * (pred_noise - eps)


def latent_sds_step(codec: LatentCodec, predictor: DenoisePredictor, img, cond: TextCondition | None,
                    t: int, rng: np.random.Generator | None, sched: NoiseSchedule, eps=None,
                    weighting: str = "constant", guidance_scale: float | None = None) -> torch.Tensor:
    """Pixel-space gradient of latent SDS: w(t)(eps_hat - eps) pulled back
    through the encoder Jacobian. The caller chains it through the renderer."""
    x = as_image(img).detach().requires_grad_(True)
    with torch.enable_grad():
        z = codec.encode(x)
    if eps is None:
        eps = torch.as_tensor(rng.standard_normal(tuple(z.shape)), dtype=DTYPE)
    eps = torch.as_tensor(eps, dtype=DTYPE)
    z_t = noise_sample(z.detach(), t, eps, sched)
    try:
        with torch.no_grad():
            pred = predictor.predict_noise(z_t, t, cond, guidance_scale=guidance_scale)
    except (DomainError, NumericError):
        raise
    except Exception as exc:  # adapters surface their own failures
        from .errors import BackendError
        raise BackendError(f"denoise predictor failed: {exc}") from exc
    g = sds_gradient(pred, eps, sched.weight(t, weighting))
    (grad,) = torch.autograd.grad(z, x, grad_outputs=g.to(z.dtype))
    return grad


def sds_surrogate(img: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Scalar whose gradient w.r.t. ``img`` is ``grad``."""
    return (grad.detach() * img).sum()


def skewed_timestep_probs(T: int, alpha: float = 0.5) -> np.ndarray:
    """p(t) proportional to (1/T)(1 - alpha cos(pi t / T)) for t = 1..T."""
    if not 0.0 <= alpha < 1.0:
        raise DomainError("alpha must lie in [0, 1)")
    t = np.arange(1, T + 1, dtype=float)
    f = (1.0 - alpha * np.cos(np.pi * t / T)) / T
    return f / math.fsum(f)


def sample_timestep_skewed(T: int, alpha: float, rng: np.random.Generator, size: int | None = None):
    """One timestep in 1..T, or an array of ``size`` draws."""
    p = skewed_timestep_probs(T, alpha)
    if size is None:
        return int(rng.choice(T, p=p)) + 1
    return rng.choice(T, size=size, p=p) + 1


def ldm_objective(gen: EmbeddingGenerator, image, t: int, cond: TextCondition, eps,
                  training: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """||eps - eps_theta(z_t, t, c(y))||^2 with gradients for the trainable
    token slots of ``cond``."""
    slots = list(cond.token_slots)
    if training and not slots:
        raise DomainError("ldm_objective needs at least one trainable token slot")
    return gen.ldm_loss_and_grads(image, t, cond, torch.as_tensor(eps, dtype=DTYPE), slots)


def prompt_placeholders(prompt: str) -> list[str]:
    return re.findall(r"<[^<>\s]+>", prompt)


def condition_slots(cond: TextCondition) -> Mapping[str, torch.Tensor]:
    return cond.token_slots or {}
