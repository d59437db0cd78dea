"""Backend selection for CLI runs.

``mock`` uses the deterministic stand-ins from :mod:`vectorsketch.mocks`.
Real models plug in through :func:`register_adapter`: a factory receiving the
BackendSpec and returning a :class:`Backends` bundle.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import BackendSpec
from .errors import BackendError
from .guidance import EmbeddingGenerator, ImageEncoder, LatentCodec, NoiseSchedule
from .mocks import MockEmbeddingGenerator, MockImageEncoder, MockLatentCodec


@dataclass
class Backends:
    encoder: ImageEncoder
    codec: LatentCodec
    generator: EmbeddingGenerator
    schedule: NoiseSchedule
    # builds a denoiser for a pipeline; mock backends need a pixel-space target
    image_predictor: Callable | None = None
    video_predictor: Callable | None = None
    is_mock: bool = True


_ADAPTERS: dict[str, Callable[[BackendSpec], Backends]] = {}


def register_adapter(name: str, factory: Callable[[BackendSpec], Backends]) -> None:
    _ADAPTERS[name] = factory


def available_adapters() -> list[str]:
    return sorted(_ADAPTERS)


def mock_backends() -> Backends:
    return Backends(MockImageEncoder(), MockLatentCodec(), MockEmbeddingGenerator(), NoiseSchedule.cosine(1000))


def load_backends(spec: BackendSpec) -> Backends:
    if spec.kind == "mock":
        return mock_backends()
    if not spec.adapter:
        raise BackendError("backend.kind is 'adapter' but backend.adapter is not set")
    factory = _ADAPTERS.get(spec.adapter)
    if factory is None:
        known = ", ".join(available_adapters()) or "none registered"
        raise BackendError(f"unknown backend adapter {spec.adapter!r} (available: {known})")
    try:
        return factory(spec)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"adapter {spec.adapter!r} failed to load: {exc}") from exc


def prompt_rng(prompt: str) -> np.random.Generator:
    """Deterministic per-prompt stream used to shape mock targets."""
    return np.random.default_rng(zlib.crc32(prompt.strip().lower().encode("utf-8")))
