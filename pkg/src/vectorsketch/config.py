"""Run configuration, named RNG streams and run manifests.

Config files are YAML. Every key is validated; unknown keys are rejected.
Environment variables prefixed ``VB_`` override file values, with ``__``
separating nesting levels, e.g. ``VB_SEED=3`` or ``VB_OBJECT__ITERATIONS=50``.
Values are parsed as YAML scalars.
"""
from __future__ import annotations

import hashlib
import json
import os
import zlib
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

ENV_PREFIX = "VB_"
TOOLKIT_VERSION = "0.1.0"
PIPELINES = ("object", "scene", "word", "animate", "concept")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackendSpec(_Block):
    kind: Literal["mock", "adapter"] = "mock"
    adapter: Optional[str] = None
    weights: Optional[str] = None


class ObjectBlock(_Block):
    image: Optional[str] = None
    saliency: str = "auto"  # "auto" or a grayscale image path
    num_strokes: int = Field(16, ge=1)
    num_seeds: int = Field(3, ge=1)
    iterations: int = Field(2000, ge=0)
    lr: float = Field(1.0, gt=0)
    w_s: float = Field(0.1, ge=0)
    geometric_layers: list[int] = [3, 4]
    eval_every: int = Field(10, ge=1)
    stroke_width: float = Field(1.5, ge=0)
    canvas: int = Field(224, ge=8)


class SceneBlock(_Block):
    image: Optional[str] = None
    mask: Optional[str] = None
    bg: Optional[str] = None
    num_strokes: int = Field(64, ge=1)
    fidelity_layers: list[int] = [2, 7, 8, 11]
    levels: int = Field(4, ge=1)
    iterations: int = Field(2000, ge=0)
    steps_per_level: int = Field(500, ge=0)
    offset_lr: float = Field(1e-3, gt=0)
    keep_lr: float = Field(1e-3, gt=0)
    stroke_width: float = Field(1.5, ge=0)
    canvas: int = Field(224, ge=8)


class WordBlock(_Block):
    word: Optional[str] = None
    letters: Optional[list[int]] = None
    glyph_dir: Optional[str] = None
    font: str = "DejaVu Sans"
    iterations: int = Field(500, ge=0)
    render_size: int = Field(600, ge=16)
    crop_size: Optional[int] = 512
    control_points: int = Field(128, ge=3)
    acap_weight: float = Field(0.5, ge=0)
    lpf_sigma: float = Field(30.0, gt=0)
    height: int = Field(200, ge=16)


class AnimateBlock(_Block):
    svg: Optional[str] = None
    prompt: Optional[str] = None
    frames: int = Field(24, ge=1)
    steps: int = Field(1000, ge=0)
    render_size: int = Field(256, ge=8)
    hidden: int = Field(128, ge=2)
    augment: bool = True
    fps: float = Field(12.0, gt=0)


class ConceptBlock(_Block):
    images: Optional[str] = None
    depth: int = Field(2, ge=0)
    k_seeds: int = Field(4, ge=1)
    probe_steps: int = Field(200, ge=0)
    final_steps: int = Field(1500, ge=0)
    parent_set_size: int = Field(10, ge=1)
    node_sample_size: int = Field(40, ge=2)
    stop_threshold: float = 0.65
    lr: float = Field(5e-3, gt=0)


BLOCKS = {"object": ObjectBlock, "scene": SceneBlock, "word": WordBlock, "animate": AnimateBlock,
          "concept": ConceptBlock}


class RunConfig(_Block):
    pipeline: Literal["object", "scene", "word", "animate", "concept"]
    seed: int = 0
    backend: BackendSpec = BackendSpec()
    output_dir: str = "run"
    object: Optional[ObjectBlock] = None
    scene: Optional[SceneBlock] = None
    word: Optional[WordBlock] = None
    animate: Optional[AnimateBlock] = None
    concept: Optional[ConceptBlock] = None

    def block(self):
        return getattr(self, self.pipeline)


def _error_text(exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def env_overrides(environ=None) -> dict:
    """Nested dict built from VB_* variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: conflicting override")
        node[path[-1]] = yaml.safe_load(environ[key])
    return out


def deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: dict, environ=None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = deep_merge(raw, env_overrides(environ))
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_error_text(exc)) from None
    if cfg.block() is None:
        setattr(cfg, cfg.pipeline, BLOCKS[cfg.pipeline]())
    return cfg


def parse_config(path, environ=None) -> RunConfig:
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML ({exc})") from exc
    return config_from_dict(raw or {}, environ)


def canonical_yaml(cfg: RunConfig) -> str:
    """Sorted-key YAML of every field including defaults. Unused pipeline
    blocks and the output location are dropped, so the same run written to
    two folders has the same canonical form and hash."""
    data = cfg.model_dump(mode="json", exclude_none=False)
    data.pop("output_dir", None)
    for name in PIPELINES:
        if data.get(name) is None:
            data.pop(name, None)
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_yaml(cfg).encode("utf-8")).hexdigest()


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named sub-stream of the run seed (init, augment, timestep, noise, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


# ----------------------------------------------------------------------------
# manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class ArtifactEntry(BaseModel):
    path: str
    sha256: str
    bytes: int


class RunManifest(BaseModel):
    pipeline: str
    seed: int
    config_hash: str
    toolkit_version: str = TOOLKIT_VERSION
    started: str
    finished: str
    losses: dict[str, float] = {}
    artifacts: list[ArtifactEntry] = []


MANIFEST_NAME = "manifest.json"


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_manifest(cfg: RunConfig, out_dir, started: str, losses: dict[str, float]) -> RunManifest:
    """List every file under ``out_dir`` except the manifest itself."""
    root = Path(out_dir)
    arts = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            arts.append(ArtifactEntry(path=p.relative_to(root).as_posix(), sha256=sha256_file(p),
                                      bytes=p.stat().st_size))
    return RunManifest(pipeline=cfg.pipeline, seed=cfg.seed, config_hash=config_hash(cfg), started=started,
                       finished=now_iso(), losses=losses, artifacts=arts)


def write_manifest(manifest: RunManifest, out_dir) -> Path:
    p = Path(out_dir) / MANIFEST_NAME
    p.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return p
