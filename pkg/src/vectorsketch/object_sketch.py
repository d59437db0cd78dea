"""Object sketching: saliency-guided stroke initialization followed by direct
optimization of Bezier control points under an encoder-based loss."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import DomainError
from .geometry import Stroke, VectorSketch
from .guidance import ImageEncoder, as_image, layer_l2_loss, semantic_loss
from .raster import (
    DTYPE,
    AugmentConfig,
    SoftRasterConfig,
    apply_augmentation,
    render_tensor,
    sample_augmentation,
)


@dataclass
class XDoGParams:
    sigma: float = 0.8
    k: float = 1.6
    p: float = 20.0
    eps: float = 0.1
    phi: float = 10.0


@dataclass
class ObjectSketchConfig:
    num_strokes: int = 16
    num_seeds: int = 3
    iterations: int = 2000
    lr: float = 1.0
    w_s: float = 0.1
    geometric_layers: tuple[int, ...] = (3, 4)
    eval_every: int = 10
    converge_delta: float = 1e-5
    init_radius_frac: float = 0.05
    stroke_width: float = 1.5
    canvas: tuple[int, int] = (224, 224)
    softmax_temperature: float = 0.3
    crop_frac: float = 0.9
    augment: AugmentConfig | None = None
    raster: SoftRasterConfig = field(default_factory=SoftRasterConfig)
    xdog: XDoGParams = field(default_factory=XDoGParams)

    def __post_init__(self):
        if self.num_strokes < 1 or self.num_seeds < 1 or self.eval_every < 1:
            raise DomainError("stroke, seed and eval counts must be positive")
        if self.iterations < 0:
            raise DomainError("iterations must be non-negative")
        if self.w_s < 0:
            raise DomainError("w_s must be non-negative")
        self.geometric_layers = tuple(int(v) for v in self.geometric_layers)
        self.canvas = (int(self.canvas[0]), int(self.canvas[1]))

    def augment_config(self) -> AugmentConfig:
        if self.augment is not None:
            return self.augment
        w, h = self.canvas
        crop = (max(1, round(self.crop_frac * h)), max(1, round(self.crop_frac * w)))
        return AugmentConfig(crop_size=crop, output_size=(h, w))


@dataclass
class LossTrace:
    train: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval: list[float] = field(default_factory=list)
    best_step: int = 0

    @property
    def initial_eval(self) -> float:
        return self.eval[0]

    @property
    def final_eval(self) -> float:
        return self.eval[-1]

    @property
    def best_eval(self) -> float:
        return self.eval[self.eval_steps.index(self.best_step)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "train_loss", "eval_loss"])
        evals = dict(zip(self.eval_steps, self.eval))
        last = max([len(self.train) - 1] + self.eval_steps)
        for k in range(last + 1):
            tr = f"{self.train[k]:.10g}" if k < len(self.train) else ""
            ev = f"{evals[k]:.10g}" if k in evals else ""
            w.writerow([k, tr, ev])
        return buf.getvalue()


# ----------------------------------------------------------------------------
# initialization


def _gray(img) -> np.ndarray:
    a = np.asarray(img, dtype=float)
    return a.mean(axis=-1) if a.ndim == 3 else a


def xdog_edges(img, params: XDoGParams | None = None) -> np.ndarray:
    """Edge strength in [0, 1].

    u = p * |G_sigma(I) - G_{k sigma}(I)| on the gray image; pixels with
    u >= eps get tanh(phi (u - eps)), the rest 0. Taking the difference alone
    (rather than the sharpened image) makes flat regions exactly zero.
    """
    prm = params or XDoGParams()
    g = _gray(img)
    a = ndimage.gaussian_filter(g, prm.sigma, mode="nearest")
    b = ndimage.gaussian_filter(g, prm.sigma * prm.k, mode="nearest")
    u = prm.p * np.abs(a - b)
    return np.where(u >= prm.eps, np.tanh(prm.phi * (u - prm.eps)), 0.0)


def gradient_saliency(img) -> np.ndarray:
    """Fallback saliency: gradient magnitude of the gray image scaled to [0, 1]."""
    g = _gray(img)
    mag = np.hypot(ndimage.sobel(g, axis=0, mode="nearest"), ndimage.sobel(g, axis=1, mode="nearest"))
    top = mag.max()
    return mag / top if top > 0 else mag


def build_init_distribution(saliency, edges, temperature: float = 0.3) -> np.ndarray:
    """Softmax of saliency*edges / temperature over the pixels where the
    product is positive; other pixels get probability 0. An all-zero product
    gives the uniform distribution."""
    s = np.asarray(saliency, dtype=float)
    e = np.asarray(edges, dtype=float)
    if s.shape != e.shape:
        raise DomainError(f"saliency {s.shape} and edge map {e.shape} differ")
    if (s < 0).any():
        raise DomainError("saliency must be non-negative")
    prod = s * e
    support = prod > 0
    if not support.any():
        return np.full(prod.shape, 1.0 / prod.size)
    x = prod[support] / temperature
    w = np.exp(x - x.max())
    out = np.zeros_like(prod)
    out[support] = w / w.sum()
    return out


def init_strokes(dist, n: int, cfg: ObjectSketchConfig, rng: np.random.Generator) -> VectorSketch:
    probs = np.asarray(dist, dtype=float)
    w, h = cfg.canvas
    if probs.shape != (h, w):
        raise DomainError(f"distribution {probs.shape} does not match canvas {(h, w)}")
    if n < 1:
        raise DomainError("need at least one stroke")
    flat = probs.ravel() / probs.sum()
    radius = cfg.init_radius_frac * min(w, h)
    strokes = []
    for _ in range(n):
        idx = int(rng.choice(flat.size, p=flat))
        r, c = divmod(idx, w)
        p0 = np.array([c, r], dtype=float)
        rad = radius * np.sqrt(rng.random(3))
        ang = 2.0 * np.pi * rng.random(3)
        sat = p0 + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        strokes.append(Stroke(np.vstack([p0, sat]), width=cfg.stroke_width))
    return VectorSketch(strokes, cfg.canvas)


# ----------------------------------------------------------------------------
# optimization


def object_loss(enc: ImageEncoder, target, sketch_img, cfg: ObjectSketchConfig) -> torch.Tensor:
    loss = layer_l2_loss(enc, target, sketch_img, cfg.geometric_layers)
    if cfg.w_s:
        loss = loss + cfg.w_s * semantic_loss(enc, target, sketch_img)
    return loss


def _points_of(sketch: VectorSketch) -> list[torch.Tensor]:
    return [torch.tensor(s.points, dtype=DTYPE, requires_grad=True) for s in sketch.strokes]


def _commit(sketch: VectorSketch, params: Sequence[torch.Tensor]) -> VectorSketch:
    pts = np.concatenate([p.detach().numpy() for p in params], axis=0)
    return sketch.with_control_points(pts)


def optimize_object_sketch(target, cfg: ObjectSketchConfig, enc: ImageEncoder, rng: np.random.Generator,
                           init: VectorSketch | None = None, saliency=None) -> tuple[VectorSketch, LossTrace]:
    """Adam on control point coordinates only. Evaluation (no augmentation)
    runs at iterate 0, every ``eval_every`` iterates and at the last one; the
    sketch with the lowest evaluation loss is returned."""
    tgt = as_image(target)
    w, h = cfg.canvas
    if tuple(tgt.shape[:2]) != (h, w):
        raise DomainError(f"target {tuple(tgt.shape[:2])} does not match canvas {(h, w)}")
    if init is None:
        sal = gradient_saliency(tgt.numpy()) if saliency is None else np.asarray(saliency, dtype=float)
        dist = build_init_distribution(sal, xdog_edges(tgt.numpy(), cfg.xdog), cfg.softmax_temperature)
        init = init_strokes(dist, cfg.num_strokes, cfg, rng)
    channels = tgt.shape[2]
    params = _points_of(init)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    aug_cfg = cfg.augment_config()
    trace = LossTrace()
    best_loss, best_pts = math.inf, [p.detach().clone() for p in params]

    def evaluate(step: int) -> float:
        nonlocal best_loss, best_pts
        with torch.no_grad():
            img = render_tensor(init, cfg.raster, points=params, channels=channels)
            val = float(object_loss(enc, tgt, img, cfg))
        trace.eval_steps.append(step)
        trace.eval.append(val)
        if val < best_loss:
            best_loss, best_pts, trace.best_step = val, [p.detach().clone() for p in params], step
        return val

    for step in range(cfg.iterations):
        if step % cfg.eval_every == 0:
            evaluate(step)
            if len(trace.eval) > 1 and abs(trace.eval[-1] - trace.eval[-2]) < cfg.converge_delta:
                break
        img = render_tensor(init, cfg.raster, points=params, channels=channels)
        aug = sample_augmentation((h, w), aug_cfg, rng)
        loss = object_loss(enc, apply_augmentation(tgt, aug, aug_cfg.output_size),
                           apply_augmentation(img, aug, aug_cfg.output_size), cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.train.append(float(loss.detach()))
    else:
        evaluate(cfg.iterations)
    return _commit(init, best_pts), trace


def select_lowest(losses: Sequence[float]) -> int:
    """Index of the smallest loss; ties go to the lowest index."""
    if not losses:
        raise DomainError("no candidates")
    return int(np.argmin(np.asarray(losses, dtype=float)))


def run_seeds(target, cfg: ObjectSketchConfig, enc: ImageEncoder, seed: int = 0,
              runner: Callable | None = None) -> list[tuple[VectorSketch, LossTrace]]:
    """One optimization per seed index k, each with rng default_rng([seed, k])."""
    run = runner or (lambda k: optimize_object_sketch(target, cfg, enc, np.random.default_rng([seed, k])))
    return [run(k) for k in range(cfg.num_seeds)]


def multi_seed_select(target, cfg: ObjectSketchConfig, enc: ImageEncoder, seed: int = 0,
                      runner: Callable | None = None) -> VectorSketch:
    runs = run_seeds(target, cfg, enc, seed, runner)
    return runs[select_lowest([tr.best_eval for _, tr in runs])][0]
