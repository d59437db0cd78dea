"""Scene sketching along two axes: fidelity (which encoder layer drives the
loss) and simplicity (learned per-stroke keep probabilities)."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import DomainError, NumericError
from .geometry import VectorSketch
from .guidance import ImageEncoder, as_image, layer_l2_loss
from .object_sketch import (
    LossTrace,
    ObjectSketchConfig,
    XDoGParams,
    build_init_distribution,
    gradient_saliency,
    init_strokes,
    xdog_edges,
)
from .raster import DTYPE, SoftRasterConfig, render_tensor

FOREGROUND_EXTRA_LAYER = 4


@dataclass
class SceneSketchConfig:
    num_strokes: int = 64
    fidelity_layers: tuple[int, ...] = (2, 7, 8, 11)
    levels: int = 4  # rows of the matrix, the first being unsimplified
    iterations: int = 2000
    steps_per_level: int = 500
    offset_lr: float = 1e-3
    keep_lr: float = 1e-3
    hidden: int = 128
    keep_bias: float = 3.0
    ratio_step_const: float = 1.0
    eval_every: int = 10
    stroke_width: float = 1.5
    init_radius_frac: float = 0.05
    softmax_temperature: float = 0.3
    canvas: tuple[int, int] = (224, 224)
    raster: SoftRasterConfig = field(default_factory=SoftRasterConfig)
    xdog: XDoGParams = field(default_factory=XDoGParams)

    def __post_init__(self):
        if self.num_strokes < 1 or self.levels < 1 or self.hidden < 1:
            raise DomainError("stroke count, levels and hidden width must be positive")
        if self.iterations < 0 or self.steps_per_level < 0:
            raise DomainError("step counts must be non-negative")
        self.fidelity_layers = tuple(int(v) for v in self.fidelity_layers)
        self.canvas = (int(self.canvas[0]), int(self.canvas[1]))

    def object_config(self) -> ObjectSketchConfig:
        return ObjectSketchConfig(num_strokes=self.num_strokes, stroke_width=self.stroke_width,
                                  init_radius_frac=self.init_radius_frac, canvas=self.canvas,
                                  softmax_temperature=self.softmax_temperature, xdog=self.xdog)


# ----------------------------------------------------------------------------
# losses and schedule


def sparsity_loss(P) -> torch.Tensor | float:
    """||P||_1 / n."""
    if isinstance(P, torch.Tensor):
        if P.numel() == 0:
            raise DomainError("empty probability vector")
        return P.abs().sum() / P.numel()
    p = np.asarray(P, dtype=float).ravel()
    if p.size == 0:
        raise DomainError("empty probability vector")
    return float(np.abs(p).sum() / p.size)


def ratio_loss(l_sparse, l_clip, r: float):
    """(l_sparse / l_clip - r)^2."""
    if float(l_clip) == 0.0:
        raise NumericError("ratio loss needs a non-zero encoder loss")
    return (l_sparse / l_clip - r) ** 2


def build_ratio_schedule(l_clip_at_k: float, m: int, c: float = 1.0) -> list[float]:
    """factors[0] = 1 / l_clip; each next factor divides by 2**step with
    step = max(1, round(c * l_clip))."""
    if not l_clip_at_k > 0 or m < 1 or c <= 0:
        raise DomainError("schedule needs l_clip > 0, m >= 1 and c > 0")
    step = max(1, int(round(c * l_clip_at_k)))
    out = [1.0 / l_clip_at_k]
    for _ in range(m - 1):
        out.append(out[-1] / 2.0 ** step)
    return out


def apply_keep_probs(sketch: VectorSketch, P) -> VectorSketch:
    p = np.asarray(P, dtype=float).ravel()
    if p.size != len(sketch.strokes):
        raise DomainError(f"{p.size} probabilities for {len(sketch.strokes)} strokes")
    if (p < 0).any() or (p > 1).any():
        raise DomainError("keep probabilities must lie in [0, 1]")
    strokes = [replace(s, points=s.points.copy(), width=s.width * float(pi)) for s, pi in zip(sketch.strokes, p)]
    return VectorSketch(strokes, sketch.canvas, sketch.background)


# ----------------------------------------------------------------------------
# networks


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class OffsetNetwork(nn.Module):
    """Per-point projection 2 -> hidden, then three fully connected layers
    with SELU, producing a 2-vector offset per control point. The last layer
    starts at zero so the initial output is exactly the initial sketch."""

    def __init__(self, hidden: int = 128):
        super().__init__()
        self.proj = nn.Linear(2, hidden)
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 2)
        nn.init.zeros_(self.fc3.weight)
        nn.init.zeros_(self.fc3.bias)
        self.double()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.selu(self.proj(z))
        h = torch.selu(self.fc1(h))
        h = torch.selu(self.fc2(h))
        return self.fc3(h)


class KeepProbNetwork(nn.Module):
    """Three fully connected layers on a frozen random input, sigmoid head.

    Outputs are mapped to [1e-6, 1 - 1e-6] so they stay strictly inside
    (0, 1) even when the sigmoid saturates.
    """

    margin = 1e-6

    def __init__(self, n: int, hidden: int = 128, seed: int = 0, bias: float = 3.0):
        super().__init__()
        gen = np.random.default_rng(seed)
        self.register_buffer("x", torch.as_tensor(gen.standard_normal(hidden), dtype=DTYPE))
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, n)
        with torch.no_grad():
            self.fc3.weight.mul_(0.1)
            self.fc3.bias.fill_(bias)
        self.double()

    def forward(self) -> torch.Tensor:
        h = torch.selu(self.fc1(self.x))
        h = torch.selu(self.fc2(h))
        return self.margin + (1 - 2 * self.margin) * torch.sigmoid(self.fc3(h))


def make_offset_network(hidden: int, seed: int) -> OffsetNetwork:
    return _seeded(seed, lambda: OffsetNetwork(hidden))


def make_keep_network(n: int, hidden: int, seed: int, bias: float = 3.0) -> KeepProbNetwork:
    return _seeded(seed, lambda: KeepProbNetwork(n, hidden, seed, bias))


# ----------------------------------------------------------------------------
# fidelity rows


@dataclass
class FidelityResult:
    layer: int
    layers: tuple[int, ...]
    init: VectorSketch
    sketch: VectorSketch
    net: OffsetNetwork
    trace: LossTrace
    l_clip: float
    optimizer: torch.optim.Adam | None = None


@dataclass
class SimplifiedSketch:
    sketch: VectorSketch  # widths already scaled by probs
    probs: np.ndarray
    ratio: float
    l_clip: float
    l_sparse: float

    def kept(self, threshold: float = 0.5) -> int:
        return int((self.probs > threshold).sum())


class _Deformer:
    """Maps network output back to per-stroke control point tensors."""

    def __init__(self, init: VectorSketch):
        self.init = init
        w, h = init.canvas
        self.scale = torch.tensor([w / 2.0, h / 2.0], dtype=DTYPE)
        self.pts = torch.as_tensor(init.control_points(), dtype=DTYPE)
        self.z = self.pts / self.scale - 1.0
        self.counts = init.point_counts()

    def points(self, net: OffsetNetwork) -> list[torch.Tensor]:
        # offsets live in normalised coordinates; adding them to the pixel
        # positions keeps a zero offset exact
        return list(torch.split(self.pts + net(self.z) * self.scale, self.counts))

    def sketch(self, net: OffsetNetwork) -> VectorSketch:
        with torch.no_grad():
            pts = torch.cat(self.points(net)).numpy()
        return self.init.with_control_points(pts)


def scene_layers(layer: int, foreground: bool) -> tuple[int, ...]:
    return (layer, FOREGROUND_EXTRA_LAYER) if foreground and layer != FOREGROUND_EXTRA_LAYER else (layer,)


def scene_init(image, cfg: SceneSketchConfig, rng: np.random.Generator, saliency=None) -> VectorSketch:
    img = as_image(image).numpy()
    sal = gradient_saliency(img) if saliency is None else np.asarray(saliency, dtype=float)
    dist = build_init_distribution(sal, xdog_edges(img, cfg.xdog), cfg.softmax_temperature)
    return init_strokes(dist, cfg.num_strokes, cfg.object_config(), rng)


def fidelity_row(image, layer_k: int, cfg: SceneSketchConfig, enc: ImageEncoder, rng: np.random.Generator,
                 foreground: bool = False, init: VectorSketch | None = None, saliency=None,
                 net_seed: int | None = None) -> FidelityResult:
    """Train an offset network against the layer-l2 loss at ``layer_k``
    (plus layer 4 in foreground mode)."""
    tgt = as_image(image)
    w, h = cfg.canvas
    if tuple(tgt.shape[:2]) != (h, w):
        raise DomainError(f"image {tuple(tgt.shape[:2])} does not match canvas {(h, w)}")
    layers = scene_layers(layer_k, foreground)
    enc.activations(tgt, layers)  # fail fast on unknown layers
    init = init if init is not None else scene_init(tgt, cfg, rng, saliency)
    seed = int(rng.integers(2 ** 31)) if net_seed is None else net_seed
    net = make_offset_network(cfg.hidden, seed)
    deform = _Deformer(init)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.offset_lr)
    channels = tgt.shape[2]
    trace = LossTrace()

    def loss_now() -> torch.Tensor:
        img = render_tensor(init, cfg.raster, points=deform.points(net), channels=channels)
        return layer_l2_loss(enc, tgt, img, layers)

    for step in range(cfg.iterations):
        loss = loss_now()
        if step % cfg.eval_every == 0:
            trace.eval_steps.append(step)
            trace.eval.append(float(loss.detach()))
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.train.append(float(loss.detach()))
    with torch.no_grad():
        final = float(loss_now())
    trace.eval_steps.append(cfg.iterations)
    trace.eval.append(final)
    trace.best_step = cfg.iterations
    return FidelityResult(layer_k, layers, init, deform.sketch(net), net, trace, final, opt)


def simplify_iteratively(fid: FidelityResult, image, schedule: Sequence[float], cfg: SceneSketchConfig,
                         enc: ImageEncoder, keep_seed: int = 0) -> list[SimplifiedSketch]:
    """One level per factor. The keep network is trained from scratch at the
    first level and both networks continue through the later ones. Objective
    per step: L_CLIP + L_sparse + (L_sparse / L_CLIP - r)^2, with L_CLIP held
    constant inside the ratio term."""
    if len(schedule) < 1:
        raise DomainError("schedule must have at least one factor")
    tgt = as_image(image)
    init = fid.init
    deform = _Deformer(init)
    net = copy.deepcopy(fid.net)
    keep = make_keep_network(len(init.strokes), cfg.hidden, keep_seed, cfg.keep_bias)
    # fine-tuning continues the fidelity optimizer so its moment estimates carry over
    opt = torch.optim.Adam(net.parameters(), lr=cfg.offset_lr)
    if fid.optimizer is not None:
        opt.load_state_dict(copy.deepcopy(fid.optimizer.state_dict()))
    opt.add_param_group({"params": list(keep.parameters()), "lr": cfg.keep_lr})
    base_w = torch.tensor([s.width for s in init.strokes], dtype=DTYPE)
    channels = tgt.shape[2]

    def losses():
        P = keep()
        img = render_tensor(init, cfg.raster, points=deform.points(net), widths=base_w * P, channels=channels)
        l_clip = layer_l2_loss(enc, tgt, img, fid.layers)
        return P, l_clip, sparsity_loss(P)

    out = []
    for r in schedule:
        for _ in range(cfg.steps_per_level):
            P, l_clip, l_sparse = losses()
            total = l_clip + l_sparse + ratio_loss(l_sparse, l_clip.detach(), r)
            opt.zero_grad()
            total.backward()
            opt.step()
        with torch.no_grad():
            P, l_clip, l_sparse = losses()
        probs = P.detach().numpy().copy()
        out.append(SimplifiedSketch(apply_keep_probs(deform.sketch(net), probs), probs, float(r),
                                    float(l_clip), float(l_sparse)))
    return out


def decompose_scene(image, fg_mask, bg_inpainted) -> tuple[np.ndarray, np.ndarray]:
    """Foreground composited on white by the mask; background passed through."""
    img = np.asarray(image, dtype=float)
    mask = np.asarray(fg_mask, dtype=float)
    bg = np.asarray(bg_inpainted, dtype=float)
    if mask.ndim == 3:
        mask = mask.mean(axis=-1)
    if img.shape[:2] != mask.shape or bg.shape != img.shape:
        raise DomainError(f"image {img.shape}, mask {mask.shape} and background {bg.shape} must match")
    if (mask < 0).any() or (mask > 1).any():
        raise DomainError("mask values must lie in [0, 1]")
    m = mask[..., None] if img.ndim == 3 else mask
    return img * m + (1.0 - m), bg.copy()


# ----------------------------------------------------------------------------
# matrix


@dataclass
class MatrixCell:
    sketch: VectorSketch
    probs: np.ndarray | None = None
    loss: float | None = None


@dataclass
class AbstractionMatrix:
    """cells[j][k]: simplicity level j (0 = unsimplified), fidelity level k."""

    cells: list[list[MatrixCell]]

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.cells), len(self.cells[0]) if self.cells else 0)

    def cell(self, j: int, k: int) -> MatrixCell:
        return self.cells[j][k]


def assemble_matrix(rows: Sequence[tuple]) -> AbstractionMatrix:
    """``rows``: one (fidelity sketch, simplified list) pair per fidelity
    level. Entries may be VectorSketch, FidelityResult, SimplifiedSketch or
    MatrixCell."""
    if not rows:
        raise DomainError("no fidelity levels")
    lengths = {len(simp) for _, simp in rows}
    if len(lengths) != 1:
        raise DomainError(f"ragged simplification lists: {sorted(lengths)}")
    m = 1 + lengths.pop()

    def cell(x) -> MatrixCell:
        if isinstance(x, MatrixCell):
            return x
        if isinstance(x, FidelityResult):
            return MatrixCell(x.sketch, None, x.l_clip)
        if isinstance(x, SimplifiedSketch):
            return MatrixCell(x.sketch, x.probs, x.l_clip)
        if isinstance(x, VectorSketch):
            return MatrixCell(x)
        raise DomainError(f"cannot place {type(x).__name__} in a matrix")

    cols = [[cell(fid)] + [cell(s) for s in simp] for fid, simp in rows]
    return AbstractionMatrix([[cols[k][j] for k in range(len(cols))] for j in range(m)])


def combine_matrices(fg: AbstractionMatrix, bg: AbstractionMatrix) -> AbstractionMatrix:
    """Cell-wise union of stroke lists (foreground drawn last)."""
    if fg.shape != bg.shape:
        raise DomainError(f"matrix shapes differ: {fg.shape} vs {bg.shape}")
    cells = []
    for rf, rb in zip(fg.cells, bg.cells):
        row = []
        for cf, cb in zip(rf, rb):
            if cf.sketch.canvas != cb.sketch.canvas:
                raise DomainError("foreground and background canvases differ")
            sk = VectorSketch([*cb.sketch.copy().strokes, *cf.sketch.copy().strokes], cf.sketch.canvas,
                              cf.sketch.background)
            probs = None
            if cf.probs is not None and cb.probs is not None:
                probs = np.concatenate([cb.probs, cf.probs])
            row.append(MatrixCell(sk, probs, None))
        cells.append(row)
    return AbstractionMatrix(cells)


def sketch_scene(image, cfg: SceneSketchConfig, enc: ImageEncoder, rng: np.random.Generator,
                 foreground: bool = False, saliency=None) -> AbstractionMatrix:
    """Full matrix for one region: a fidelity row per layer, then
    ``levels - 1`` simplification steps below each."""
    rows = []
    for layer in cfg.fidelity_layers:
        fid = fidelity_row(image, layer, cfg, enc, rng, foreground=foreground, saliency=saliency)
        simp = []
        if cfg.levels > 1:
            sched = build_ratio_schedule(fid.l_clip, cfg.levels - 1, cfg.ratio_step_const) if fid.l_clip > 0 else None
            if sched is None:
                raise NumericError(f"zero encoder loss at layer {layer}; cannot build ratio schedule")
            simp = simplify_iteratively(fid, image, sched, cfg, enc, keep_seed=int(rng.integers(2 ** 31)))
        rows.append((fid, simp))
    return assemble_matrix(rows)


def raster_distance(a, b) -> float:
    """Mean absolute difference of two equally sized images."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DomainError("shape mismatch")
    return float(np.mean(np.abs(a - b)))

