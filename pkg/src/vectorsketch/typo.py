"""Word-as-image: deform one letter's outline toward a concept while ACAP and
tone terms keep it legible, then put it back into the word."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import DomainError
from .geometry import Box2, GlyphOutline, Stroke, Triangulation, VectorSketch, fit_into_box, glyph_triangulation, subdivide_outline
from .guidance import (
    DenoisePredictor,
    LatentCodec,
    NoiseSchedule,
    TextCondition,
    latent_sds_step,
    sds_surrogate,
)
from .raster import DTYPE, AugmentConfig, SoftRasterConfig, apply_augmentation, low_pass, render_filled_loops, sample_augmentation

PROMPT_TEMPLATE = "a {word}. minimal flat 2d vector. lineal color. trending on artstation."
ANGLE_EPS = 1e-12


@dataclass
class ToneScheduleParams:
    a: float = 100.0
    b: int = 300
    c: float = 30.0

    def __post_init__(self):
        if self.a < 0 or self.c <= 0:
            raise DomainError("tone schedule needs a >= 0 and c > 0")


@dataclass
class WordAsImageConfig:
    acap_weight: float = 0.5
    lpf_sigma: float = 30.0
    iterations: int = 500
    lr_init: float = 0.1
    lr_peak: float = 0.8
    lr_final: float = 0.4
    warmup: int = 100
    adam_betas: tuple[float, float] = (0.9, 0.9)
    adam_eps: float = 1e-6
    render_size: int = 600
    crop: int | None = 512
    perspective_distortion: float = 0.5
    perspective_prob: float = 0.7
    control_points: int = 128
    margin_frac: float = 0.1
    t_min: int = 50
    t_max: int = 950
    sds_weighting: str = "constant"
    tone: ToneScheduleParams = field(default_factory=ToneScheduleParams)
    prompt_template: str = PROMPT_TEMPLATE
    raster: SoftRasterConfig = field(default_factory=SoftRasterConfig)

    def __post_init__(self):
        if self.iterations < 0 or self.warmup < 0:
            raise DomainError("iteration counts must be non-negative")
        if self.lpf_sigma <= 0 or self.render_size < 1 or self.acap_weight < 0:
            raise DomainError("sigma, render size must be positive and the ACAP weight non-negative")
        if min(self.lr_init, self.lr_peak, self.lr_final) <= 0:
            raise DomainError("learning rates must be positive")
        if not 0 <= self.t_min <= self.t_max:
            raise DomainError("need 0 <= t_min <= t_max")

    def augment_config(self) -> AugmentConfig:
        crop = None if self.crop is None else (self.crop, self.crop)
        return AugmentConfig(self.perspective_distortion, self.perspective_prob, crop_size=crop)


@dataclass
class LetterTask:
    word: str
    letter_index: int
    glyph: GlyphOutline  # subdivided and placed on the render canvas
    triangulation: Triangulation
    prompt: str

    def __post_init__(self):
        if not 0 <= self.letter_index < len(self.word):
            raise DomainError(f"letter index {self.letter_index} outside word {self.word!r}")
        if len(self.triangulation.points) != self.glyph.control_point_count():
            raise DomainError("triangulation points do not match glyph control points")


@dataclass
class WordBackends:
    codec: LatentCodec
    predictor: DenoisePredictor
    schedule: NoiseSchedule
    condition: TextCondition | None = None


# ----------------------------------------------------------------------------
# losses


def _signed_angles(p: torch.Tensor, tris: torch.Tensor, orient: torch.Tensor) -> torch.Tensor:
    """Corner angles (T, 3), signed so that triangles keeping their initial
    orientation have positive angles. Edge vectors are normalised with an
    ANGLE_EPS clamp so collapsed triangles stay finite."""
    out = []
    for k in range(3):
        a = p[tris[:, k]]
        u = p[tris[:, (k + 1) % 3]] - a
        v = p[tris[:, (k + 2) % 3]] - a
        u = u / torch.linalg.norm(u, dim=1, keepdim=True).clamp_min(ANGLE_EPS)
        v = v / torch.linalg.norm(v, dim=1, keepdim=True).clamp_min(ANGLE_EPS)
        cross = (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]) * orient
        dot = (u * v).sum(dim=1)
        tiny = cross * cross + dot * dot < ANGLE_EPS ** 2
        out.append(torch.atan2(cross, torch.where(tiny, torch.ones_like(dot), dot)))
    return torch.stack(out, dim=1)


def _orientation(p: torch.Tensor, tris: torch.Tensor) -> torch.Tensor:
    a, b, c = p[tris[:, 0]], p[tris[:, 1]], p[tris[:, 2]]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    return torch.where(cross < 0, -torch.ones_like(cross), torch.ones_like(cross))


def acap_loss(P_init, P_hat, tri: Triangulation) -> torch.Tensor:
    """(1/k) sum over triangle corners of (angle at P_init - angle at P_hat)^2,
    with the triangle topology frozen from ``tri``."""
    p0 = torch.as_tensor(np.asarray(P_init, dtype=float)) if not isinstance(P_init, torch.Tensor) else P_init.to(DTYPE)
    p1 = P_hat.to(DTYPE) if isinstance(P_hat, torch.Tensor) else torch.as_tensor(np.asarray(P_hat, dtype=float))
    k = len(tri.points)
    if p0.shape[0] != k or p1.shape[0] != k:
        raise DomainError(f"point counts {p0.shape[0]}, {p1.shape[0]} differ from triangulation ({k})")
    if len(tri.triangles) == 0:
        return torch.zeros((), dtype=DTYPE)
    tris = torch.as_tensor(tri.triangles, dtype=torch.long)
    orient = _orientation(p0.detach(), tris)
    a0 = _signed_angles(p0, tris, orient)
    a1 = _signed_angles(p1, tris, orient)
    with torch.no_grad():
        d = p1[tris]
        area = (d[:, 1, 0] - d[:, 0, 0]) * (d[:, 2, 1] - d[:, 0, 1]) - (d[:, 1, 1] - d[:, 0, 1]) * (d[:, 2, 0] - d[:, 0, 0])
        if bool((area.abs() < ANGLE_EPS).any()):
            warnings.warn("degenerate triangle in ACAP loss", RuntimeWarning, stacklevel=2)
    return ((a0 - a1) ** 2).sum() / k


def tone_loss(orig, deformed, sigma: float = 30.0):
    """||LPF(orig) - LPF(deformed)||^2 with a Gaussian low-pass."""
    if tuple(orig.shape) != tuple(deformed.shape):
        raise DomainError(f"image shapes differ: {tuple(orig.shape)} vs {tuple(deformed.shape)}")
    diff = low_pass(orig, sigma) - low_pass(deformed, sigma)
    return (diff ** 2).sum() if isinstance(diff, torch.Tensor) else float(np.sum(diff ** 2))


def tone_weight(t: int, params: ToneScheduleParams | None = None) -> float:
    """beta_t = a exp(-(t - b)^2 / (2 c^2))."""
    p = params or ToneScheduleParams()
    if t < 0:
        raise DomainError("step must be non-negative")
    return p.a * math.exp(-((t - p.b) ** 2) / (2.0 * p.c * p.c))


def learning_rate(step: int, cfg: WordAsImageConfig) -> float:
    """Linear warm-up lr_init -> lr_peak, then exponential decay to lr_final
    at the last iteration."""
    if step < cfg.warmup:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step / cfg.warmup
    rest = max(1, cfg.iterations - cfg.warmup)
    frac = min(1.0, (step - cfg.warmup) / rest)
    return cfg.lr_peak * (cfg.lr_final / cfg.lr_peak) ** frac


def build_prompt(word: str, template: str = PROMPT_TEMPLATE) -> str:
    if not word:
        raise DomainError("word must be non-empty")
    return template.format(word=word)


# ----------------------------------------------------------------------------
# letters


def place_on_canvas(glyph: GlyphOutline, size: int, margin_frac: float = 0.1) -> GlyphOutline:
    m = margin_frac * size
    return fit_into_box(glyph, Box2(np.array([m, m]), np.array([size - m, size - m])))


def prepare_letter(word: str, letter_index: int, glyph: GlyphOutline, cfg: WordAsImageConfig) -> LetterTask:
    g = subdivide_outline(glyph, cfg.control_points) if cfg.control_points else glyph
    g = place_on_canvas(g, cfg.render_size, cfg.margin_frac)
    return LetterTask(word, letter_index, g, glyph_triangulation(g), build_prompt(word, cfg.prompt_template))


def _loops(points: torch.Tensor, glyph: GlyphOutline) -> list[torch.Tensor]:
    return list(torch.split(points, glyph.contour_point_counts()))


def render_glyph(points: torch.Tensor, glyph: GlyphOutline, size: int, cfg: SoftRasterConfig | None = None) -> torch.Tensor:
    """Black even-odd fill of the glyph's contours on white, (size, size, 1)."""
    return render_filled_loops(_loops(points, glyph), (size, size), cfg)


def regularizer_loss(points: torch.Tensor, task: LetterTask, step: int, cfg: WordAsImageConfig,
                     orig_img: torch.Tensor | None = None, img: torch.Tensor | None = None) -> tuple[torch.Tensor, dict]:
    """alpha * ACAP + beta_step * tone."""
    p0 = torch.as_tensor(task.glyph.control_points(), dtype=DTYPE)
    acap = acap_loss(p0, points, task.triangulation) if cfg.acap_weight else torch.zeros((), dtype=DTYPE)
    beta = tone_weight(step, cfg.tone)
    if beta:
        if orig_img is None:
            with torch.no_grad():
                orig_img = render_glyph(p0, task.glyph, cfg.render_size, cfg.raster)
        if img is None:
            img = render_glyph(points, task.glyph, cfg.render_size, cfg.raster)
        tone = tone_loss(orig_img, img, cfg.lpf_sigma)
    else:
        tone = torch.zeros((), dtype=DTYPE)
    total = cfg.acap_weight * acap + beta * tone
    return total, {"acap": float(acap.detach()), "tone": float(tone.detach()), "beta": beta}


def letter_objective(points: torch.Tensor, task: LetterTask, step: int, backends: WordBackends,
                     cfg: WordAsImageConfig, rng: np.random.Generator, t: int | None = None, eps=None,
                     orig_img: torch.Tensor | None = None, augment: bool = True) -> tuple[torch.Tensor, dict]:
    """Scalar whose gradient w.r.t. ``points`` is the SDS gradient chained
    through augmentation and rasterizer plus the regularizer gradients."""
    img = render_glyph(points, task.glyph, cfg.render_size, cfg.raster)
    if augment:
        params = sample_augmentation(tuple(img.shape[:2]), cfg.augment_config(), rng)
        img_in = apply_augmentation(img, params)
    else:
        img_in = img
    if t is None:
        t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    cond = backends.condition or TextCondition(task.prompt)
    g = latent_sds_step(backends.codec, backends.predictor, img_in.detach(), cond, t, rng, backends.schedule,
                        eps=eps, weighting=cfg.sds_weighting)
    reg, parts = regularizer_loss(points, task, step, cfg, orig_img, img)
    parts["t"] = t
    return sds_surrogate(img_in, g) + reg, parts


@dataclass
class LetterTrace:
    tone: list[float] = field(default_factory=list)
    acap: list[float] = field(default_factory=list)
    timesteps: list[int] = field(default_factory=list)


def optimize_letter(task: LetterTask, cfg: WordAsImageConfig, backends: WordBackends,
                    rng: np.random.Generator, augment: bool = True) -> tuple[GlyphOutline, LetterTrace]:
    p0 = torch.as_tensor(task.glyph.control_points(), dtype=DTYPE)
    points = p0.clone().requires_grad_(True)
    opt = torch.optim.Adam([points], lr=learning_rate(0, cfg), betas=cfg.adam_betas, eps=cfg.adam_eps)
    with torch.no_grad():
        orig = render_glyph(p0, task.glyph, cfg.render_size, cfg.raster)
    trace = LetterTrace()
    for step in range(cfg.iterations):
        for group in opt.param_groups:
            group["lr"] = learning_rate(step, cfg)
        loss, parts = letter_objective(points, task, step, backends, cfg, rng, orig_img=orig, augment=augment)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.tone.append(parts["tone"])
        trace.acap.append(parts["acap"])
        trace.timesteps.append(parts["t"])
    return task.glyph.with_control_points(points.detach().numpy()), trace


# ----------------------------------------------------------------------------
# words


@dataclass
class WordLayout:
    word: str
    letters: list[GlyphOutline]  # already in canvas coordinates
    canvas: tuple[int, int]

    def __post_init__(self):
        if len(self.letters) != len(self.word):
            raise DomainError("one glyph per character is required")


def layout_word(word: str, glyphs: Sequence[GlyphOutline], height: int = 200, margin: float = 0.1) -> WordLayout:
    """Set glyphs (em units, y down, baseline at y=0) side by side by advance
    and scale the line to ``height`` pixels."""
    if len(glyphs) != len(word):
        raise DomainError("one glyph per character is required")
    placed, pen = [], 0.0
    for g in glyphs:
        placed.append(g.transformed(1.0, (pen, 0.0)))
        adv = g.advance if g.advance > 0 else float(g.bbox().size[0])
        pen += adv
    pts = np.concatenate([c.reshape(-1, 2) for g in placed for c in g.contours])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    inner = height * (1 - 2 * margin)
    scale = inner / max(hi[1] - lo[1], 1e-12)
    off = np.array([margin * height, margin * height]) - lo * scale
    letters = [g.transformed(scale, off) for g in placed]
    width = int(math.ceil((hi[0] - lo[0]) * scale + 2 * margin * height))
    return WordLayout(word, letters, (max(width, 1), height))


def glyph_strokes(glyph: GlyphOutline) -> list[Stroke]:
    out = []
    for c in glyph.contours:
        pts = np.concatenate([c[:, :3].reshape(-1, 2), c[-1:, 3]], axis=0)
        out.append(Stroke(pts, width=0.0, filled=True))
    return out


def assemble_word(layout: WordLayout, replacements: Mapping[int, GlyphOutline] | None = None) -> VectorSketch:
    """Each replacement is scaled into the original letter's bounding box with
    centers aligned; other letters are kept as they are."""
    replacements = dict(replacements or {})
    for idx in replacements:
        if not 0 <= idx < len(layout.letters):
            raise DomainError(f"letter index {idx} outside word {layout.word!r}")
    strokes = []
    for i, g in enumerate(layout.letters):
        if i in replacements:
            g = fit_into_box(replacements[i], g.bbox())
        strokes.extend(glyph_strokes(g))
    return VectorSketch(strokes, layout.canvas)


def word_letters(layout: WordLayout, replacements: Mapping[int, GlyphOutline] | None = None) -> list[GlyphOutline]:
    replacements = dict(replacements or {})
    return [fit_into_box(replacements[i], g.bbox()) if i in replacements else g
            for i, g in enumerate(layout.letters)]


def combinations(layout: WordLayout, replacements: Mapping[int, GlyphOutline]) -> list[tuple[tuple[int, ...], VectorSketch]]:
    """Every subset of the replaced letters applied to the word (2^n entries)."""
    keys = sorted(replacements)
    out = []
    for r in range(len(keys) + 1):
        for subset in itertools.combinations(keys, r):
            out.append((subset, assemble_word(layout, {k: replacements[k] for k in subset})))
    return out
