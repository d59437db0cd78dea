"""Sketch animation: a neural displacement field with a local (free offset)
path and a global (per-frame affine) path, trained with video SDS."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DomainError
from .geometry import VectorSketch
from .guidance import NoiseSchedule, TextCondition, VideoDenoisePredictor, noise_sample, sds_gradient
from .raster import DTYPE, AugmentConfig, SoftRasterConfig, apply_augmentation, render_tensor, sample_augmentation

DISPLACEMENT_MAGIC = b"VSDZ"
IDENTITY_PARAMS = (1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)  # s_x, s_y, sh_x, sh_y, theta, d_x, d_y


@dataclass
class LambdaScales:
    t: float = 1.0
    r: float = 1e-2
    s: float = 5e-2
    sh: float = 1e-1

    def __post_init__(self):
        if min(self.t, self.r, self.s, self.sh) < 0:
            raise DomainError("lambda scales must be non-negative")


@dataclass
class AnimateConfig:
    frames: int = 24
    steps: int = 1000
    local_lr: float = 5e-3
    global_lr: float = 1e-4
    local_guidance: float = 30.0
    global_guidance: float = 40.0
    lambdas: LambdaScales = field(default_factory=LambdaScales)
    hidden: int = 128
    augment: bool = True
    perspective_distortion: float = 0.5
    perspective_prob: float = 0.7
    crop_frac: float = 0.9
    t_min: int = 50
    t_max: int = 950
    sds_weighting: str = "constant"
    raster: SoftRasterConfig = field(default_factory=SoftRasterConfig)

    def __post_init__(self):
        if self.frames < 1 or self.hidden < 2:
            raise DomainError("frames and hidden width must be positive")
        if self.hidden % 2:
            raise DomainError("hidden width must be even (it carries the positional encoding)")
        if self.steps < 0 or self.local_lr <= 0 or self.global_lr <= 0:
            raise DomainError("steps must be non-negative and learning rates positive")


@dataclass
class FrameSet:
    base_points: np.ndarray  # (N, 2) canvas coordinates
    displacements: np.ndarray  # (k, N, 2)

    def __post_init__(self):
        self.base_points = np.asarray(self.base_points, dtype=float)
        self.displacements = np.asarray(self.displacements, dtype=float)
        n = self.base_points.shape[0]
        if self.displacements.ndim != 3 or self.displacements.shape[1:] != (n, 2):
            raise DomainError(f"displacements must be (k, {n}, 2), got {self.displacements.shape}")
        if not np.all(np.isfinite(self.displacements)):
            raise DomainError("displacements must be finite")

    @property
    def k(self) -> int:
        return self.displacements.shape[0]

    def frame_points(self, j: int) -> np.ndarray:
        return self.base_points + self.displacements[j]

    @classmethod
    def static(cls, base_points, k: int) -> "FrameSet":
        base = np.asarray(base_points, dtype=float)
        return cls(base, np.zeros((k,) + base.shape))


# ----------------------------------------------------------------------------
# encoding and transforms


def positional_encoding(frame_idx, point_idx, dim: int):
    """Sinusoidal code of (frame, point). The dim/2 (sin, cos) pairs are
    interleaved; the first ceil(dim/4) pairs encode the frame index, the rest
    the point index, each with frequencies 10000^(-p / pairs)."""
    if dim % 2 or dim < 2:
        raise DomainError("positional encoding dimension must be even and positive")
    pairs = dim // 2
    nf = (pairs + 1) // 2
    npt = pairs - nf
    f = torch.as_tensor(frame_idx, dtype=DTYPE)
    p = torch.as_tensor(point_idx, dtype=DTYPE)
    f, p = torch.broadcast_tensors(f, p)
    wf = 10000.0 ** (-torch.arange(nf, dtype=DTYPE) / max(nf, 1))
    wp = 10000.0 ** (-torch.arange(npt, dtype=DTYPE) / max(npt, 1))
    phase = torch.cat([f[..., None] * wf, p[..., None] * wp], dim=-1)
    out = torch.stack([torch.sin(phase), torch.cos(phase)], dim=-1)
    return out.reshape(phase.shape[:-1] + (dim,))


def _affine_parts(params, lam: LambdaScales):
    """2x2 linear part and explicit translation of one frame's parameters."""
    prm = params if isinstance(params, torch.Tensor) else torch.as_tensor(np.asarray(params, dtype=float))
    sx, sy, shx, shy, theta, dx, dy = (prm[..., i] for i in range(7))
    sx = 1.0 + lam.s * (sx - 1.0)
    sy = 1.0 + lam.s * (sy - 1.0)
    shx, shy, theta = lam.sh * shx, lam.sh * shy, lam.r * theta
    c, s = torch.cos(theta), torch.sin(theta)
    one, zero = torch.ones_like(c), torch.zeros_like(c)

    def mat(a, b, cc, d):
        return torch.stack([torch.stack([a, b], -1), torch.stack([cc, d], -1)], -2)

    scale = mat(sx, zero, zero, sy)
    shear = mat(one, shx, shy, one)
    rot = mat(c, -s, s, c)
    lin = rot @ shear @ scale
    trans = torch.stack([lam.t * dx, lam.t * dy], -1)
    return lin, trans


def compose_global_transform(params, lam: LambdaScales | None, center):
    """3x3 T = Translate(l_t d) . C . Rotate(l_r theta) . Shear(l_sh sh) .
    Scale(1 + l_s (s - 1)) . C^-1 with C the translation to ``center``.
    ``params`` may carry leading batch dimensions."""
    lam = lam or LambdaScales()
    lin, trans = _affine_parts(params, lam)
    c = torch.as_tensor(np.asarray(center, dtype=float)) if not isinstance(center, torch.Tensor) else center.to(DTYPE)
    pivot = c - (lin @ c[..., None])[..., 0]
    t = trans + pivot
    top = torch.cat([lin, t[..., None]], dim=-1)
    bottom = torch.zeros(top.shape[:-2] + (1, 3), dtype=top.dtype)
    bottom[..., 0, 2] = 1.0
    return torch.cat([top, bottom], dim=-2)


def explicit_translation(T, center) -> torch.Tensor:
    """Translation column of T minus the pivot term c - A c."""
    T = torch.as_tensor(T, dtype=DTYPE)
    c = torch.as_tensor(np.asarray(center, dtype=float))
    lin = T[..., :2, :2]
    return T[..., :2, 2] - (c - (lin @ c[..., None])[..., 0])


def global_displacements(T, P_init):
    """Per-frame displacement T_j(p) - p, shape (k, N, 2)."""
    T = T if isinstance(T, torch.Tensor) else torch.as_tensor(np.asarray(T, dtype=float))
    P = P_init if isinstance(P_init, torch.Tensor) else torch.as_tensor(np.asarray(P_init, dtype=float))
    if T.dim() == 2:
        T = T[None]
    moved = torch.einsum("kij,nj->kni", T[:, :2, :2], P) + T[:, None, :2, 2]
    return moved - P[None]


# ----------------------------------------------------------------------------
# network


def _mlp(hidden: int, out: int) -> nn.Sequential:
    last = nn.Linear(hidden, out)
    nn.init.zeros_(last.weight)
    nn.init.zeros_(last.bias)
    return nn.Sequential(nn.Linear(hidden, hidden), nn.SELU(), nn.Linear(hidden, hidden), nn.SELU(), last)


class MotionField(nn.Module):
    """Shared point projection plus positional encoding, then a local head
    (offset per point and frame) and a global head (7 affine parameters per
    frame from the mean point feature). Both heads start at zero output, so
    the initial field is the static sketch."""

    def __init__(self, num_points: int, frames: int, hidden: int = 128):
        super().__init__()
        self.num_points, self.frames = num_points, frames
        self.shared = nn.Linear(2, hidden)
        self.local_head = _mlp(hidden, 2)
        self.global_head = _mlp(hidden, 7)
        fr = torch.arange(frames, dtype=DTYPE)[:, None]
        pt = torch.arange(num_points, dtype=DTYPE)[None, :]
        self.register_buffer("pe", positional_encoding(fr, pt, hidden))
        self.register_buffer("identity", torch.tensor(IDENTITY_PARAMS, dtype=DTYPE))
        self.double()

    def local_parameters(self):
        return list(self.shared.parameters()) + list(self.local_head.parameters())

    def global_parameters(self):
        return list(self.shared.parameters()) + list(self.global_head.parameters())

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.shared(z)[None] + self.pe  # (k, N, hidden)
        local = self.local_head(feats)
        params = self.identity + self.global_head(feats.mean(dim=1))
        return local, params


def make_motion_field(num_points: int, frames: int, hidden: int, seed: int) -> MotionField:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MotionField(num_points, frames, hidden)


@dataclass
class _Frame:
    """Normalised coordinate frame: p_norm = (p - origin) / half."""

    origin: torch.Tensor
    half: float

    @classmethod
    def for_canvas(cls, canvas: tuple[int, int]) -> "_Frame":
        w, h = canvas
        return cls(torch.tensor([w / 2.0, h / 2.0], dtype=DTYPE), max(w, h) / 2.0)

    def to_norm(self, p):
        return (torch.as_tensor(np.asarray(p, dtype=float)) - self.origin) / self.half

    def from_norm_disp(self, d):
        return d * self.half


def bbox_center(points) -> torch.Tensor:
    p = torch.as_tensor(np.asarray(points, dtype=float)) if not isinstance(points, torch.Tensor) else points
    return (p.min(dim=0).values + p.max(dim=0).values) / 2.0


def predict_displacements(fld: MotionField, z_init: torch.Tensor, lam: LambdaScales | None = None,
                          center: torch.Tensor | None = None):
    """(dZ_l, dZ_g, dZ) in the coordinates of ``z_init``; dZ = dZ_l + dZ_g."""
    lam = lam or LambdaScales()
    center = bbox_center(z_init) if center is None else center
    local, params = fld(z_init)
    T = compose_global_transform(params, lam, center)
    glob = global_displacements(T, z_init)
    return local, glob, local + glob


# ----------------------------------------------------------------------------
# rendering


def render_frames_tensor(template: VectorSketch, base: torch.Tensor, disp: torch.Tensor,
                         cfg: SoftRasterConfig | None = None) -> torch.Tensor:
    """(k, H, W) gray frames of ``template`` at points base + disp[j]."""
    counts = template.point_counts()
    frames = []
    for j in range(disp.shape[0]):
        pts = list(torch.split(base + disp[j], counts))
        frames.append(render_tensor(template, cfg, points=pts, channels=1)[..., 0])
    return torch.stack(frames)


def render_video(frameset: FrameSet, template: VectorSketch, cfg: SoftRasterConfig | None = None) -> np.ndarray:
    """H x W x k gray video."""
    if frameset.base_points.shape[0] != sum(template.point_counts()):
        raise DomainError("frame set and template have different point counts")
    with torch.no_grad():
        v = render_frames_tensor(template, torch.as_tensor(frameset.base_points),
                                 torch.as_tensor(frameset.displacements), cfg)
    return v.permute(1, 2, 0).numpy()


def center_of_mass_path(video) -> np.ndarray:
    """Ink-weighted centroid (x, y) of each frame of an H x W x k video."""
    v = 1.0 - np.asarray(video, dtype=float)
    h, w, k = v.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    out = np.zeros((k, 2))
    for j in range(k):
        m = v[..., j].sum()
        if m <= 0:
            raise DomainError(f"frame {j} is empty")
        out[j] = [(xs * v[..., j]).sum() / m, (ys * v[..., j]).sum() / m]
    return out


# ----------------------------------------------------------------------------
# optimization


@dataclass
class VideoBackends:
    predictor: VideoDenoisePredictor
    schedule: NoiseSchedule
    condition: TextCondition | None = None


@dataclass
class AnimationTrace:
    path: list[str] = field(default_factory=list)  # "local" or "global" per step
    timesteps: list[int] = field(default_factory=list)
    sds_norm: list[float] = field(default_factory=list)


def optimize_animation(sketch: VectorSketch, prompt: str, cfg: AnimateConfig, backend: VideoBackends,
                       rng: np.random.Generator) -> tuple[FrameSet, AnimationTrace]:
    """Alternate per step: even steps update shared + local head (local
    guidance scale and lr), odd steps shared + global head."""
    if not sketch.strokes:
        raise DomainError("cannot animate an empty sketch")
    frame = _Frame.for_canvas(sketch.canvas)
    base = torch.as_tensor(sketch.control_points(), dtype=DTYPE)
    z = frame.to_norm(base)
    center = bbox_center(z)
    fld = make_motion_field(len(z), cfg.frames, cfg.hidden, int(rng.integers(2 ** 31)))
    opt_local = torch.optim.Adam(fld.local_parameters(), lr=cfg.local_lr)
    opt_global = torch.optim.Adam(fld.global_parameters(), lr=cfg.global_lr)
    cond = backend.condition or TextCondition(prompt)
    w, h = sketch.canvas
    aug_cfg = AugmentConfig(cfg.perspective_distortion, cfg.perspective_prob,
                            crop_size=(max(1, round(cfg.crop_frac * h)), max(1, round(cfg.crop_frac * w))),
                            output_size=(h, w))
    trace = AnimationTrace()
    for step in range(cfg.steps):
        local_step = step % 2 == 0
        opt = opt_local if local_step else opt_global
        scale = cfg.local_guidance if local_step else cfg.global_guidance
        _, _, dz = predict_displacements(fld, z, cfg.lambdas, center)
        video = render_frames_tensor(sketch, base, frame.from_norm_disp(dz), cfg.raster)
        if cfg.augment:
            params = sample_augmentation((h, w), aug_cfg, rng)
            video = torch.stack([apply_augmentation(f[..., None], params, aug_cfg.output_size)[..., 0] for f in video])
        t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        eps = torch.as_tensor(rng.standard_normal(tuple(video.shape)), dtype=DTYPE)
        with torch.no_grad():
            v_t = noise_sample(video.detach(), t, eps, backend.schedule)
            pred = backend.predictor.predict_noise(v_t, t, cond, guidance_scale=scale)
            g = sds_gradient(pred, eps, backend.schedule.weight(t, cfg.sds_weighting))
        opt.zero_grad()
        (g * video).sum().backward()
        opt.step()
        trace.path.append("local" if local_step else "global")
        trace.timesteps.append(t)
        trace.sds_norm.append(float(torch.linalg.norm(g)))
    with torch.no_grad():
        _, _, dz = predict_displacements(fld, z, cfg.lambdas, center)
    return FrameSet(base.numpy(), frame.from_norm_disp(dz).numpy()), trace


# ----------------------------------------------------------------------------
# displacement file: magic "VSDZ", int32 k, int32 N, then k*N*2 float32,
# all little-endian, frame-major then point then (x, y)


def write_displacements(frameset: FrameSet, path) -> None:
    k, n = frameset.displacements.shape[:2]
    data = frameset.displacements.astype("<f4").tobytes()
    Path(path).write_bytes(DISPLACEMENT_MAGIC + struct.pack("<ii", k, n) + data)


def read_displacements(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DISPLACEMENT_MAGIC or len(raw) < 12:
        raise DomainError(f"{path} is not a displacement file")
    k, n = struct.unpack("<ii", raw[4:12])
    body = np.frombuffer(raw[12:], dtype="<f4")
    if body.size != k * n * 2:
        raise DomainError(f"{path}: expected {k * n * 2} floats, found {body.size}")
    return body.reshape(k, n, 2).astype(float)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    a, b = a - a.mean(), b - b.mean()
    den = math.sqrt(float((a * a).sum() * (b * b).sum()))
    if den == 0:
        raise DomainError("constant series has no correlation")
    return float((a * b).sum() / den)
