"""Soft differentiable rasterizer, Gaussian low-pass and paired augmentations.

Coverage model: a stroke covers a pixel by ``g(u) * (1 - exp(-2w / sigma)) *
opacity`` where ``u = max(d - w/2, 0) / sigma``, ``d`` is the distance from the
pixel center to the flattened stroke polyline and ``g`` is a Gaussian
``exp(-u^2/2)`` whose tail is tapered to exactly zero between 2 and 3 sigma
with a C2 smoothstep.  Strokes darken the background multiplicatively, so a
zero-width stroke multiplies every pixel by exactly 1.

Filled strokes (glyph contours) are painted together as one even-odd region
whose edge is smoothed with a logistic of the signed boundary distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DomainError
from .geometry import VectorSketch

DTYPE = torch.float64
CHUNK_ELEMENTS = 1 << 21
_CHUNK_ELEMS = 2_000_000
# soft-minimum temperature over polyline segments, in pixels
SOFTMIN_TAU = 0.05


@dataclass
class SoftRasterConfig:
    falloff_sigma: float = 1.0
    samples_per_curve: int = 16
    supersample: int = 1

    def __post_init__(self):
        if self.falloff_sigma <= 0 or self.samples_per_curve < 8 or self.supersample < 1:
            raise DomainError("raster config values must be positive (samples_per_curve >= 8)")


@dataclass
class AugmentConfig:
    perspective_distortion: float = 0.5
    perspective_prob: float = 0.7
    crop_size: tuple[int, int] | None = None  # (height, width); None keeps the full image
    output_size: tuple[int, int] | None = None  # optional resize after cropping
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.perspective_distortion <= 1 and 0 <= self.perspective_prob <= 1):
            raise DomainError("augmentation probabilities must lie in [0, 1]")


# ----------------------------------------------------------------------------
# core


def _bernstein(samples: int) -> torch.Tensor:
    t = torch.linspace(0.0, 1.0, samples + 1, dtype=DTYPE)[:, None]
    u = 1.0 - t
    return torch.cat([u ** 3, 3 * u * u * t, 3 * u * t * t, t ** 3], dim=1)


def flatten_stroke(points: torch.Tensor, samples: int) -> torch.Tensor:
    """(3m+1, 2) control points -> (m*samples + 1, 2) polyline."""
    m = (points.shape[0] - 1) // 3
    idx = torch.arange(m)[:, None] * 3 + torch.arange(4)[None, :]
    curves = points[idx]  # (m, 4, 2)
    pts = torch.einsum("sk,mkd->msd", _bernstein(samples), curves)
    return torch.cat([pts[:, :-1].reshape(-1, 2), pts[-1, -1:]], dim=0)


def _pad_polylines(polys: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack polylines to a common length; returns (n, K, 2) and a (n, K-1)
    mask of real (non-padding) segments."""
    k = max(p.shape[0] for p in polys)
    stacked = torch.stack([torch.cat([p, p[-1:].expand(k - p.shape[0], 2)]) if p.shape[0] < k else p
                           for p in polys])
    mask = torch.zeros((len(polys), k - 1), dtype=torch.bool)
    for i, p in enumerate(polys):
        mask[i, :p.shape[0] - 1] = True
    return stacked, mask


def pixel_centers(canvas: tuple[int, int], supersample: int = 1) -> torch.Tensor:
    """(H*W*s*s, 2) sample positions, pixel-major."""
    w, h = canvas
    s = supersample
    offs = (torch.arange(s, dtype=DTYPE) + 0.5) / s - 0.5
    ys = torch.arange(h, dtype=DTYPE)[:, None, None, None] + offs[None, None, :, None]
    xs = torch.arange(w, dtype=DTYPE)[None, :, None, None] + offs[None, None, None, :]
    ys, xs = torch.broadcast_tensors(ys, xs)
    return torch.stack([xs, ys], dim=-1).reshape(-1, 2)


def _segment_sqdist(pix: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """pix (P,2), a/b (..., 2) -> (P, ...) squared distance to segments."""
    shape = (pix.shape[0],) + (1,) * (a.dim() - 1)
    px, py = pix[:, 0].reshape(shape), pix[:, 1].reshape(shape)
    ax, ay = a[..., 0], a[..., 1]
    abx, aby = b[..., 0] - ax, b[..., 1] - ay
    apx, apy = px - ax, py - ay
    denom = (abx * abx + aby * aby).clamp_min(1e-18)
    t = ((apx * abx + apy * aby) / denom).clamp(0.0, 1.0)
    dx, dy = apx - t * abx, apy - t * aby
    return dx * dx + dy * dy


def polyline_distance(pix: torch.Tensor, polys: torch.Tensor, mask: torch.Tensor | None = None,
                      softness: float = SOFTMIN_TAU) -> torch.Tensor:
    """Distance from each sample to each polyline: pix (P,2), polys (n,K,2) -> (P,n).

    Segment distances are combined with a soft minimum
    ``-tau * log(sum(exp(-d_i / tau)))`` so the result stays smooth where the
    nearest segment switches; ``softness=0`` gives the hard minimum.
    """
    n, k = polys.shape[:2]
    if mask is None:
        mask = torch.ones((n, k - 1), dtype=torch.bool)
    per = max(1, _CHUNK_ELEMS // max(1, pix.shape[0] * (k - 1)))
    out = []
    for s in range(0, n, per):
        p = polys[s:s + per]
        d = torch.sqrt(_segment_sqdist(pix, p[:, :-1], p[:, 1:]).clamp_min(1e-24))
        m = mask[s:s + per][None]
        if softness > 0:
            d = torch.where(m, d, torch.full_like(d, float("inf")))
            d = -softness * torch.logsumexp(-d / softness, dim=-1)
        else:
            d = torch.where(m, d, torch.full_like(d, float("inf"))).amin(dim=-1)
        out.append(d)
    return torch.cat(out, dim=1)


def gaussian_taper(u: torch.Tensor) -> torch.Tensor:
    """exp(-u^2/2), smoothly forced to 0 on [2, 3] and exactly 0 beyond."""
    x = ((3.0 - u) / 1.0).clamp(0.0, 1.0)
    smooth = x ** 3 * (x * (6.0 * x - 15.0) + 10.0)
    window = torch.where(u <= 2.0, torch.ones_like(u), smooth)
    return torch.exp(-0.5 * u * u) * window


def stroke_coverage(dist: torch.Tensor, widths: torch.Tensor, opacities: torch.Tensor, sigma: float) -> torch.Tensor:
    u = torch.relu(dist - widths / 2.0) / sigma
    # strokes thinner than a pixel fade out smoothly; a 2 px stroke is ~98% opaque
    thin = 1.0 - torch.exp(-2.0 * widths / sigma)
    return gaussian_taper(u) * thin * opacities


def _even_odd_inside(pix: torch.Tensor, loops: Sequence[torch.Tensor]) -> torch.Tensor:
    inside = torch.zeros(pix.shape[0], dtype=torch.bool)
    x, y = pix[:, 0:1], pix[:, 1:2]
    for loop in loops:
        a = loop.detach()
        b = torch.roll(a, -1, dims=0)
        ya, yb = a[None, :, 1], b[None, :, 1]
        straddle = (ya > y) != (yb > y)
        dy = torch.where(yb == ya, torch.ones_like(yb), yb - ya)
        xint = a[None, :, 0] + (y - ya) * (b[None, :, 0] - a[None, :, 0]) / dy
        inside ^= ((straddle & (x < xint)).sum(dim=1) % 2).bool()
    return inside


def fill_coverage(pix: torch.Tensor, loops: Sequence[torch.Tensor], sigma: float) -> torch.Tensor:
    """Soft even-odd coverage (P,) of closed polylines."""
    closed = [torch.cat([lp, lp[:1]]) for lp in loops]
    polys, mask = _pad_polylines(closed)
    d = polyline_distance(pix, polys, mask)
    d = -SOFTMIN_TAU * torch.logsumexp(-d / SOFTMIN_TAU, dim=1)
    inside = _even_odd_inside(pix, loops)
    signed = torch.where(inside, -d, d)
    return torch.sigmoid(-1.702 * signed / sigma)


def rasterize(
    polylines: Sequence[torch.Tensor],
    widths: torch.Tensor,
    opacities: torch.Tensor,
    colors: torch.Tensor,
    canvas: tuple[int, int],
    background: torch.Tensor,
    cfg: SoftRasterConfig,
    fill_loops: Sequence[torch.Tensor] = (),
    fill_color: torch.Tensor | None = None,
    fill_opacity: float = 1.0,
) -> torch.Tensor:
    """Differentiable core. Returns (H, W, C) with C = len(background)."""
    w, h = canvas
    pix = pixel_centers(canvas, cfg.supersample)
    padded = _pad_polylines(polylines) if polylines else None
    fc = fill_color if fill_color is not None else torch.zeros_like(background)
    # pixels are processed in chunks so the pixel x segment tables stay small
    segs = sum(len(p) for p in polylines) + sum(len(lp) + 1 for lp in fill_loops)
    chunk = max(256, CHUNK_ELEMENTS // max(segs, 1))
    parts = []
    for start in range(0, pix.shape[0], chunk):
        px = pix[start:start + chunk]
        keep = background.reshape(1, -1).expand(px.shape[0], -1)
        if padded is not None:
            dist = polyline_distance(px, *padded)
            cov = stroke_coverage(dist, widths[None, :], opacities[None, :], cfg.falloff_sigma)
            factors = 1.0 - cov[:, :, None] * (1.0 - colors[None, :, :])
            keep = keep * torch.prod(factors, dim=1)
        if fill_loops:
            cov = fill_coverage(px, fill_loops, cfg.falloff_sigma) * fill_opacity
            keep = keep * (1.0 - cov[:, None] * (1.0 - fc[None, :]))
        parts.append(keep)
    keep = parts[0] if len(parts) == 1 else torch.cat(parts)
    s = cfg.supersample
    img = keep.reshape(h, w, s * s, -1).mean(dim=2)
    return img


# ----------------------------------------------------------------------------
# sketch-level API


def _channels_for(sketch: VectorSketch) -> int:
    cols = [s.color for s in sketch.strokes] + [sketch.background]
    gray = all(abs(c[0] - c[1]) < 1e-12 and abs(c[1] - c[2]) < 1e-12 for c in cols)
    return 1 if gray else 3


def _color_tensor(c, channels: int) -> torch.Tensor:
    t = torch.tensor(c, dtype=DTYPE)
    return t[:1] if channels == 1 else t


def render_tensor(
    sketch: VectorSketch,
    cfg: SoftRasterConfig | None = None,
    points: Sequence[torch.Tensor] | None = None,
    widths: torch.Tensor | None = None,
    opacities: torch.Tensor | None = None,
    channels: int | None = None,
) -> torch.Tensor:
    """Render with optional tensor overrides for control points (one tensor
    per stroke), widths and opacities so gradients reach them."""
    cfg = cfg or SoftRasterConfig()
    channels = channels or _channels_for(sketch)
    if points is None:
        points = [torch.as_tensor(s.points, dtype=DTYPE) for s in sketch.strokes]
    if widths is None:
        widths = torch.tensor([s.width for s in sketch.strokes], dtype=DTYPE)
    if opacities is None:
        opacities = torch.tensor([s.opacity for s in sketch.strokes], dtype=DTYPE)
    bg = _color_tensor(sketch.background, channels)
    line_idx = [i for i, s in enumerate(sketch.strokes) if not s.filled]
    fill_idx = [i for i, s in enumerate(sketch.strokes) if s.filled]
    polys = [flatten_stroke(points[i], cfg.samples_per_curve) for i in line_idx]
    sel = torch.tensor(line_idx, dtype=torch.long)
    colors = (torch.stack([_color_tensor(sketch.strokes[i].color, channels) for i in line_idx])
              if line_idx else torch.zeros((0, channels), dtype=DTYPE))
    loops = [flatten_stroke(points[i], cfg.samples_per_curve)[:-1] for i in fill_idx]
    fill_color = _color_tensor(sketch.strokes[fill_idx[0]].color, channels) if fill_idx else None
    fill_opacity = sketch.strokes[fill_idx[0]].opacity if fill_idx else 1.0
    return rasterize(polys, widths[sel], opacities[sel], colors, sketch.canvas, bg, cfg,
                     fill_loops=loops, fill_color=fill_color, fill_opacity=fill_opacity)


def render(sketch: VectorSketch, cfg: SoftRasterConfig | None = None, channels: int | None = None) -> np.ndarray:
    with torch.no_grad():
        return render_tensor(sketch, cfg, channels=channels).numpy()


def render_with_gradients(sketch: VectorSketch, cfg: SoftRasterConfig | None, upstream_grad) -> dict:
    """Gradient of sum(image * upstream_grad) w.r.t. every control point
    coordinate, width and opacity."""
    up = torch.as_tensor(np.asarray(upstream_grad), dtype=DTYPE)
    points = [torch.tensor(s.points, dtype=DTYPE, requires_grad=True) for s in sketch.strokes]
    widths = torch.tensor([s.width for s in sketch.strokes], dtype=DTYPE, requires_grad=True)
    opac = torch.tensor([s.opacity for s in sketch.strokes], dtype=DTYPE, requires_grad=True)
    img = render_tensor(sketch, cfg, points, widths, opac, channels=up.shape[-1] if up.dim() == 3 else None)
    if not sketch.strokes:
        return {"points": [], "widths": np.zeros(0), "opacities": np.zeros(0)}
    total = (img * up.reshape(img.shape)).sum()
    grads = torch.autograd.grad(total, points + [widths, opac], allow_unused=True)

    def arr(g, like):
        return np.zeros(tuple(like.shape)) if g is None else g.numpy()

    return {
        "points": [arr(g, p) for g, p in zip(grads[:-2], points)],
        "widths": arr(grads[-2], widths),
        "opacities": arr(grads[-1], opac),
    }


def render_filled_loops(loops: Sequence[torch.Tensor], canvas: tuple[int, int],
                        cfg: SoftRasterConfig | None = None, samples_per_curve: int | None = None) -> torch.Tensor:
    """Render closed cubic chains (each (3m, 2) cyclic control points) as one
    black even-odd region on white; returns (H, W, 1)."""
    cfg = cfg or SoftRasterConfig()
    spc = samples_per_curve or cfg.samples_per_curve
    polys = []
    for lp in loops:
        closed = torch.cat([lp, lp[:1]])
        polys.append(flatten_stroke(closed, spc)[:-1])
    bg = torch.ones(1, dtype=DTYPE)
    empty = torch.zeros(0, dtype=DTYPE)
    return rasterize([], empty, empty, torch.zeros((0, 1), dtype=DTYPE), canvas, bg, cfg, fill_loops=polys)


# ----------------------------------------------------------------------------
# filtering


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-x * x / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_tensor(img: torch.Tensor, sigma: float) -> torch.Tensor:
    squeeze = img.dim() == 2
    x = img[..., None] if squeeze else img
    k = torch.as_tensor(gaussian_kernel1d(sigma), dtype=x.dtype)
    r = (k.numel() - 1) // 2
    c = x.shape[-1]
    t = x.permute(2, 0, 1)[None]  # (1, C, H, W)
    t = F.pad(t, (r, r, r, r), mode="replicate")
    t = F.conv2d(t, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    t = F.conv2d(t, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    out = t[0].permute(1, 2, 0)
    return out[..., 0] if squeeze else out


def low_pass(img, sigma: float):
    """Gaussian blur (radius ceil(3 sigma), edge-replicate padding). Accepts
    and returns numpy arrays or torch tensors, H x W or H x W x C."""
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    if isinstance(img, torch.Tensor):
        return _blur_tensor(img, sigma)
    return _blur_tensor(torch.as_tensor(np.asarray(img, dtype=float)), sigma).numpy()


# ----------------------------------------------------------------------------
# augmentation


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 H with H @ [src, 1] ~ [dst, 1]."""
    a = []
    b = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return np.append(h, 1.0).reshape(3, 3)


def sample_augmentation(shape: tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator) -> dict:
    """Draw one set of augmentation parameters for an (H, W) image."""
    h, w = shape
    ch, cw = cfg.crop_size or (h, w)
    if ch > h or cw > w:
        raise DomainError(f"crop {cfg.crop_size} larger than image {(h, w)}")
    params: dict = {"homography": None}
    if cfg.perspective_prob > 0 and rng.random() < cfg.perspective_prob:
        d = cfg.perspective_distortion
        dx, dy = d * (w - 1) / 2.0, d * (h - 1) / 2.0
        start = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=float)
        end = np.array([
            [rng.uniform(0, dx), rng.uniform(0, dy)],
            [w - 1 - rng.uniform(0, dx), rng.uniform(0, dy)],
            [w - 1 - rng.uniform(0, dx), h - 1 - rng.uniform(0, dy)],
            [rng.uniform(0, dx), h - 1 - rng.uniform(0, dy)],
        ])
        # output pixel at an end corner shows the input at the start corner
        params["homography"] = _homography(end, start)
    params["top"] = int(rng.integers(0, h - ch + 1))
    params["left"] = int(rng.integers(0, w - cw + 1))
    params["crop"] = (ch, cw)
    return params


def apply_augmentation(img: torch.Tensor, params: dict, output_size=None, fill: float = 1.0) -> torch.Tensor:
    """Apply sampled parameters to an (H, W, C) tensor (differentiably)."""
    h, w = img.shape[:2]
    out = img
    hom = params.get("homography")
    if hom is not None:
        ys, xs = torch.meshgrid(torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij")
        ones = torch.ones_like(xs)
        pts = torch.stack([xs, ys, ones], dim=-1) @ torch.as_tensor(hom, dtype=DTYPE).T
        src = pts[..., :2] / pts[..., 2:3]
        grid = torch.stack([2 * src[..., 0] / max(w - 1, 1) - 1, 2 * src[..., 1] / max(h - 1, 1) - 1], dim=-1)
        t = (out - fill).permute(2, 0, 1)[None]
        warped = F.grid_sample(t.to(DTYPE), grid[None], mode="bilinear", padding_mode="zeros", align_corners=True)
        out = warped[0].permute(1, 2, 0) + fill
    ch, cw = params["crop"]
    top, left = params["top"], params["left"]
    out = out[top:top + ch, left:left + cw]
    if output_size is not None and tuple(output_size) != (ch, cw):
        t = out.permute(2, 0, 1)[None]
        out = F.interpolate(t, size=tuple(output_size), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
    return out


def augment(imgs: Sequence, cfg: AugmentConfig, rng: np.random.Generator | None = None) -> list:
    """Apply one sampled perspective + crop to every image of the list."""
    if not imgs:
        return []
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    first = imgs[0]
    params = sample_augmentation(tuple(first.shape[:2]), cfg, rng)
    out = []
    for im in imgs:
        is_np = not isinstance(im, torch.Tensor)
        t = torch.as_tensor(np.asarray(im, dtype=float)) if is_np else im
        squeeze = t.dim() == 2
        t = t[..., None] if squeeze else t
        r = apply_augmentation(t, params, cfg.output_size)
        r = r[..., 0] if squeeze else r
        out.append(r.detach().numpy() if is_np else r)
    return out


# ----------------------------------------------------------------------------
# export


def to_uint8(img) -> np.ndarray:
    a = img.detach().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    a = np.clip(a, 0.0, 1.0)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    return np.round(a * 255.0).astype(np.uint8)


def save_png(img, path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_image(path, channels: int = 3, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an image as float H x W x C in [0, 1]; ``size`` is (width, height)."""
    im = Image.open(path).convert("L" if channels == 1 else "RGB")
    if size is not None and im.size != tuple(size):
        im = im.resize(tuple(size), Image.BILINEAR)
    a = np.asarray(im, dtype=float) / 255.0
    return a[..., None] if a.ndim == 2 else a


def save_frames(video, directory) -> list[Path]:
    """Write an (H, W, k) or (k, H, W, C) sequence as 0000.png, 0001.png, ..."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    v = video.detach().numpy() if isinstance(video, torch.Tensor) else np.asarray(video)
    frames = [v[..., j] for j in range(v.shape[-1])] if v.ndim == 3 else list(v)
    width = max(4, len(str(len(frames) - 1)))
    paths = []
    for j, fr in enumerate(frames):
        p = d / f"{j:0{width}d}.png"
        save_png(fr, p)
        paths.append(p)
    return paths
