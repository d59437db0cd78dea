"""Cubic Bézier primitives, sketch containers, glyph outlines and triangulation.

Coordinates are canvas units with x to the right and y down; pixel (row r,
column c) has its center at (c, r).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import triangle as _triangle

from .errors import ConstraintError, DegenerateGeometryError, DomainError

CHAIN_TOL = 1e-9
# 4/3 * tan(pi/8): handle length for a quarter circle of unit radius
KAPPA = 4.0 * (math.sqrt(2.0) - 1.0) / 3.0


def _as_curve(curve) -> np.ndarray:
    c = np.asarray(curve, dtype=float)
    if c.shape != (4, 2):
        raise DomainError(f"a cubic Bézier needs 4 control points, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DomainError("control points must be finite")
    return c


@dataclass(frozen=True)
class Box2:
    min: tuple[float, float]
    max: tuple[float, float]

    def __post_init__(self):
        if self.min[0] > self.max[0] or self.min[1] > self.max[1]:
            raise DomainError(f"box min {self.min} exceeds max {self.max}")

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.min, dtype=float) + np.asarray(self.max, dtype=float)) / 2

    @property
    def size(self) -> np.ndarray:
        return np.asarray(self.max, dtype=float) - np.asarray(self.min, dtype=float)

    @classmethod
    def around(cls, points) -> "Box2":
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        lo, hi = p.min(axis=0), p.max(axis=0)
        return cls((float(lo[0]), float(lo[1])), (float(hi[0]), float(hi[1])))


@dataclass
class Stroke:
    """A chain of cubic segments stored as 3m+1 control points.

    ``filled`` marks a closed contour that is painted as a region (glyphs)
    rather than stroked.
    """

    points: np.ndarray
    width: float = 2.0
    opacity: float = 1.0
    color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    filled: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise DomainError(f"stroke points must be (3m+1, 2), got {self.points.shape}")
        n = self.points.shape[0]
        if n < 4 or (n - 1) % 3:
            raise DomainError(f"stroke needs 3m+1 control points, got {n}")
        if not np.all(np.isfinite(self.points)):
            raise DomainError("stroke control points must be finite")
        # zero width is allowed: it is how keep-probabilities hide a stroke
        if self.width < 0:
            raise DomainError("stroke width must be non-negative")
        if not 0.0 <= self.opacity <= 1.0:
            raise DomainError("opacity must lie in [0, 1]")
        self.color = tuple(float(c) for c in self.color)

    @property
    def num_curves(self) -> int:
        return (self.points.shape[0] - 1) // 3

    @property
    def curves(self) -> np.ndarray:
        idx = np.arange(self.num_curves)[:, None] * 3 + np.arange(4)[None, :]
        return self.points[idx]

    @classmethod
    def from_curves(cls, curves, **kwargs) -> "Stroke":
        curves = np.asarray(curves, dtype=float).reshape(-1, 4, 2)
        for a, b in zip(curves[:-1], curves[1:]):
            if np.max(np.abs(a[3] - b[0])) > CHAIN_TOL:
                raise DomainError("consecutive curves must share endpoints")
        pts = np.concatenate([curves[0]] + [c[1:] for c in curves[1:]], axis=0)
        return cls(pts, **kwargs)


@dataclass
class VectorSketch:
    strokes: list[Stroke] = field(default_factory=list)
    canvas: tuple[int, int] = (224, 224)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        w, h = self.canvas
        if int(w) < 1 or int(h) < 1:
            raise DomainError(f"canvas dims must be >= 1, got {self.canvas}")
        self.canvas = (int(w), int(h))
        self.background = tuple(float(c) for c in self.background)

    def __len__(self):
        return len(self.strokes)

    def control_points(self) -> np.ndarray:
        if not self.strokes:
            return np.zeros((0, 2))
        return np.concatenate([s.points for s in self.strokes], axis=0)

    def point_counts(self) -> list[int]:
        return [s.points.shape[0] for s in self.strokes]

    def with_control_points(self, points) -> "VectorSketch":
        points = np.asarray(points, dtype=float)
        out, start = [], 0
        for s in self.strokes:
            n = s.points.shape[0]
            out.append(replace(s, points=points[start:start + n].copy()))
            start += n
        if start != points.shape[0]:
            raise DomainError(f"expected {start} control points, got {points.shape[0]}")
        return VectorSketch(out, self.canvas, self.background)

    def copy(self) -> "VectorSketch":
        return VectorSketch([replace(s, points=s.points.copy()) for s in self.strokes],
                            self.canvas, self.background)


@dataclass
class GlyphOutline:
    """Closed contours, each an (m, 4, 2) array of cubic segments."""

    contours: list[np.ndarray]
    source_char: str = ""
    advance: float = 0.0

    def __post_init__(self):
        fixed = []
        for k, c in enumerate(self.contours):
            c = np.asarray(c, dtype=float).reshape(-1, 4, 2)
            if len(c) == 0:
                raise DomainError(f"contour {k} is empty")
            if np.max(np.abs(c[-1, 3] - c[0, 0])) > CHAIN_TOL:
                raise DomainError(f"contour {k} is not closed")
            if np.max(np.abs(c[:-1, 3] - c[1:, 0]), initial=0.0) > CHAIN_TOL:
                raise DomainError(f"contour {k} segments are not chained")
            fixed.append(c)
        self.contours = fixed

    @property
    def num_segments(self) -> int:
        return sum(len(c) for c in self.contours)

    def control_point_count(self) -> int:
        # closed loops: each segment contributes its start point and two handles
        return 3 * self.num_segments

    def control_points(self) -> np.ndarray:
        """Distinct control points, contour by contour (3 per segment)."""
        if not self.contours:
            return np.zeros((0, 2))
        return np.concatenate([c[:, :3].reshape(-1, 2) for c in self.contours], axis=0)

    def contour_point_counts(self) -> list[int]:
        return [3 * len(c) for c in self.contours]

    def with_control_points(self, points) -> "GlyphOutline":
        points = np.asarray(points, dtype=float)
        out, start = [], 0
        for c in self.contours:
            n = 3 * len(c)
            out.append(_closed_loop_curves(points[start:start + n]))
            start += n
        return GlyphOutline(out, self.source_char, self.advance)

    def boundary_edges(self) -> list[tuple[int, int]]:
        """Control-polygon edges of every loop, indexed into control_points()."""
        edges, start = [], 0
        for n in self.contour_point_counts():
            edges.extend((start + i, start + (i + 1) % n) for i in range(n))
            start += n
        return edges

    def bbox(self) -> Box2:
        return Box2.around(np.concatenate([c.reshape(-1, 2) for c in self.contours]))

    def transformed(self, scale: float, offset) -> "GlyphOutline":
        offset = np.asarray(offset, dtype=float)
        return GlyphOutline([c * scale + offset for c in self.contours],
                            self.source_char, self.advance * scale)


def _closed_loop_curves(loop_points: np.ndarray) -> np.ndarray:
    """(3m, 2) cyclic control points -> (m, 4, 2) closed curves."""
    n = loop_points.shape[0]
    idx = (np.arange(n // 3)[:, None] * 3 + np.arange(4)[None, :]) % n
    return loop_points[idx]


# ----------------------------------------------------------------------------
# curve operations


def evaluate_cubic(curve, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    p0, p1, p2, p3 = _as_curve(curve)
    if t == 0.0:
        return p0.copy()
    if t == 1.0:
        return p3.copy()
    u = 1.0 - t
    return u ** 3 * p0 + 3 * u * u * t * p1 + 3 * u * t * t * p2 + t ** 3 * p3


def split_cubic(curve, t: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """De Casteljau split into left [0, t] and right [t, 1] halves."""
    if not 0.0 < t < 1.0:
        raise DomainError(f"split parameter must lie in (0, 1), got {t}")
    p0, p1, p2, p3 = _as_curve(curve)
    p01 = p0 + t * (p1 - p0)
    p12 = p1 + t * (p2 - p1)
    p23 = p2 + t * (p3 - p2)
    p012 = p01 + t * (p12 - p01)
    p123 = p12 + t * (p23 - p12)
    mid = p012 + t * (p123 - p012)
    return np.stack([p0, p01, p012, mid]), np.stack([mid, p123, p23, p3])


def _net_and_chord(c: np.ndarray) -> tuple[float, float]:
    net = float(np.sum(np.hypot(*(c[1:] - c[:-1]).T)))
    chord = float(np.hypot(*(c[3] - c[0])))
    return net, chord


def arc_length(curve, tol: float = 1e-3) -> float:
    """Length of the adaptively flattened polyline.

    A piece is flat once its control-net length exceeds its chord by at most
    ``tol``. The arc lies between the two; each leaf contributes their mean,
    whose error shrinks much faster than the gap itself.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    total = 0.0
    stack = [(_as_curve(curve), 0)]
    while stack:
        c, depth = stack.pop()
        net, chord = _net_and_chord(c)
        if net - chord <= tol or depth >= 48:
            total += 0.5 * (net + chord)
        else:
            left, right = split_cubic(c, 0.5)
            stack.append((right, depth + 1))
            stack.append((left, depth + 1))
    return total


def sample_cubic(curve, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2, p3 = _as_curve(curve)
    u = 1.0 - t
    return u ** 3 * p0 + 3 * u * u * t * p1 + 3 * u * t * t * p2 + t ** 3 * p3


def line_as_cubic(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.stack([a, a + (b - a) / 3.0, a + 2.0 * (b - a) / 3.0, b])


def quad_as_cubic(a, c, b) -> np.ndarray:
    a, c, b = (np.asarray(v, dtype=float) for v in (a, c, b))
    return np.stack([a, a + 2.0 / 3.0 * (c - a), b + 2.0 / 3.0 * (c - b), b])


# ----------------------------------------------------------------------------
# outlines


def subdivide_outline(glyph: GlyphOutline, target_count: int, tol: float = 1e-3) -> GlyphOutline:
    """Split the longest segment at t=0.5 until the glyph holds at least
    ``target_count`` distinct control points (3 per segment of a closed loop).
    """
    if not glyph.contours or glyph.num_segments == 0:
        raise DomainError("cannot subdivide an empty glyph")
    if glyph.control_point_count() >= target_count:
        return glyph
    loops = [list(c) for c in glyph.contours]
    lengths = [[arc_length(seg, tol) for seg in loop] for loop in loops]
    count = glyph.control_point_count()
    while count < target_count:
        best = (-1.0, 0, 0)
        for li, ls in enumerate(lengths):
            for si, length in enumerate(ls):
                if length > best[0]:
                    best = (length, li, si)
        _, li, si = best
        left, right = split_cubic(loops[li][si], 0.5)
        loops[li][si:si + 1] = [left, right]
        lengths[li][si:si + 1] = [arc_length(left, tol), arc_length(right, tol)]
        count += 3
    return GlyphOutline([np.stack(loop) for loop in loops], glyph.source_char, glyph.advance)


def fit_into_box(glyph: GlyphOutline, target: Box2) -> GlyphOutline:
    """Uniform scale + translation so the control-point bbox is inscribed in
    ``target`` with centers aligned."""
    tsize = target.size
    if tsize[0] <= 0 or tsize[1] <= 0:
        raise DomainError("target box is degenerate")
    box = glyph.bbox()
    gsize = box.size
    ratios = [tsize[i] / gsize[i] for i in range(2) if gsize[i] > 0]
    if not ratios:
        raise DomainError("glyph bounding box is degenerate")
    scale = min(ratios)
    offset = target.center - box.center * scale
    return glyph.transformed(scale, offset)


# ----------------------------------------------------------------------------
# triangulation


@dataclass
class Triangulation:
    points: np.ndarray
    triangles: np.ndarray
    incident_angles: list[list[float]]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.points)):
            raise DomainError("triangle index out of range")

    def angles(self) -> np.ndarray:
        return triangle_angles(self.points, self.triangles)


def triangle_angles(points, triangles) -> np.ndarray:
    """Interior angle at each corner, (T, 3) radians."""
    p = np.asarray(points, dtype=float)[np.asarray(triangles)]
    out = np.empty(p.shape[:2])
    for k in range(3):
        a, b, c = p[:, k], p[:, (k + 1) % 3], p[:, (k + 2) % 3]
        u, v = b - a, c - a
        cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
        out[:, k] = np.arctan2(np.abs(cross), np.einsum("ij,ij->i", u, v))
    return out


def _incident(n_points: int, triangles: np.ndarray, angles: np.ndarray) -> list[list[float]]:
    inc: list[list[float]] = [[] for _ in range(n_points)]
    for tri, ang in zip(triangles, angles):
        for v, a in zip(tri, ang):
            inc[int(v)].append(float(a))
    return inc


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p) -> bool:
    return min(a[0], b[0]) <= p[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])


def _segments_conflict(a, b, c, d) -> bool:
    o1, o2, o3, o4 = _orient(a, b, c), _orient(a, b, d), _orient(c, d, a), _orient(c, d, b)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True
    return ((o1 == 0 and _on_segment(a, b, c)) or (o2 == 0 and _on_segment(a, b, d))
            or (o3 == 0 and _on_segment(c, d, a)) or (o4 == 0 and _on_segment(c, d, b)))


def find_crossing_edges(points, edges) -> list[tuple[int, int]]:
    """Pairs of constraint edges (by position) that cross or touch away from a
    shared endpoint."""
    p = np.asarray(points, dtype=float)
    e = [tuple(int(i) for i in ed) for ed in edges]
    bad = []
    for i in range(len(e)):
        for j in range(i + 1, len(e)):
            if set(e[i]) & set(e[j]):
                continue
            if _segments_conflict(p[e[i][0]], p[e[i][1]], p[e[j][0]], p[e[j][1]]):
                bad.append((i, j))
    return bad


def _all_collinear(p: np.ndarray) -> bool:
    centered = p - p.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s.size < 2 or s[1] <= 1e-12 * max(s[0], 1e-300)


def triangulate_constrained(points, boundary_edges: Iterable[Sequence[int]] = ()) -> Triangulation:
    """Constrained Delaunay triangulation of ``points`` respecting
    ``boundary_edges``; no Steiner points are inserted."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) < 3:
        raise DegenerateGeometryError("need at least 3 points")
    if _all_collinear(p):
        raise DegenerateGeometryError("all points are collinear")
    edges = np.asarray([tuple(e) for e in boundary_edges], dtype=np.int32).reshape(-1, 2)
    if edges.size:
        if edges.min() < 0 or edges.max() >= len(p):
            raise ConstraintError("boundary edge index out of range")
        edges = edges[edges[:, 0] != edges[:, 1]]
        crossings = find_crossing_edges(p, edges)
        if crossings:
            i, j = crossings[0]
            raise ConstraintError(f"constraint edges {tuple(edges[i])} and {tuple(edges[j])} cross")

    def run(q):
        data = {"vertices": q}
        opts = "Q"
        if edges.size:
            data["segments"] = edges
            opts = "pcQ"
        return _triangle.triangulate(data, opts)

    out = run(p)
    if len(out.get("vertices", ())) != len(p) or "triangles" not in out:
        # duplicate or exactly collinear runs: jitter once, then give up
        jitter = np.random.default_rng(0).uniform(-1e-9, 1e-9, p.shape)
        out = run(p + jitter)
        if len(out.get("vertices", ())) != len(p) or "triangles" not in out:
            raise DegenerateGeometryError("triangulation merged or dropped input points")
    tris = np.asarray(out["triangles"], dtype=np.int64)
    angles = triangle_angles(p, tris)
    return Triangulation(p, tris, _incident(len(p), tris, angles))


def point_in_polygons(points, loops: Sequence[np.ndarray]) -> np.ndarray:
    """Even-odd inside test of ``points`` against closed polylines."""
    q = np.asarray(points, dtype=float).reshape(-1, 2)
    inside = np.zeros(len(q), dtype=bool)
    for loop in loops:
        a = np.asarray(loop, dtype=float)
        b = np.roll(a, -1, axis=0)
        ya, yb = a[:, 1][None, :], b[:, 1][None, :]
        y = q[:, 1][:, None]
        straddle = (ya > y) != (yb > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a[:, 0][None, :] + (y - ya) * (b[:, 0] - a[:, 0])[None, :] / (yb - ya)
        crossings = straddle & (q[:, 0][:, None] < xint)
        inside ^= (crossings.sum(axis=1) % 2).astype(bool)
    return inside


def glyph_triangulation(glyph: GlyphOutline) -> Triangulation:
    """Triangulate a glyph's control points, constrained by the control
    polygons and keeping only triangles inside the filled letter."""
    pts = glyph.control_points()
    try:
        full = triangulate_constrained(pts, glyph.boundary_edges())
    except ConstraintError:
        # self-intersecting control polygons: fall back to plain Delaunay
        full = triangulate_constrained(pts)
    loops = []
    start = 0
    for n in glyph.contour_point_counts():
        loops.append(pts[start:start + n])
        start += n
    centroids = pts[full.triangles].mean(axis=1)
    keep = point_in_polygons(centroids, loops)
    tris = full.triangles[keep] if keep.any() else full.triangles
    angles = triangle_angles(pts, tris)
    return Triangulation(pts, tris, _incident(len(pts), tris, angles))


# ----------------------------------------------------------------------------
# glyph interchange format
#
#   # comment
#   char U+0041
#   advance 0.61
#   contour
#   x0 y0 x1 y1 x2 y2 x3 y3      (one cubic segment per line, 8 decimals)
#   ...
#   contour
#   ...


def format_glyph(glyph: GlyphOutline) -> str:
    lines = ["# vectorsketch glyph outline v1"]
    if glyph.source_char:
        lines.append(f"char U+{ord(glyph.source_char):04X}")
    lines.append(f"advance {glyph.advance:.8f}")
    for c in glyph.contours:
        lines.append("contour")
        for seg in c:
            lines.append(" ".join(f"{v:.8f}" for v in seg.reshape(-1)))
    return "\n".join(lines) + "\n"


def parse_glyph(text: str) -> GlyphOutline:
    contours: list[list[np.ndarray]] = []
    char, advance = "", 0.0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head = line.split()
        if head[0] == "char":
            char = chr(int(head[1].removeprefix("U+"), 16))
        elif head[0] == "advance":
            advance = float(head[1])
        elif head[0] == "contour":
            contours.append([])
        else:
            if len(head) != 8 or not contours:
                raise DomainError(f"malformed glyph line {lineno}: {raw!r}")
            contours[-1].append(np.array([float(v) for v in head]).reshape(4, 2))
    return GlyphOutline([np.stack(c) for c in contours if c], char, advance)


def write_glyph(glyph: GlyphOutline, path) -> None:
    Path(path).write_text(format_glyph(glyph))


def read_glyph(path) -> GlyphOutline:
    return parse_glyph(Path(path).read_text())


def glyph_filename(char: str) -> str:
    return f"{ord(char):04X}.glyph"
