"""SVG 1.1 subset writer and reader.

Written documents contain one background <rect> and one <path> per stroke.
Paths use absolute "M x y C ..." commands with 4-decimal coordinates; filled
strokes close with "Z". The viewBox starts at (-0.5, -0.5) so a pixel
center (c, r) of the raster lands on the same spot in a browser.
"""
from __future__ import annotations

import re
from pathlib import Path
from xml.parsers import expat

import numpy as np

from .errors import DomainError, UnsupportedElementError
from .geometry import Stroke, VectorSketch

SVG_NS = "http://www.w3.org/2000/svg"
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_TOKEN = re.compile(rf"([MmCcZzLlHhVvSsQqTtAa])|({_NUM})")


def _f(x: float) -> str:
    s = f"{x:.4f}"
    return "0.0000" if s == "-0.0000" else s


def _color(c) -> str:
    return "rgb(" + ",".join(f"{100.0 * v:.4f}%" for v in c) + ")"


def path_data(stroke: Stroke) -> str:
    p = stroke.points
    parts = [f"M {_f(p[0, 0])} {_f(p[0, 1])}"]
    for i in range(stroke.num_curves):
        c = p[3 * i + 1:3 * i + 4]
        parts.append("C " + " ".join(f"{_f(x)} {_f(y)}" for x, y in c))
    if stroke.filled:
        parts.append("Z")
    return " ".join(parts)


def _path_element(stroke: Stroke, extra: str = "") -> str:
    d = path_data(stroke)
    if stroke.filled:
        paint = f'fill="{_color(stroke.color)}" fill-opacity="{_f(stroke.opacity)}" stroke="none" stroke-width="{_f(stroke.width)}"'
    else:
        paint = (f'fill="none" stroke="{_color(stroke.color)}" stroke-width="{_f(stroke.width)}" '
                 f'stroke-opacity="{_f(stroke.opacity)}" stroke-linecap="round" stroke-linejoin="round"')
    if extra:
        return f'<path d="{d}" {paint}>{extra}</path>'
    return f'<path d="{d}" {paint}/>'


def _header(sketch: VectorSketch) -> list[str]:
    w, h = sketch.canvas
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="{SVG_NS}" version="1.1" width="{w}" height="{h}" viewBox="-0.5 -0.5 {w} {h}">',
        f'<rect x="-0.5" y="-0.5" width="{w}" height="{h}" fill="{_color(sketch.background)}"/>',
    ]


def svg_string(sketch: VectorSketch) -> str:
    lines = _header(sketch) + [_path_element(s) for s in sketch.strokes] + ["</svg>"]
    return "\n".join(lines) + "\n"


def write_svg(sketch: VectorSketch, path) -> Path:
    p = Path(path)
    p.write_text(svg_string(sketch), encoding="utf-8")
    return p


def animated_svg_string(frames: list[VectorSketch], fps: float = 12.0) -> str:
    """Per-frame path data swapped on a timer with discrete SMIL animation."""
    if not frames:
        raise DomainError("no frames")
    if fps <= 0:
        raise DomainError("fps must be positive")
    dur = f"{len(frames) / fps:.4f}s"
    lines = _header(frames[0])
    for i, s in enumerate(frames[0].strokes):
        values = ";".join(path_data(f.strokes[i]) for f in frames)
        anim = f'<animate attributeName="d" values="{values}" dur="{dur}" repeatCount="indefinite" calcMode="discrete"/>'
        lines.append(_path_element(s, anim))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_animated_svg(frames: list[VectorSketch], path, fps: float = 12.0) -> Path:
    p = Path(path)
    p.write_text(animated_svg_string(frames, fps), encoding="utf-8")
    return p


# ----------------------------------------------------------------------------
# reading


def parse_path_data(d: str) -> tuple[np.ndarray, bool]:
    """Control points and closed flag of an "M (C)+ [Z]" absolute path."""
    toks = []
    pos = 0
    for m in _TOKEN.finditer(d):
        if d[pos:m.start()].strip(" ,\n\t\r"):
            raise DomainError(f"cannot parse path data near {d[pos:m.start()]!r}")
        toks.append(m.group(1) or float(m.group(2)))
        pos = m.end()
    if d[pos:].strip(" ,\n\t\r"):
        raise DomainError(f"trailing path data {d[pos:]!r}")
    if len(toks) < 3 or toks[0] != "M":
        raise DomainError("path must start with an absolute M command")
    pts = [(toks[1], toks[2])]
    i, cmd, closed = 3, None, False
    while i < len(toks):
        t = toks[i]
        if isinstance(t, str):
            if t == "C":
                cmd = "C"
                i += 1
                continue
            if t in "Zz" and i == len(toks) - 1:
                closed = True
                i += 1
                continue
            raise DomainError(f"unsupported path command {t!r}")
        if cmd != "C":
            raise DomainError("coordinates outside a C command")
        chunk = toks[i:i + 6]
        if len(chunk) < 6 or any(isinstance(v, str) for v in chunk):
            raise DomainError("a C command needs six numbers")
        pts.extend([(chunk[0], chunk[1]), (chunk[2], chunk[3]), (chunk[4], chunk[5])])
        i += 6
    return np.asarray(pts, dtype=float), closed


def _parse_color(value: str | None, default=(0.0, 0.0, 0.0)):
    if not value or value == "none":
        return default
    v = value.strip()
    if v.startswith("#") and len(v) == 7:
        return tuple(int(v[i:i + 2], 16) / 255.0 for i in (1, 3, 5))
    m = re.fullmatch(r"rgb\(([^)]*)\)", v)
    if m:
        out = []
        for part in m.group(1).split(","):
            part = part.strip()
            out.append(float(part[:-1]) / 100.0 if part.endswith("%") else float(part) / 255.0)
        if len(out) == 3:
            return tuple(out)
    if v == "black":
        return (0.0, 0.0, 0.0)
    if v == "white":
        return (1.0, 1.0, 1.0)
    raise DomainError(f"unsupported color {value!r}")


def read_svg(path) -> VectorSketch:
    """Parse the subset written by ``write_svg``. Any element other than
    svg, rect, path, title or desc raises UnsupportedElementError with its
    line number."""
    text = Path(path).read_bytes()
    parser = expat.ParserCreate(namespace_separator=" ")
    state: dict = {"canvas": None, "bg": (1.0, 1.0, 1.0), "strokes": [], "seen_svg": False}

    def start(name, attrs):
        tag = name.split(" ")[-1]
        line = parser.CurrentLineNumber
        if tag == "svg":
            state["seen_svg"] = True
            try:
                w = float(str(attrs.get("width", "0")).rstrip("px"))
                h = float(str(attrs.get("height", "0")).rstrip("px"))
            except ValueError as exc:
                raise DomainError(f"bad svg size at line {line}") from exc
            if "viewBox" in attrs and (w == 0 or h == 0):
                vb = [float(x) for x in attrs["viewBox"].replace(",", " ").split()]
                w, h = vb[2], vb[3]
            state["canvas"] = (int(round(w)), int(round(h)))
        elif tag == "rect":
            state["bg"] = _parse_color(attrs.get("fill"), (1.0, 1.0, 1.0))
        elif tag == "path":
            pts, closed = parse_path_data(attrs.get("d", ""))
            if closed:
                if np.max(np.abs(pts[-1] - pts[0])) > 1e-6:
                    raise DomainError(f"closed path at line {line} does not end at its start")
                stroke = Stroke(pts, width=float(attrs.get("stroke-width", 0.0)),
                                opacity=float(attrs.get("fill-opacity", 1.0)),
                                color=_parse_color(attrs.get("fill")), filled=True)
            else:
                stroke = Stroke(pts, width=float(attrs.get("stroke-width", 1.0)),
                                opacity=float(attrs.get("stroke-opacity", 1.0)),
                                color=_parse_color(attrs.get("stroke")))
            state["strokes"].append(stroke)
        elif tag not in ("title", "desc"):
            raise UnsupportedElementError(tag, line)

    parser.StartElementHandler = start
    try:
        parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise DomainError(f"{path}: malformed XML ({exc})") from exc
    if not state["seen_svg"] or state["canvas"] is None:
        raise DomainError(f"{path}: no <svg> root")
    return VectorSketch(state["strokes"], state["canvas"], state["bg"])
