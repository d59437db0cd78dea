"""Glyph outlines from installed fonts (needs the optional matplotlib extra).

Outlines come out in em units with y pointing down and the baseline at
y = 0, which is what the word layout expects.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .geometry import GlyphOutline, glyph_filename, line_as_cubic, quad_as_cubic, read_glyph, write_glyph

DEFAULT_FAMILY = "DejaVu Sans"


def _mpl():
    try:
        from matplotlib.font_manager import FontProperties, findfont
        try:
            from matplotlib.ft2font import LoadFlags
            LOAD_NO_HINTING = LoadFlags.NO_HINTING
        except ImportError:  # matplotlib < 3.10
            from matplotlib.ft2font import LOAD_NO_HINTING
        from matplotlib.path import Path as MplPath
        from matplotlib.textpath import TextPath
        from matplotlib.font_manager import get_font
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise ConfigError("font export needs matplotlib (pip install 'artifact[fonts]')") from exc
    return FontProperties, findfont, LOAD_NO_HINTING, MplPath, TextPath, get_font


def _close(segs: list[np.ndarray], start: np.ndarray) -> list[np.ndarray]:
    if not segs:
        return segs
    end = segs[-1][3]
    if np.max(np.abs(end - start)) > 1e-9:
        segs.append(line_as_cubic(end, start))
    else:
        segs[-1] = segs[-1].copy()
        segs[-1][3] = start
    return segs


def glyph_from_font(char: str, family: str = DEFAULT_FAMILY) -> GlyphOutline:
    """Outline of one character as cubic contours, 1 em high."""
    if len(char) != 1 or char.isspace():
        raise DomainError(f"expected one visible character, got {char!r}")
    FontProperties, findfont, LOAD_NO_HINTING, MplPath, TextPath, get_font = _mpl()
    prop = FontProperties(family=family)
    tp = TextPath((0, 0), char, size=1.0, prop=prop)
    contours, segs = [], []
    start = cur = None
    for verts, code in tp.iter_segments(curves=True, simplify=False):
        v = np.asarray(verts, dtype=float).reshape(-1, 2) * np.array([1.0, -1.0])
        if code == MplPath.MOVETO:
            if segs:
                contours.append(np.stack(_close(segs, start)))
            segs, start, cur = [], v[0], v[0]
        elif code == MplPath.LINETO:
            if np.max(np.abs(v[0] - cur)) > 1e-12:
                segs.append(line_as_cubic(cur, v[0]))
            cur = v[0]
        elif code == MplPath.CURVE3:
            segs.append(quad_as_cubic(cur, v[0], v[1]))
            cur = v[1]
        elif code == MplPath.CURVE4:
            segs.append(np.stack([cur, v[0], v[1], v[2]]))
            cur = v[2]
        elif code == MplPath.CLOSEPOLY:
            if segs:
                contours.append(np.stack(_close(segs, start)))
            segs = []
            cur = start
    if segs:
        contours.append(np.stack(_close(segs, start)))
    if not contours:
        raise DomainError(f"font has no outline for {char!r}")
    font = get_font(findfont(prop))
    font.set_size(1000, 72)
    g = font.load_char(ord(char), flags=LOAD_NO_HINTING)
    advance = g.linearHoriAdvance / 65536.0 / 1000.0
    return GlyphOutline(contours, source_char=char, advance=float(advance))


def export_glyphs(chars: str, directory, family: str = DEFAULT_FAMILY) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for ch in dict.fromkeys(chars):
        if ch.isspace():
            continue
        p = d / glyph_filename(ch)
        write_glyph(glyph_from_font(ch, family), p)
        out.append(p)
    return out


def load_word_glyphs(word: str, glyph_dir=None, family: str = DEFAULT_FAMILY) -> list[GlyphOutline]:
    """Glyphs for ``word`` from a directory of glyph files, or from the font."""
    out = []
    for ch in word:
        if glyph_dir is not None:
            p = Path(glyph_dir) / glyph_filename(ch)
            if not p.exists():
                raise ConfigError(f"no glyph file for {ch!r} in {glyph_dir}")
            out.append(read_glyph(p))
        else:
            out.append(glyph_from_font(ch, family))
    return out
