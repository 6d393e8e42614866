"""Minimal deterministic SVG line charts (panels of polylines with axes and legends)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str = ""
    color: Optional[str] = None
    dashed: bool = False


@dataclass
class Panel:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    series: List[Series] = field(default_factory=list)

    def add(self, x, y, label="", color=None, dashed=False) -> "Panel":
        self.series.append(Series(np.asarray(x, float), np.asarray(y, float), label, color, dashed))
        return self


def nice_ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    """Round tick positions covering ``[lo, hi]``."""
    if not np.isfinite(lo) or not np.isfinite(hi):
        return np.array([0.0])
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / max(count - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    stop = math.ceil(hi / step) * step
    return np.arange(start, stop + 0.5 * step, step)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    return f"{v:.4g}"


def render(panels: Sequence[Panel], cols: int = 2, width: int = 420, height: int = 300,
           title: str = "") -> str:
    """SVG document with the panels laid out on a grid, row-major."""
    cols = max(1, min(cols, len(panels)))
    rows = math.ceil(len(panels) / cols)
    top = 30 if title else 0
    W, H = cols * width, rows * height + top
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>']
    if title:
        out.append(f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
                   f'{escape(title)}</text>')
    for i, panel in enumerate(panels):
        ox, oy = (i % cols) * width, top + (i // cols) * height
        out.extend(_panel(panel, ox, oy, width, height))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _panel(p: Panel, ox, oy, width, height):
    ml, mr, mt, mb = 60, 15, 25, 45
    pw, ph = width - ml - mr, height - mt - mb
    xs = [s.x[np.isfinite(s.x)] for s in p.series if s.x.size]
    ys = [s.y[np.isfinite(s.y)] for s in p.series if s.y.size]
    xs = np.concatenate(xs) if xs else np.array([0.0, 1.0])
    ys = np.concatenate(ys) if ys else np.array([0.0, 1.0])
    if xs.size == 0:
        xs = np.array([0.0, 1.0])
    if ys.size == 0:
        ys = np.array([0.0, 1.0])
    xt, yt = nice_ticks(xs.min(), xs.max()), nice_ticks(ys.min(), ys.max())
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    sx = lambda v: ox + ml + (v - x0) / (x1 - x0) * pw
    sy = lambda v: oy + mt + ph - (v - y0) / (y1 - y0) * ph
    g = [f'<g>', f'<rect x="{ox + ml}" y="{oy + mt}" width="{pw}" height="{ph}" '
         f'fill="none" stroke="#444"/>']
    for v in xt:
        X = _fmt(sx(v))
        g.append(f'<line x1="{X}" y1="{oy + mt + ph}" x2="{X}" y2="{oy + mt + ph + 4}" stroke="#444"/>')
        g.append(f'<text x="{X}" y="{oy + mt + ph + 16}" text-anchor="middle">{_tick_label(v)}</text>')
    for v in yt:
        Y = _fmt(sy(v))
        g.append(f'<line x1="{ox + ml - 4}" y1="{Y}" x2="{ox + ml}" y2="{Y}" stroke="#444"/>')
        g.append(f'<text x="{ox + ml - 6}" y="{Y}" text-anchor="end" dominant-baseline="middle">'
                 f'{_tick_label(v)}</text>')
    if p.title:
        g.append(f'<text x="{ox + ml + pw / 2:.1f}" y="{oy + 16}" text-anchor="middle" '
                 f'font-size="12">{escape(p.title)}</text>')
    if p.xlabel:
        g.append(f'<text x="{ox + ml + pw / 2:.1f}" y="{oy + height - 8}" '
                 f'text-anchor="middle">{escape(p.xlabel)}</text>')
    if p.ylabel:
        cx, cy = ox + 14, oy + mt + ph / 2
        g.append(f'<text x="{cx}" y="{cy:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 {cx} {cy:.1f})">{escape(p.ylabel)}</text>')
    for k, s in enumerate(p.series):
        color = s.color or PALETTE[k % len(PALETTE)]
        ok = np.isfinite(s.x) & np.isfinite(s.y)
        pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(s.x[ok], s.y[ok]))
        dash = ' stroke-dasharray="6 4"' if s.dashed else ""
        if pts:
            g.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"{dash}/>')
        if s.label:
            ly = oy + mt + 14 + 14 * k
            lx = ox + ml + pw - 110
            g.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="1.5"{dash}/>')
            g.append(f'<text x="{lx + 22}" y="{ly}">{escape(s.label)}</text>')
    g.append("</g>")
    return g


def write_svg(path, panels: Sequence[Panel], **kw) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render(panels, **kw))
