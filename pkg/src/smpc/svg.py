"""Minimal SVG line charts; enough for fan plots and cost curves."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence
from xml.sax.saxutils import escape

PALETTE = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


@dataclass
class Line:
    xs: Sequence[float]
    ys: Sequence[float]
    color: str = "#1f77b4"
    label: Optional[str] = None
    width: float = 1.2
    opacity: float = 1.0
    dash: Optional[str] = None


@dataclass
class Panel:
    title: str
    xlabel: str
    ylabel: str
    lines: List[Line] = field(default_factory=list)
    hlines: List[Line] = field(default_factory=list)
    # (x1, y1, x2, y2) arrays per color, for tree fans; deduplicated in pixel space
    segments: List[tuple] = field(default_factory=list)


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _panel_svg(panel: Panel, x0: float, y0: float, w: float, h: float) -> List[str]:
    pts_x = [float(v) for ln in panel.lines for v in ln.xs]
    pts_y = [float(v) for ln in panel.lines + panel.hlines for v in ln.ys]
    for x1, y1, x2, y2, _ in panel.segments:
        pts_x += [float(min(x1.min(), x2.min())), float(max(x1.max(), x2.max()))]
        pts_y += [float(min(y1.min(), y2.min())), float(max(y1.max(), y2.max()))]
    pts_y = [v for v in pts_y if v == v and abs(v) != float("inf")]
    xmin, xmax = (min(pts_x), max(pts_x)) if pts_x else (0.0, 1.0)
    ymin, ymax = (min(pts_y), max(pts_y)) if pts_y else (0.0, 1.0)
    if xmax == xmin:
        xmax = xmin + 1.0
    if ymax == ymin:
        ymax = ymin + 1.0
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad
    left, right, top, bottom = 60, 15, 30, 45
    pw, ph = w - left - right, h - top - bottom

    def sx(v):
        return x0 + left + (v - xmin) / (xmax - xmin) * pw

    def sy(v):
        return y0 + top + (1 - (v - ymin) / (ymax - ymin)) * ph

    out = [f'<rect x="{x0 + left:.1f}" y="{y0 + top:.1f}" width="{pw:.1f}" height="{ph:.1f}" '
           'fill="none" stroke="#333"/>',
           f'<text x="{x0 + w / 2:.1f}" y="{y0 + 18:.1f}" text-anchor="middle" '
           f'font-size="13">{escape(panel.title)}</text>',
           f'<text x="{x0 + left + pw / 2:.1f}" y="{y0 + h - 8:.1f}" text-anchor="middle" '
           f'font-size="11">{escape(panel.xlabel)}</text>',
           f'<text x="{x0 + 14:.1f}" y="{y0 + top + ph / 2:.1f}" text-anchor="middle" '
           f'font-size="11" transform="rotate(-90 {x0 + 14:.1f} {y0 + top + ph / 2:.1f})">'
           f'{escape(panel.ylabel)}</text>']
    for t in _ticks(xmin, xmax):
        out.append(f'<text x="{sx(t):.1f}" y="{y0 + top + ph + 15:.1f}" '
                   f'text-anchor="middle" font-size="10">{_fmt(t)}</text>')
    for t in _ticks(ymin, ymax):
        out.append(f'<text x="{x0 + left - 4:.1f}" y="{sy(t) + 3:.1f}" '
                   f'text-anchor="end" font-size="10">{_fmt(t)}</text>')
    for ln in panel.hlines:
        y = float(ln.ys[0])
        out.append(f'<line x1="{x0 + left:.1f}" x2="{x0 + left + pw:.1f}" y1="{sy(y):.1f}" '
                   f'y2="{sy(y):.1f}" stroke="{ln.color}" stroke-dasharray="{ln.dash or "5,4"}"/>')
    for x1, y1, x2, y2, color in panel.segments:
        seen = set()
        for a, b, c, d in zip(x1, y1, x2, y2):
            key = (round(sx(a) * 2), round(sy(b) * 2), round(sx(c) * 2), round(sy(d) * 2))
            if key in seen:
                continue
            seen.add(key)
            out.append(f'<line x1="{key[0] / 2}" y1="{key[1] / 2}" x2="{key[2] / 2}" '
                       f'y2="{key[3] / 2}" stroke="{color}" stroke-width="0.8"/>')
    legend_y = y0 + top + 12
    for ln in panel.lines:
        pts = " ".join(f"{sx(float(a)):.2f},{sy(float(b)):.2f}" for a, b in zip(ln.xs, ln.ys)
                       if b == b and abs(b) != float("inf"))
        dash = f' stroke-dasharray="{ln.dash}"' if ln.dash else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{ln.color}" '
                   f'stroke-width="{ln.width}" stroke-opacity="{ln.opacity}"{dash}/>')
        if ln.label:
            out.append(f'<text x="{x0 + left + pw - 6:.1f}" y="{legend_y:.1f}" text-anchor="end" '
                       f'font-size="11" fill="{ln.color}">{escape(ln.label)}</text>')
            legend_y += 14
    return out


def render(panels: Sequence[Panel], panel_width: int = 480, panel_height: int = 360) -> str:
    width = panel_width * len(panels)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{panel_height}" '
             f'viewBox="0 0 {width} {panel_height}" font-family="sans-serif">',
             f'<rect width="{width}" height="{panel_height}" fill="white"/>']
    for i, p in enumerate(panels):
        parts.extend(_panel_svg(p, i * panel_width, 0, panel_width, panel_height))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
