"""Self-contained log-log scatter plots written directly as SVG text."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 480
MARGIN = dict(left=80, right=170, top=30, bottom=60)
COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def log_span(values: Sequence[float], margin: float = 0.1) -> tuple[float, float]:
    """``log10`` axis limits covering ``values`` with ``margin`` of the span added each side."""
    logs = [math.log10(v) for v in values]
    lo, hi = min(logs), max(logs)
    span = hi - lo if hi > lo else 1.0
    return lo - margin * span, hi + margin * span


def _positive(values: Sequence[float]) -> list[float]:
    pos = [v for v in values if v > 0 and math.isfinite(v)]
    floor = min(pos) if pos else 1e-16
    return [v if v > 0 and math.isfinite(v) else floor for v in values]


def scatter_svg(
    x: Sequence[float],
    series: dict[str, Sequence[float]],
    xlabel: str,
    ylabel: str,
    title: str = "",
    bound_key: str | None = None,
) -> str:
    """Render one mark per (row, series).  Non-positive values sit at the smallest positive datum.

    ``bound_key`` names the series drawn with square markers.
    """
    if not x:
        raise ValueError("nothing to plot")
    xs = _positive(list(x))
    ys = {k: _positive(list(v)) for k, v in series.items()}
    x_lo, x_hi = log_span(xs)
    y_lo, y_hi = log_span([v for vals in ys.values() for v in vals])
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (math.log10(v) - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return MARGIN["top"] + (y_hi - math.log10(v)) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect class="frame" x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{_fmt(MARGIN["left"] + pw / 2)}" y="18" text-anchor="middle">{escape(title)}</text>')
    for d in range(math.ceil(x_lo), math.floor(x_hi) + 1):
        X = px(10.0**d)
        out.append(f'<line class="tick" x1="{_fmt(X)}" y1="{MARGIN["top"] + ph}" x2="{_fmt(X)}" '
                   f'y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(X)}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">1e{d}</text>')
    for d in range(math.ceil(y_lo), math.floor(y_hi) + 1):
        Y = py(10.0**d)
        out.append(f'<line class="tick" x1="{MARGIN["left"] - 5}" y1="{_fmt(Y)}" x2="{MARGIN["left"]}" '
                   f'y2="{_fmt(Y)}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{_fmt(Y + 4)}" text-anchor="end">1e{d}</text>')
    out.append(f'<text x="{_fmt(MARGIN["left"] + pw / 2)}" y="{HEIGHT - 15}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="20" y="{_fmt(MARGIN["top"] + ph / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 20 {_fmt(MARGIN["top"] + ph / 2)})">{escape(ylabel)}</text>')

    for i, (name, vals) in enumerate(ys.items()):
        color = "black" if name == bound_key else COLORS[i % len(COLORS)]
        for xv, yv in zip(xs, vals):
            X, Y = px(xv), py(yv)
            if name == bound_key:
                out.append(f'<rect class="mark" data-series="{escape(name)}" x="{_fmt(X - 3.5)}" '
                           f'y="{_fmt(Y - 3.5)}" width="7" height="7" fill="none" stroke="{color}"/>')
            else:
                out.append(f'<circle class="mark" data-series="{escape(name)}" cx="{_fmt(X)}" cy="{_fmt(Y)}" '
                           f'r="3" fill="{color}" fill-opacity="0.7"/>')
        ly = MARGIN["top"] + 10 + 18 * i
        lx = WIDTH - MARGIN["right"] + 15
        if name == bound_key:
            out.append(f'<rect x="{lx - 3.5}" y="{ly - 3.5}" width="7" height="7" fill="none" stroke="{color}"/>')
        else:
            out.append(f'<circle cx="{lx}" cy="{ly}" r="3" fill="{color}"/>')
        out.append(f'<text class="legend" x="{lx + 10}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
