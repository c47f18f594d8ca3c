"""Standalone SVG plots for ROC curves and 2D embeddings.

Coordinates are printed with fixed precision, so identical input gives
byte-identical files.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 400
MARGIN = dict(left=60, right=140, top=30, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


class PlotError(ValueError):
    pass


def _f(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _nice_ticks(lo: float, hi: float, n: int = 5):
    span = hi - lo
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _label(v: float) -> str:
    return f"{v:g}"


def emit_svg(series, kind: str, path, title: str = "", xlabel: str | None = None,
             ylabel: str | None = None) -> None:
    """Write ``series`` (a list of ``(label, [(x, y), ...])``) as an SVG.

    ``kind="roc"`` draws each series as one polyline in the unit square plus
    a dashed chance diagonal; ``kind="scatter"`` draws one circle per point
    with axes fitted to the data.
    """
    if kind not in ("roc", "scatter"):
        raise PlotError(f"unknown plot kind {kind!r}; choose 'roc' or 'scatter'")
    series = [(str(lab), [(float(x), float(y)) for x, y in pts]) for lab, pts in series]
    if not series:
        raise PlotError("nothing to plot: empty series list")
    if any(not pts for _, pts in series):
        raise PlotError("every series needs at least one point")
    allpts = [p for _, pts in series for p in pts]
    if any(not (math.isfinite(x) and math.isfinite(y)) for x, y in allpts):
        raise PlotError("points must be finite")
    if kind == "roc":
        if any(not (0 <= x <= 1 and 0 <= y <= 1) for x, y in allpts):
            raise PlotError("ROC points must lie in the unit square")
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
        xlabel = xlabel or "false positive rate"
        ylabel = ylabel or "true positive rate"
    else:
        xs = [p[0] for p in allpts]
        ys = [p[1] for p in allpts]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        if x1 - x0 < 1e-12:
            x0, x1 = x0 - 1, x1 + 1
        if y1 - y0 < 1e-12:
            y0, y1 = y0 - 1, y1 + 1
        px, py = 0.05 * (x1 - x0), 0.05 * (y1 - y0)
        x0, x1, y0, y1 = x0 - px, x1 + px, y0 - py, y1 + py
        xlabel = xlabel or "dimension 1"
        ylabel = ylabel or "dimension 2"

    L, R, T, B = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]

    def sx(x):
        return L + (x - x0) / (x1 - x0) * (R - L)

    def sy(y):
        return B - (y - y0) / (y1 - y0) * (B - T)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_f((L + R) / 2)}" y="18" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="13">{escape(title)}</text>')
    # axes
    out.append(f'<g id="axes" stroke="black" stroke-width="1" fill="none">'
               f'<line x1="{L}" y1="{B}" x2="{R}" y2="{B}"/>'
               f'<line x1="{L}" y1="{B}" x2="{L}" y2="{T}"/></g>')
    ticks = ['<g id="ticks" font-family="sans-serif" font-size="10">']
    for t in _nice_ticks(x0, x1):
        X = _f(sx(t))
        ticks.append(f'<line x1="{X}" y1="{B}" x2="{X}" y2="{B + 4}" stroke="black"/>'
                     f'<text x="{X}" y="{B + 15}" text-anchor="middle">{_label(t)}</text>')
    for t in _nice_ticks(y0, y1):
        Y = _f(sy(t))
        ticks.append(f'<line x1="{L - 4}" y1="{Y}" x2="{L}" y2="{Y}" stroke="black"/>'
                     f'<text x="{L - 7}" y="{Y}" text-anchor="end" dominant-baseline="middle">'
                     f'{_label(t)}</text>')
    ticks.append("</g>")
    out += ticks
    out.append(f'<text x="{_f((L + R) / 2)}" y="{HEIGHT - 12}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{_f((T + B) / 2)}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 16 {_f((T + B) / 2)})">{escape(ylabel)}</text>')

    if kind == "roc":
        out.append(f'<line id="chance" x1="{_f(sx(0))}" y1="{_f(sy(0))}" x2="{_f(sx(1))}" '
                   f'y2="{_f(sy(1))}" stroke="gray" stroke-dasharray="4 4"/>')
    for i, (lab, pts) in enumerate(series):
        colour = PALETTE[i % len(PALETTE)]
        if kind == "roc":
            coords = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in pts)
            out.append(f'<polyline class="series" points="{coords}" fill="none" '
                       f'stroke="{colour}" stroke-width="2"/>')
        else:
            out.append(f'<g class="series" fill="{colour}">')
            out += [f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="3"/>' for x, y in pts]
            out.append("</g>")

    out.append('<g id="legend" font-family="sans-serif" font-size="11">')
    lx = R + 12
    for i, (lab, _) in enumerate(series):
        y = T + 10 + 18 * i
        colour = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{lx}" y="{y - 5}" width="12" height="10" fill="{colour}"/>'
                   f'<text x="{lx + 18}" y="{y}" dominant-baseline="middle">{escape(lab)}</text>')
    out.append("</g>")
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
