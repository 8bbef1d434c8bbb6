"""Small deterministic SVG charts (line/scatter plots and MCB intervals)."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        left, right, top, bottom = MARGIN
        self.px = (left, WIDTH - right)
        self.py = (HEIGHT - bottom, top)

    def x(self, v):
        return self.px[0] + (v - self.x0) / (self.x1 - self.x0) * (self.px[1] - self.px[0])

    def y(self, v):
        return self.py[0] + (v - self.y0) / (self.y1 - self.y0) * (self.py[1] - self.py[0])


def _axes(f: _Frame, title: str, xlabel: str, ylabel: str) -> list:
    out = [
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{_fmt(f.px[0])}" y1="{_fmt(f.py[0])}" x2="{_fmt(f.px[1])}" y2="{_fmt(f.py[0])}" stroke="black"/>',
        f'<line x1="{_fmt(f.px[0])}" y1="{_fmt(f.py[0])}" x2="{_fmt(f.px[0])}" y2="{_fmt(f.py[1])}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
    ]
    for v in np.linspace(f.y0, f.y1, 5):
        out.append(f'<text x="{_fmt(f.px[0] - 4)}" y="{_fmt(f.y(v) + 4)}" text-anchor="end" font-size="10">{v:.3g}</text>')
    for v in np.linspace(f.x0, f.x1, 5):
        out.append(f'<text x="{_fmt(f.x(v))}" y="{_fmt(f.py[0] + 14)}" text-anchor="middle" font-size="10">{v:.4g}</text>')
    return out


def _doc(body: list) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">'
    return "\n".join([head, *body, "</svg>", ""])


def _limits(arrays, pad=0.05) -> Tuple[float, float]:
    vals = np.concatenate([np.asarray(a, float)[np.isfinite(a)] for a in arrays] or [np.zeros(1)])
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo or 1.0
    return lo - pad * span, hi + pad * span


def line_plot(
    curves: Sequence[Tuple[str, Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    markers: bool = False,
    ylim: Optional[Tuple[float, float]] = None,
) -> str:
    """``curves`` is a list of (label, xs, ys). ``markers`` draws points instead of lines."""
    xs = [np.asarray(c[1], float) for c in curves]
    ys = [np.asarray(c[2], float) for c in curves]
    f = _Frame(_limits(xs, 0.0), ylim or _limits(ys))
    body = _axes(f, title, xlabel, ylabel)
    for n, (label, x, y) in enumerate(zip((c[0] for c in curves), xs, ys)):
        color = COLORS[n % len(COLORS)]
        ok = np.isfinite(y)
        if markers:
            body.extend(
                f'<circle cx="{_fmt(f.x(a))}" cy="{_fmt(f.y(b))}" r="1.2" fill="{color}"/>' for a, b in zip(x[ok], y[ok])
            )
        else:
            pts = " ".join(f"{_fmt(f.x(a))},{_fmt(f.y(b))}" for a, b in zip(x[ok], y[ok]))
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        body.append(
            f'<text x="{_fmt(f.px[1] - 4)}" y="{40 + 14 * n}" text-anchor="end" font-size="11" fill="{color}">{escape(label)}</text>'
        )
    return _doc(body)


def mcb_plot(methods: Sequence[str], avg_rank, lower, upper, best: int, title: str) -> str:
    """Average rank dot with interval per method; the best method's interval shaded."""
    k = len(methods)
    height = max(HEIGHT, 60 + 28 * k)
    lo, hi = float(np.min(lower)), float(np.max(upper))
    span = hi - lo or 1.0
    left, right = 170, WIDTH - 30

    def x(v):
        return left + (v - (lo - 0.05 * span)) / (1.1 * span) * (right - left)

    body = [
        f'<rect x="0" y="0" width="{WIDTH}" height="{height}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{_fmt(x(lower[best]))}" y="30" width="{_fmt(x(upper[best]) - x(lower[best]))}" '
        f'height="{28 * k}" fill="#cccccc" fill-opacity="0.6"/>',
    ]
    order = np.argsort(avg_rank, kind="stable")
    for row, i in enumerate(order):
        yy = 44 + 28 * row
        body.append(f'<text x="{left - 8}" y="{yy + 4}" text-anchor="end" font-size="12">{escape(methods[i])}</text>')
        body.append(f'<line x1="{_fmt(x(lower[i]))}" y1="{yy}" x2="{_fmt(x(upper[i]))}" y2="{yy}" stroke="black"/>')
        body.append(f'<circle cx="{_fmt(x(avg_rank[i]))}" cy="{yy}" r="3.5" fill="black"/>')
        body.append(f'<text x="{_fmt(x(upper[i]) + 4)}" y="{yy + 4}" font-size="10">{avg_rank[i]:.2f}</text>')
    body.append(f'<text x="{WIDTH / 2}" y="{height - 8}" text-anchor="middle" font-size="12">average rank</text>')
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">'
    return "\n".join([head, *body, "</svg>", ""])
