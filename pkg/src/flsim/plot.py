"""Self-contained SVG line charts for convergence curves."""
from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"]

WIDTH, HEIGHT = 720, 440
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 40, 60


def _nice_ceiling(value: float) -> float:
    if value <= 0:
        return 1.0
    exp = math.floor(math.log10(value))
    for step in (1, 2, 2.5, 5, 10):
        top = step * 10 ** exp
        if top >= value:
            return top
    return 10 ** (exp + 1)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:g}"


def line_chart(series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
               title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """Render ``(name, xs, ys)`` series as an SVG document string."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if math.isfinite(y)]
    x_max = _nice_ceiling(max(xs_all, default=1))
    y_max = _nice_ceiling(max(ys_all, default=1))
    plot_w = WIDTH - LEFT - RIGHT
    plot_h = HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + plot_w * x / x_max

    def py(y):
        return TOP + plot_h * (1 - y / y_max)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    for i in range(6):
        xv, yv = x_max * i / 5, y_max * i / 5
        out.append(f'<line x1="{_fmt(px(xv))}" y1="{TOP}" x2="{_fmt(px(xv))}" '
                   f'y2="{TOP + plot_h}" stroke="#e5e5e5"/>')
        out.append(f'<line x1="{LEFT}" y1="{_fmt(py(yv))}" x2="{LEFT + plot_w}" '
                   f'y2="{_fmt(py(yv))}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{_fmt(px(xv))}" y="{TOP + plot_h + 18}" '
                   f'text-anchor="middle">{_tick_label(xv)}</text>')
        out.append(f'<text x="{LEFT - 8}" y="{_fmt(py(yv) + 4)}" '
                   f'text-anchor="end">{_tick_label(yv)}</text>')
    out.append(f'<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" '
               f'fill="none" stroke="black"/>')
    out.append(f'<text x="{LEFT + plot_w / 2:.0f}" y="{HEIGHT - 18}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{TOP + plot_h / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {TOP + plot_h / 2:.0f})">{escape(ylabel)}</text>')

    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys)
                          if math.isfinite(y))
        if points:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" '
                       f'points="{points}"/>')
        ly = TOP + 10 + 20 * i
        lx = LEFT + plot_w + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="3"/>')
        out.append(f'<text x="{lx + 30}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
