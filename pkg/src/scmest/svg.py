"""Minimal static SVG line charts (no plotting dependency).

Good enough for the sweep diagnostics: log-log line series with axis
ticks and a legend, written as a standalone .svg file.
"""

from __future__ import annotations

import math

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

WIDTH, HEIGHT = 640, 440
MARGIN = dict(left=70, right=20, top=40, bottom=50)


def _ticks_log(lo: float, hi: float):
    a = int(math.floor(math.log10(lo)))
    b = int(math.ceil(math.log10(hi)))
    return [10.0 ** k for k in range(a, b + 1)]


def line_chart(series, title: str = "", xlabel: str = "", ylabel: str = "",
               loglog: bool = True) -> str:
    """Render [(label, xs, ys), ...] to an SVG string."""
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys)
           if math.isfinite(x) and math.isfinite(y) and (not loglog or (x > 0 and y > 0))]
    if not pts:
        raise ValueError("nothing to plot")
    xs_all = [p[0] for p in pts]
    ys_all = [p[1] for p in pts]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if loglog:
        fx = lambda v: math.log10(v)
        x0, x1, y0, y1 = fx(x0), fx(x1), fx(y0), fx(y1)
    else:
        fx = lambda v: v
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    iw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ih = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (fx(v) - x0) / (x1 - x0) * iw

    def py(v):
        return MARGIN["top"] + ih - (fx(v) - y0) / (y1 - y0) * ih

    out = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
           'font-family="sans-serif" font-size="12">' % (WIDTH, HEIGHT)]
    out.append('<rect width="100%" height="100%" fill="white"/>')
    out.append('<text x="%d" y="20" font-size="14">%s</text>' % (MARGIN["left"], title))
    out.append('<rect x="%d" y="%d" width="%d" height="%d" fill="none" '
               'stroke="#333"/>' % (MARGIN["left"], MARGIN["top"], iw, ih))
    if loglog:
        for t in _ticks_log(10 ** x0, 10 ** x1):
            if not (10 ** x0 <= t <= 10 ** x1 * 1.0001):
                continue
            x = px(t)
            out.append('<line x1="%.1f" y1="%d" x2="%.1f" y2="%d" stroke="#ccc"/>'
                       % (x, MARGIN["top"], x, MARGIN["top"] + ih))
            out.append('<text x="%.1f" y="%d" text-anchor="middle">%g</text>'
                       % (x, MARGIN["top"] + ih + 16, t))
        for t in _ticks_log(10 ** y0, 10 ** y1):
            if not (10 ** y0 <= t <= 10 ** y1 * 1.0001):
                continue
            yv = py(t)
            out.append('<line x1="%d" y1="%.1f" x2="%d" y2="%.1f" stroke="#ccc"/>'
                       % (MARGIN["left"], yv, MARGIN["left"] + iw, yv))
            out.append('<text x="%d" y="%.1f" text-anchor="end">%g</text>'
                       % (MARGIN["left"] - 6, yv + 4, t))
    out.append('<text x="%d" y="%d" text-anchor="middle">%s</text>'
               % (MARGIN["left"] + iw // 2, HEIGHT - 12, xlabel))
    out.append('<text x="16" y="%d" transform="rotate(-90 16 %d)" '
               'text-anchor="middle">%s</text>'
               % (MARGIN["top"] + ih // 2, MARGIN["top"] + ih // 2, ylabel))
    for k, (label, xs, ys) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        path = " ".join("%s%.1f,%.1f" % ("M" if i == 0 else "L", px(x), py(y))
                        for i, (x, y) in enumerate(zip(xs, ys))
                        if math.isfinite(x) and math.isfinite(y))
        out.append('<path d="%s" fill="none" stroke="%s" stroke-width="1.5"/>'
                   % (path, color))
        ly = MARGIN["top"] + 14 + 16 * k
        out.append('<line x1="%d" y1="%d" x2="%d" y2="%d" stroke="%s" '
                   'stroke-width="2"/>' % (MARGIN["left"] + iw - 150, ly - 4,
                                           MARGIN["left"] + iw - 130, ly - 4, color))
        out.append('<text x="%d" y="%d">%s</text>'
                   % (MARGIN["left"] + iw - 124, ly, label))
    out.append("</svg>")
    return "\n".join(out)
