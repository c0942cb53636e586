"""Minimal dependency-free SVG line charts with byte-stable output."""

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
DASHES = {"solid": "", "dashed": ' stroke-dasharray="6,4"'}


def _fmt(v):
    return f"{v:.2f}"


def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = step * math.floor(lo / step)
    ticks = []
    t = start
    while t <= hi + 1e-12 * step:
        ticks.append(round(t, 12))
        t += step
    if ticks[-1] < hi:
        ticks.append(round(t, 12))
    return ticks


def line_chart(series, x_labels, title="", y_label="", width=760, height=440):
    """Render ``series`` (dicts with ``label``, ``values``, optional ``style``)
    against categorical ``x_labels``.  ``None``/NaN values break the line.
    """
    left, right, top, bottom = 70, 190, 40, 50
    pw, ph = width - left - right, height - top - bottom
    finite = [v for s in series for v in s["values"] if v is not None and v == v]
    lo, hi = (min(finite), max(finite)) if finite else (-1.0, 1.0)
    ticks = _nice_ticks(lo, hi)
    y0, y1 = ticks[0], ticks[-1]
    n = max(len(x_labels), 1)

    def px(i):
        return left + (pw * (i + 0.5) / n)

    def py(v):
        return top + ph * (1.0 - (v - y0) / (y1 - y0))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{_fmt(left + pw / 2)}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    for t in ticks:
        y = py(t)
        out.append(f'<line x1="{left}" y1="{_fmt(y)}" x2="{left + pw}" y2="{_fmt(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(y + 4)}" text-anchor="end">{t:g}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for i, lab in enumerate(x_labels):
        out.append(f'<text x="{_fmt(px(i))}" y="{top + ph + 18}" text-anchor="middle">{escape(str(lab))}</text>')
    out.append(
        f'<text x="18" y="{_fmt(top + ph / 2)}" text-anchor="middle" '
        f'transform="rotate(-90 18 {_fmt(top + ph / 2)})">{escape(y_label)}</text>'
    )
    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        dash = DASHES[s.get("style", "solid")]
        segment = []
        segments = []
        for i, v in enumerate(s["values"]):
            if v is None or v != v:
                if segment:
                    segments.append(segment)
                segment = []
            else:
                segment.append((px(i), py(v)))
        if segment:
            segments.append(segment)
        for seg in segments:
            pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in seg)
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"{dash}/>')
            for x, y in seg:
                out.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * k
        lx = left + pw + 14
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="2"{dash}/>')
        out.append(f'<text x="{lx + 28}" y="{ly}">{escape(s["label"])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
