"""Minimal static SVG line charts for evaluation reports."""
from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / n
    return [lo + i * step for i in range(n + 1)]


def line_chart(series: list[tuple[str, list[float], list[float]]], title: str, xlabel: str, ylabel: str,
               x0: float, y0: float, width: float = 560, height: float = 260,
               ylim: tuple[float, float] = (0.0, 1.0)) -> str:
    """SVG group with axes, ticks, one polyline per ``(label, xs, ys)`` and a legend."""
    left, right, top, bottom = 55, 130, 30, 40
    pw, ph = width - left - right, height - top - bottom
    xs_all = [x for _, xs, _ in series for x in xs]
    xlo, xhi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    if xhi == xlo:
        xhi = xlo + 1.0
    ylo, yhi = ylim

    def px(x):
        return x0 + left + (x - xlo) / (xhi - xlo) * pw

    def py(y):
        return y0 + top + (1.0 - (y - ylo) / (yhi - ylo)) * ph

    out = [f'<g font-family="sans-serif" font-size="11">',
           f'<text x="{x0 + left + pw / 2:.1f}" y="{y0 + 18:.1f}" text-anchor="middle" font-size="13">'
           f'{escape(title)}</text>',
           f'<line x1="{px(xlo):.1f}" y1="{py(ylo):.1f}" x2="{px(xhi):.1f}" y2="{py(ylo):.1f}" stroke="black"/>',
           f'<line x1="{px(xlo):.1f}" y1="{py(ylo):.1f}" x2="{px(xlo):.1f}" y2="{py(yhi):.1f}" stroke="black"/>']
    for tx in _ticks(xlo, xhi):
        out.append(f'<line x1="{px(tx):.1f}" y1="{py(ylo):.1f}" x2="{px(tx):.1f}" y2="{py(ylo) + 4:.1f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{px(tx):.1f}" y="{py(ylo) + 16:.1f}" text-anchor="middle">{tx:.3g}</text>')
    for ty in _ticks(ylo, yhi):
        out.append(f'<line x1="{px(xlo) - 4:.1f}" y1="{py(ty):.1f}" x2="{px(xlo):.1f}" y2="{py(ty):.1f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{px(xlo) - 7:.1f}" y="{py(ty) + 4:.1f}" text-anchor="end">{ty:.2f}</text>')
    out.append(f'<text x="{px(xlo) + pw / 2:.1f}" y="{y0 + height - 6:.1f}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="{x0 + 14:.1f}" y="{py(ylo) - ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 {x0 + 14:.1f} {py(ylo) - ph / 2:.1f})">{escape(ylabel)}</text>')
    for j, (label, xs, ys) in enumerate(series):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(min(max(y, ylo), yhi)):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = y0 + top + 14 * j
        lx = x0 + left + pw + 10
        out.append(f'<line x1="{lx:.1f}" y1="{ly:.1f}" x2="{lx + 18:.1f}" y2="{ly:.1f}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{lx + 22:.1f}" y="{ly + 4:.1f}">{escape(label)}</text>')
    out.append("</g>")
    return "\n".join(out)


def svg_document(groups: list[str], width: float, height: float, comment: str = "") -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}">'
    note = f"<!-- {escape(comment).replace('--', '- -')} -->\n" if comment else ""
    return note + head + '\n<rect width="100%" height="100%" fill="white"/>\n' + "\n".join(groups) + "\n</svg>\n"
