"""Self-contained SVG line charts; no plotting dependency."""

from __future__ import annotations

from pathlib import Path

_WIDTH, _HEIGHT = 640, 400
_MARGIN = 60
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")


def _scale(values, lo, hi, out_lo, out_hi):
    span = hi - lo
    if span <= 0:
        return [(out_lo + out_hi) / 2 for _ in values]
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in values]


def line_chart(path, xs, series: dict[str, list[float]], title: str, x_label: str) -> None:
    """Write one polyline per series over a shared x axis."""
    xs = [float(x) for x in xs]
    all_y = [v for ys in series.values() for v in ys]
    y_lo, y_hi = min(all_y), max(all_y)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    px = _scale(xs, min(xs), max(xs), _MARGIN, _WIDTH - _MARGIN)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{_MARGIN}" y1="{_HEIGHT - _MARGIN}" x2="{_WIDTH - _MARGIN}" '
        f'y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
        f'<text x="{_WIDTH / 2}" y="{_HEIGHT - 16}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text x="{_MARGIN - 8}" y="{_MARGIN - 8}" text-anchor="end" font-size="10">{y_hi:.3f}</text>',
        f'<text x="{_MARGIN - 8}" y="{_HEIGHT - _MARGIN}" text-anchor="end" font-size="10">{y_lo:.3f}</text>',
    ]
    for i, (name, ys) in enumerate(series.items()):
        py = _scale(ys, y_lo, y_hi, _HEIGHT - _MARGIN, _MARGIN)
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
        color = _COLORS[i % len(_COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{points}"/>')
        parts.append(
            f'<text x="{_WIDTH - _MARGIN + 6}" y="{_MARGIN + 16 * i}" font-size="11" '
            f'fill="{color}">{name}</text>'
        )
    for x, v in zip(px, xs):
        parts.append(
            f'<text x="{x:.2f}" y="{_HEIGHT - _MARGIN + 16}" text-anchor="middle" '
            f'font-size="10">{v:g}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
