"""Training-curve rendering as standalone SVG.

No plotting dependency: the curves are written as SVG paths directly.
Output is deterministic byte-for-byte for a given metrics table (fixed
canvas, fixed palette, coordinates formatted to two decimals), which
makes rendered plots comparable with file hashes.
"""
from __future__ import annotations

from .errors import DataError

WIDTH = 800
HEIGHT = 600
MARGIN_LEFT = 60.0
MARGIN_RIGHT = 30.0

# (panel title, y range, series: (csv column, label, stroke))
PANELS = [
    ("losses", (40.0, 270.0), [
        ("loss_total", "total", "#1f77b4"),
        ("loss_F", "F (enhanced)", "#d62728"),
        ("loss_G", "G (anchor)", "#2ca02c"),
    ]),
    ("codebook utilization", (340.0, 570.0), [
        ("codebook_util_anchor", "anchor", "#9467bd"),
        ("codebook_util_enh", "enhanced", "#ff7f0e"),
    ]),
]


def _scale(values, lo_px: float, hi_px: float):
    vmin = min(values)
    vmax = max(values)
    if vmax - vmin < 1e-12:
        vmin -= 0.5
        vmax += 0.5
    span = vmax - vmin

    def to_px(v: float) -> float:
        return lo_px + (v - vmin) / span * (hi_px - lo_px)

    return to_px, vmin, vmax


def _path(xs, ys, stroke: str) -> str:
    parts = [f"{'M' if i == 0 else 'L'} {x:.2f} {y:.2f}"
             for i, (x, y) in enumerate(zip(xs, ys))]
    return (f'<path d="{" ".join(parts)}" fill="none" stroke="{stroke}" '
            f'stroke-width="1.5"/>')


def render_metrics_svg(rows: list) -> str:
    """Rows are dicts as produced by the metrics reader."""
    if not rows:
        raise DataError("no metrics rows to plot")
    steps = [float(r["step"]) for r in rows]
    for _, _, series in PANELS:
        for column, _, _ in series:
            for r in rows:
                if column not in r:
                    raise DataError(f"metrics rows are missing column {column}")

    x_of, _, _ = _scale(steps, MARGIN_LEFT, WIDTH - MARGIN_RIGHT)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} '
           f'{HEIGHT}" width="{WIDTH}" height="{HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    for title, (top, bottom), series in PANELS:
        all_vals = [float(r[c]) for c, _, _ in series for r in rows]
        y_of, vmin, vmax = _scale(all_vals, bottom, top)
        out.append(f'<text x="{MARGIN_LEFT:.2f}" y="{top - 14:.2f}" '
                   f'font-family="sans-serif" font-size="14">{title}</text>')
        out.append(f'<line x1="{MARGIN_LEFT:.2f}" y1="{bottom:.2f}" '
                   f'x2="{WIDTH - MARGIN_RIGHT:.2f}" y2="{bottom:.2f}" '
                   f'stroke="#333" stroke-width="1"/>')
        out.append(f'<line x1="{MARGIN_LEFT:.2f}" y1="{top:.2f}" '
                   f'x2="{MARGIN_LEFT:.2f}" y2="{bottom:.2f}" '
                   f'stroke="#333" stroke-width="1"/>')
        out.append(f'<text x="{MARGIN_LEFT - 6:.2f}" y="{bottom:.2f}" '
                   f'font-family="sans-serif" font-size="10" '
                   f'text-anchor="end">{vmin:.4g}</text>')
        out.append(f'<text x="{MARGIN_LEFT - 6:.2f}" y="{top + 4:.2f}" '
                   f'font-family="sans-serif" font-size="10" '
                   f'text-anchor="end">{vmax:.4g}</text>')
        legend_x = WIDTH - MARGIN_RIGHT - 170.0
        for i, (column, label, stroke) in enumerate(series):
            ys = [y_of(float(r[column])) for r in rows]
            out.append(_path([x_of(s) for s in steps], ys, stroke))
            out.append(f'<text x="{legend_x:.2f}" y="{top + 14 + 14 * i:.2f}" '
                       f'font-family="sans-serif" font-size="11" '
                       f'fill="{stroke}">{label}</text>')
        out.append(f'<text x="{(WIDTH - MARGIN_RIGHT):.2f}" '
                   f'y="{bottom + 16:.2f}" font-family="sans-serif" '
                   f'font-size="10" text-anchor="end">step</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save_plot(rows: list, path) -> None:
    svg = render_metrics_svg(rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
