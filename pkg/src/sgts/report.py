"""Self-contained SVG training-curve figure.

One polyline per series (loss_total, val_mdice, alpha, tau) versus epoch,
with axis labels and a legend. Each polyline carries a <title> element that
embeds the series name and its numeric values, so figures can be verified by
text inspection without a renderer.
"""

from __future__ import annotations

import math

WIDTH, HEIGHT = 640, 400
MARGIN = 56

SERIES = [
    ("loss_total", "#c0392b"),
    ("val_mdice", "#27ae60"),
    ("alpha", "#2980b9"),
    ("tau", "#8e44ad"),
]


def _finite(values):
    return [v for v in values if math.isfinite(v)]


def render_curves(rows: list) -> str:
    """rows: list of metrics dicts (see trainer.run_training)."""
    if not rows:
        raise ValueError("no metric rows to plot")
    epochs = [row["epoch"] for row in rows]
    x0, x1 = min(epochs), max(epochs)
    xspan = max(x1 - x0, 1)

    all_vals = []
    for name, _ in SERIES:
        all_vals += _finite([float(row[name]) for row in rows])
    y0, y1 = min(all_vals + [0.0]), max(all_vals + [1.0])
    yspan = max(y1 - y0, 1e-12)

    def sx(e):
        return MARGIN + (e - x0) / xspan * (WIDTH - 2 * MARGIN)

    def sy(v):
        return HEIGHT - MARGIN - (v - y0) / yspan * (HEIGHT - 2 * MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH // 2}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-size="13">epoch</text>',
        f'<text x="16" y="{HEIGHT // 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {HEIGHT // 2})">value</text>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 16}" font-size="11" '
        f'text-anchor="middle">{x0}</text>',
        f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 16}" '
        f'font-size="11" text-anchor="middle">{x1}</text>',
        f'<text x="{MARGIN - 6}" y="{HEIGHT - MARGIN + 4}" font-size="11" '
        f'text-anchor="end">{y0:.3g}</text>',
        f'<text x="{MARGIN - 6}" y="{MARGIN + 4}" font-size="11" '
        f'text-anchor="end">{y1:.3g}</text>',
    ]

    for idx, (name, color) in enumerate(SERIES):
        pts = []
        vals = []
        for row in rows:
            v = float(row[name])
            vals.append(v)
            # non-finite values (tau is +inf during warm-up) clamp to the top
            pv = v if math.isfinite(v) else y1
            pts.append(f"{sx(row['epoch']):.2f},{sy(pv):.2f}")
        values_text = ",".join("inf" if not math.isfinite(v) else repr(v)
                               for v in vals)
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{" ".join(pts)}">'
            f'<title>{name}: {values_text}</title></polyline>')
        ly = MARGIN + 16 * idx
        parts.append(f'<line x1="{WIDTH - MARGIN - 110}" y1="{ly}" '
                     f'x2="{WIDTH - MARGIN - 86}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{WIDTH - MARGIN - 80}" y="{ly + 4}" '
                     f'font-size="12">{name}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"
