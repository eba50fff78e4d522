"""Static SVG figures: latency-vs-mIoU trajectories and branch diagrams."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

from .genotype import Genotype

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
OP_COLORS = {
    "conv3x3": "#9ecae1",
    "conv3x3_x2": "#3182bd",
    "zoomed_conv": "#fdae6b",
    "zoomed_conv_x2": "#e6550d",
    "skip": "#d9d9d9",
}


def read_trajectory(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def epoch_series(rows: list[dict]) -> dict[str, list[tuple[float, float]]]:
    """(latency_ms, val_mIoU) per evaluation phase, in logged order."""
    out: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        if r["phase"].startswith("epoch") and r["latency_ms"] and r["val_mIoU"]:
            out.setdefault(r["phase"], []).append((float(r["latency_ms"]), float(r["val_mIoU"])))
    return out


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def trajectory_svg(series: dict[str, list[tuple[float, float]]], title: str = "") -> str:
    """One polyline per series in the (latency, mIoU) plane; the first point is hollow."""
    w, h, m = 520, 380, 60
    pts = [p for s in series.values() for p in s] or [(0.0, 0.0), (1.0, 1.0)]
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1, y1 = (x1 if x1 > x0 else x0 + 1.0), (y1 if y1 > y0 else y0 + 0.01)

    def sx(x):
        return m + (x - x0) / (x1 - x0) * (w - 2 * m)

    def sy(y):
        return h - m - (y - y0) / (y1 - y0) * (h - 2 * m)

    body = [
        f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
        f'<text x="{w / 2}" y="{h - 15}" text-anchor="middle">latency (ms)</text>',
        f'<text x="15" y="{h / 2}" text-anchor="middle" transform="rotate(-90 15 {h / 2})">val mIoU</text>',
    ]
    for t in _ticks(x0, x1):
        body.append(f'<text x="{sx(t):.1f}" y="{h - m + 15}" text-anchor="middle">{t:.2f}</text>')
    for t in _ticks(y0, y1):
        body.append(f'<text x="{m - 5}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3f}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if s:
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
            body.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            for j, (x, y) in enumerate(s):
                fill = "white" if j == 0 else color
                body.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{fill}" stroke="{color}"/>')
        body.append(f'<text x="{w - m + 5}" y="{m + 14 * i}" fill="{color}">{escape(name)}</text>')
    return _svg(w + 60, h, body)


def architecture_svg(genotypes: dict[str, Genotype], base_rate: int = 8) -> str:
    """Cells as boxes placed by (cell index, rate); shared-prefix cells are outlined in bold."""
    cell_w, cell_h, gap = 70, 26, 8
    rates = sorted({base_rate} | {c.s for g in genotypes.values() for b in g.branches for c in b.cells})
    row_of = {r: i for i, r in enumerate(rates)}
    longest = max((len(b.cells) for g in genotypes.values() for b in g.branches), default=1)
    panel_h = (len(rates) + 1) * (cell_h + gap) * 2 + 30
    w = 90 + longest * (cell_w + gap)
    body: list[str] = []
    y_off = 10
    for name, g in genotypes.items():
        body.append(f'<text x="10" y="{y_off + 14}" font-size="13">{escape(name)}: head rates '
                    f'{"/".join(map(str, g.head_rates))}</text>')
        for bi, branch in enumerate(g.branches):
            top = y_off + 25 + bi * (len(rates) * (cell_h + gap) + 10)
            for r in rates:
                y = top + row_of[r] * (cell_h + gap)
                body.append(f'<text x="10" y="{y + 17}">1/{r}</text>')
            for i, c in enumerate(branch.cells):
                x = 60 + i * (cell_w + gap)
                y = top + row_of[c.s] * (cell_h + gap)
                shared = i < g.shared_prefix_len
                body.append(
                    f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" '
                    f'fill="{OP_COLORS.get(c.op, "#cccccc")}" stroke="black" '
                    f'stroke-width="{2.5 if shared else 0.8}"/>'
                )
                label = f"{c.op.replace('_conv', 'z').replace('conv3x3', 'c3')} x{c.chi}"
                body.append(f'<text x="{x + cell_w / 2}" y="{y + 17}" text-anchor="middle">{escape(label)}</text>')
        y_off += panel_h
    return _svg(w, y_off, body)


def write_text(path: Path, text: str) -> Path:
    path.write_text(text)
    return path
