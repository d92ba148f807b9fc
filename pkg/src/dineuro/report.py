"""Dependency-free SVG charts and CSV tables for run reports."""

from __future__ import annotations

import csv
from xml.sax.saxutils import escape

W, H = 640, 360
PAD = 48


def _fmt(v):
    return f"{v:.2f}"


def line_chart(series: dict, title="loss", xlabel="step", ylabel="loss") -> str:
    """One polyline per named series of y values (x is the sample index)."""
    ys = [y for vals in series.values() for y in vals]
    if not ys:
        raise ValueError("line chart needs at least one value")
    n = max(len(v) for v in series.values())
    lo, hi = min(ys), max(ys)
    span = hi - lo or 1.0

    def px(i):
        return PAD + (W - 2 * PAD) * (i / max(n - 1, 1))

    def py(y):
        return H - PAD - (H - 2 * PAD) * ((y - lo) / span)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">'
           f'{escape(xlabel)}</text>',
           f'<text x="14" y="{H / 2}" font-size="12" transform="rotate(-90 14 {H / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>',
           f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" font-size="10">{lo:.4g}</text>',
           f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-size="10">{hi:.4g}</text>']
    for k, (name, vals) in enumerate(series.items()):
        pts = " ".join(f"{_fmt(px(i))},{_fmt(py(v))}" for i, v in enumerate(vals))
        c = colors[k % len(colors)]
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{W - PAD + 4}" y="{PAD + 14 * k}" font-size="11" fill="{c}">'
                   f'{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(values: dict, title="metrics", ylabel="value") -> str:
    if not values:
        raise ValueError("bar chart needs at least one value")
    hi = max(max(values.values()), 0.0) or 1.0
    n = len(values)
    slot = (W - 2 * PAD) / n
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="14" y="{H / 2}" font-size="12" transform="rotate(-90 14 {H / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>']
    for i, (name, v) in enumerate(values.items()):
        h = (H - 2 * PAD) * max(v, 0.0) / hi
        x = PAD + i * slot + slot * 0.15
        out.append(f'<rect x="{_fmt(x)}" y="{_fmt(H - PAD - h)}" width="{_fmt(slot * 0.7)}" '
                   f'height="{_fmt(h)}" fill="#4c72b0"/>')
        out.append(f'<text x="{_fmt(x + slot * 0.35)}" y="{_fmt(H - PAD - h - 4)}" '
                   f'text-anchor="middle" font-size="10">{v:.4g}</text>')
        out.append(f'<text x="{_fmt(x + slot * 0.35)}" y="{H - PAD + 14}" text-anchor="middle" '
                   f'font-size="11">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["loss"]) for r in rows]


def read_metric_csv(path):
    """Mean row of a metrics table as {column: value}."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    mean = [r for r in rows if r.get("volume_id") == "mean"]
    if not mean:
        raise ValueError(f"{path}: no 'mean' row")
    return {k: float(v) for k, v in mean[0].items() if k != "volume_id"}


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
