"""Minimal self-contained SVG plots. Each plot is written next to a CSV twin
holding exactly the plotted data, so tests can check numbers instead of pixels."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _num(x: float) -> str:
    return format(float(x), ".6g")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _scale(lo: float, hi: float, a: float, b: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def line_plot(path: str | Path, x: Sequence[float], series: dict[str, Sequence[float]], title: str = "",
              xlabel: str = "", ylabel: str = "", shade: tuple[float, float] | None = None,
              hline: float | None = None) -> tuple[Path, Path]:
    """Line plot of one or more series over a shared x; returns (svg, csv) paths.

    ``shade`` highlights an x interval (e.g. a truth window); ``hline`` draws a
    dashed horizontal reference (e.g. the F = 1 threshold). Non-finite values
    are clipped to the finite range for drawing but kept verbatim in the CSV.
    """
    path = Path(path)
    x = np.asarray(x, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    for k, v in ys.items():
        if v.shape != x.shape:
            raise ValueError(f"series {k!r} has {v.size} points, x has {x.size}")

    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()] + [np.zeros(0)])
    if hline is not None:
        finite = np.append(finite, hline)
    ylo, yhi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    xlo, xhi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    sx = _scale(xlo, xhi, MARGIN, WIDTH - MARGIN / 2)
    sy = _scale(ylo, yhi, HEIGHT - MARGIN, MARGIN / 2)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if shade is not None:
        a, b = sx(shade[0]), sx(shade[1])
        out.append(f'<rect x="{_num(a)}" y="{MARGIN / 2}" width="{_num(max(b - a, 0))}" '
                   f'height="{HEIGHT - 1.5 * MARGIN}" fill="#cccccc" fill-opacity="0.5"/>')
    out.append(f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN / 2}" y2="{HEIGHT - MARGIN}" '
               'stroke="black"/>')
    out.append(f'<line x1="{MARGIN}" y1="{MARGIN / 2}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>')
    if hline is not None:
        yh = sy(hline)
        out.append(f'<line x1="{MARGIN}" y1="{_num(yh)}" x2="{WIDTH - MARGIN / 2}" y2="{_num(yh)}" '
                   'stroke="gray" stroke-dasharray="4 3"/>')
    for i, (name, v) in enumerate(ys.items()):
        vv = np.clip(np.where(np.isnan(v), ylo, v), ylo, yhi)
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(sx(x), sy(vv)))
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        out.append(f'<text x="{WIDTH - MARGIN / 2 - 4}" y="{MARGIN / 2 + 14 * (i + 1)}" text-anchor="end" '
                   f'font-size="11" fill="{color}">{escape(name)}</text>')
    for val, anchor in ((xlo, "start"), (xhi, "end")):
        out.append(f'<text x="{_num(sx(val))}" y="{HEIGHT - MARGIN + 16}" text-anchor="{anchor}" '
                   f'font-size="11">{_num(val)}</text>')
    for val in (ylo, yhi):
        out.append(f'<text x="{MARGIN - 4}" y="{_num(sy(val))}" text-anchor="end" font-size="11">{_num(val)}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="{MARGIN / 2 - 8}" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 16}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {HEIGHT / 2})">{escape(ylabel)}</text>')
    out.append("</svg>")
    svg = path.with_suffix(".svg")
    _write(svg, "\n".join(out) + "\n")

    csv = path.with_suffix(".csv")
    lines = [",".join(["x", *ys])]
    for i in range(x.size):
        lines.append(",".join([format(x[i], ".17g"), *(format(v[i], ".17g") for v in ys.values())]))
    _write(csv, "\n".join(lines) + "\n")
    return svg, csv


def heatmap(path: str | Path, matrix, labels: Sequence[str] | None = None, title: str = "",
            normalize_rows: bool = True) -> tuple[Path, Path]:
    """Confusion-matrix style heatmap (rows = truth); CSV twin holds raw counts."""
    path = Path(path)
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("heatmap expects a square matrix")
    n = m.shape[0]
    labels = list(labels) if labels is not None else [str(i) for i in range(n)]
    shown = m
    if normalize_rows:
        rs = m.sum(axis=1, keepdims=True)
        shown = np.divide(m, rs, out=np.zeros_like(m), where=rs > 0)
    peak = shown.max() if shown.size and shown.max() > 0 else 1.0
    size = 18 if n > 10 else 36
    left = 160
    top = 40
    w = left + n * size + 20
    h = top + n * size + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for i in range(n):
        out.append(f'<text x="{left - 4}" y="{top + i * size + size * 0.7}" text-anchor="end" '
                   f'font-size="10">{escape(labels[i])}</text>')
        for j in range(n):
            shade = 255 - int(round(215 * shown[i, j] / peak))
            out.append(f'<rect x="{left + j * size}" y="{top + i * size}" width="{size}" height="{size}" '
                       f'fill="rgb({shade},{shade},255)" stroke="#eeeeee"/>')
    for j in range(n):
        out.append(f'<text x="{left + j * size + size / 2}" y="{top + n * size + 14}" text-anchor="middle" '
                   f'font-size="9">{j}</text>')
    out.append("</svg>")
    svg = path.with_suffix(".svg")
    _write(svg, "\n".join(out) + "\n")
    csv = path.with_suffix(".csv")
    lines = ["truth\\pred," + ",".join(labels)]
    for i in range(n):
        lines.append(labels[i] + "," + ",".join(format(v, ".17g") for v in m[i]))
    _write(csv, "\n".join(lines) + "\n")
    return svg, csv


def read_csv_twin(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Header and numeric body of a line-plot CSV twin."""
    p = Path(path).with_suffix(".csv")
    header = p.open().readline().strip().split(",")
    return header, np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
