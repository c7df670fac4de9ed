"""Static SVG figures written by hand so the bytes depend only on the input."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

log = logging.getLogger(__name__)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 70, "right": 160, "top": 40, "bottom": 55}


def band_stats(values) -> tuple[float, float, float]:
    """(median, 16th percentile, 84th percentile) of one group of realizations."""
    lo, med, hi = np.percentile(np.asarray(values, dtype=float), [16, 50, 84])
    return float(med), float(lo), float(hi)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, log_scale: bool) -> list[float]:
    if log_scale:
        return [10.0 ** k for k in range(math.floor(lo), math.ceil(hi) + 1)]
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / 4))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= 6:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def _tick_label(v: float) -> str:
    return f"{v:g}"


def line_chart_svg(series: list, title: str, xlabel: str, ylabel: str, logx: bool = True) -> str:
    """``series`` items: dicts with name, x, median, lo, hi (equal-length lists)."""
    xs = np.concatenate([np.asarray(s["x"], dtype=float) for s in series])
    ys = np.concatenate([np.asarray(s[k], dtype=float) for s in series for k in ("median", "lo", "hi")])
    tx = np.log10(xs) if logx else xs
    x_lo, x_hi = float(tx.min()), float(tx.max())
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    y_lo, y_hi = 0.0, float(ys.max()) * 1.1 if ys.max() > 0 else 1.0
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        t = math.log10(x) if logx else x
        return MARGIN["left"] + (t - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return MARGIN["top"] + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    x0, y0 = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN["top"]}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for x in _ticks(x_lo, x_hi, logx):
        pos = math.log10(x) if logx else x
        if pos < x_lo - 1e-9 or pos > x_hi + 1e-9:
            continue
        out.append(f'<line x1="{_fmt(px(x))}" y1="{y0}" x2="{_fmt(px(x))}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px(x))}" y="{y0 + 18}" text-anchor="middle">{_tick_label(x)}</text>')
    for t in _ticks(y_lo, y_hi, False):
        out.append(f'<line x1="{x0 - 5}" y1="{_fmt(py(t))}" x2="{x0}" y2="{_fmt(py(t))}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{_fmt(py(t) + 4)}" text-anchor="end">{_tick_label(round(t, 12))}</text>')
    out.append(f'<text x="{x0 + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.2f})">{escape(ylabel)}</text>')
    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = list(zip(s["x"], s["median"], s["lo"], s["hi"]))
        upper = " ".join(f"{_fmt(px(x))},{_fmt(py(h))}" for x, _, _, h in pts)
        lower = " ".join(f"{_fmt(px(x))},{_fmt(py(lo))}" for x, _, lo, _ in reversed(pts))
        out.append(f'<polygon class="band" points="{upper} {lower}" fill="{color}" '
                   f'fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{_fmt(px(x))},{_fmt(py(m))}" for x, m, _, _ in pts)
        out.append(f'<polyline class="median" points="{line}" fill="none" stroke="{color}" '
                   f'stroke-width="2"/>')
        ly = MARGIN["top"] + 16 * k + 8
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly + 4}">{escape(str(s["name"]))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap_svg(matrix, row_labels, col_labels, title: str) -> str:
    """Error-matrix heatmap; NaN or missing cells stay blank."""
    m = np.asarray(matrix, dtype=float)
    k = m.shape[0]
    cell = 40
    left, top = 50, 50
    size = left + cell * k + 20
    finite = m[np.isfinite(m)]
    vmax = float(finite.max()) if finite.size and finite.max() > 0 else 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
           f'<text x="{size / 2:.2f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for i in range(k):
        out.append(f'<text x="{left - 6}" y="{top + cell * i + cell / 2 + 4:.2f}" '
                   f'text-anchor="end">{escape(str(row_labels[i]))}</text>')
        out.append(f'<text x="{left + cell * i + cell / 2:.2f}" y="{top - 6}" '
                   f'text-anchor="middle">{escape(str(col_labels[i]))}</text>')
        for j in range(k):
            v = m[i, j]
            x, y = left + cell * j, top + cell * i
            if not np.isfinite(v):
                out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#eeeeee"/>')
                continue
            shade = int(round(255 * (1 - v / vmax)))
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="rgb(255,{shade},{shade})" stroke="white"/>')
            out.append(f'<text x="{x + cell / 2:.2f}" y="{y + cell / 2 + 4:.2f}" '
                       f'text-anchor="middle">{100 * v:.1f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _as_dict(record) -> dict:
    return record if isinstance(record, dict) else record.to_dict()


def episode_curves(records) -> list:
    """Group run records by (pipeline, shots) and summarize test error per E."""
    groups: dict = {}
    for rec in map(_as_dict, records):
        if rec.get("test_error") is None:
            continue
        cfg = rec["config"]
        name = f"{cfg['pipeline']} shots={cfg['shots']}"
        groups.setdefault(name, {}).setdefault(cfg["E"], []).append(rec["test_error"])
    series = []
    for name in sorted(groups):
        xs = sorted(groups[name])
        stats = [band_stats(groups[name][x]) for x in xs]
        series.append({"name": name, "x": xs, "median": [s[0] for s in stats],
                       "lo": [s[1] for s in stats], "hi": [s[2] for s in stats]})
    return series


def emit_plots(records, out_dir) -> list:
    """Write error-vs-episodes curves and any benchmark heatmaps; returns the paths."""
    records = list(records)
    if not records:
        log.warning("emit_plots: no records given, nothing written")
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    series = episode_curves([r for r in records if _as_dict(r).get("kind") != "benchmark"])
    if series:
        svg = line_chart_svg(series, "Test error vs. episodes", "episodes E", "test error")
        path = out_dir / "error_vs_episodes.svg"
        path.write_text(svg)
        paths.append(path)
    for i, rec in enumerate(r for r in map(_as_dict, records) if r.get("kind") == "benchmark"):
        svg = heatmap_svg(rec["matrix"], rec["row_labels"], rec["col_labels"],
                          "Pairwise test error (%)")
        path = out_dir / f"benchmark_{i:02d}.svg"
        path.write_text(svg)
        paths.append(path)
    return paths
