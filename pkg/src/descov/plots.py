"""Dependency-free SVG charts.

All numbers are formatted with a fixed precision so identical inputs always
produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigurationError

_FMT = "{:.4f}"

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _f(x: float) -> str:
    return _FMT.format(float(x))


def svg_line_chart(
    series: dict[str, tuple[np.ndarray, np.ndarray]],
    title: str,
    x_label: str,
    y_label: str,
    width: int = 640,
    height: int = 400,
) -> str:
    """Multi-series line chart; each series maps a name to (x, y) arrays."""
    if not series:
        raise ConfigurationError("need at least one series")
    margin_l, margin_r, margin_t, margin_b = 60, 20, 40, 50
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b

    all_x = np.concatenate([np.asarray(x, dtype=np.float64) for x, _ in series.values()])
    all_y = np.concatenate([np.asarray(y, dtype=np.float64) for _, y in series.values()])
    if all_x.size == 0:
        raise ConfigurationError("series are empty")
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0
    if y_hi - y_lo < 1e-12:
        y_hi = y_lo + 1.0

    def sx(v: float) -> float:
        return margin_l + (v - x_lo) / (x_hi - x_lo) * plot_w

    def sy(v: float) -> float:
        return margin_t + plot_h - (v - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
    ]
    # Axes.
    parts.append(
        f'<line x1="{margin_l}" y1="{margin_t}" x2="{margin_l}" '
        f'y2="{margin_t + plot_h}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{margin_l}" y1="{margin_t + plot_h}" x2="{margin_l + plot_w}" '
        f'y2="{margin_t + plot_h}" stroke="black"/>'
    )
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        px = sx(xv)
        py = sy(yv)
        parts.append(
            f'<text x="{_f(px)}" y="{margin_t + plot_h + 18}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{_f(xv)}</text>'
        )
        parts.append(
            f'<text x="{margin_l - 6}" y="{_f(py + 4)}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{_f(yv)}</text>'
        )
    parts.append(
        f'<text x="{margin_l + plot_w // 2}" y="{height - 10}" text-anchor="middle" '
        f'font-size="13" font-family="sans-serif">{x_label}</text>'
    )
    parts.append(
        f'<text x="16" y="{margin_t + plot_h // 2}" text-anchor="middle" '
        f'font-size="13" font-family="sans-serif" '
        f'transform="rotate(-90 16 {margin_t + plot_h // 2})">{y_label}</text>'
    )
    for idx, (name, (xs, ys)) in enumerate(series.items()):
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if xs.shape != ys.shape:
            raise ConfigurationError(f"series {name!r}: x/y length mismatch")
        color = _PALETTE[idx % len(_PALETTE)]
        pts = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = margin_t + 14 * (idx + 1)
        parts.append(
            f'<line x1="{margin_l + plot_w - 110}" y1="{ly - 4}" '
            f'x2="{margin_l + plot_w - 90}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{margin_l + plot_w - 85}" y="{ly}" font-size="11" '
            f'font-family="sans-serif">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_heatmap(
    matrix: np.ndarray,
    row_labels: list[str],
    col_labels: list[str],
    title: str,
    cell: int = 28,
) -> str:
    """Heatmap with a white-to-blue scale and per-cell value text."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigurationError("heatmap needs a 2-d matrix")
    rows, cols = m.shape
    if len(row_labels) != rows or len(col_labels) != cols:
        raise ConfigurationError("label lengths must match the matrix")
    lo, hi = float(m.min()), float(m.max())
    span = hi - lo if hi - lo > 1e-12 else 1.0
    margin_l, margin_t = 60, 60
    width = margin_l + cols * cell + 20
    height = margin_t + rows * cell + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="22" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title}</text>',
    ]
    for j, lab in enumerate(col_labels):
        parts.append(
            f'<text x="{margin_l + j * cell + cell // 2}" y="{margin_t - 8}" '
            f'text-anchor="middle" font-size="10" font-family="sans-serif">{lab}</text>'
        )
    for i, lab in enumerate(row_labels):
        parts.append(
            f'<text x="{margin_l - 6}" y="{margin_t + i * cell + cell // 2 + 4}" '
            f'text-anchor="end" font-size="10" font-family="sans-serif">{lab}</text>'
        )
    for i in range(rows):
        for j in range(cols):
            v = (m[i, j] - lo) / span
            # White (low) to saturated blue (high).
            r = int(round(255 - 204 * v))
            g = int(round(255 - 136 * v))
            parts.append(
                f'<rect x="{margin_l + j * cell}" y="{margin_t + i * cell}" '
                f'width="{cell}" height="{cell}" fill="rgb({r},{g},255)" '
                f'stroke="#cccccc"/>'
            )
            parts.append(
                f'<text x="{margin_l + j * cell + cell // 2}" '
                f'y="{margin_t + i * cell + cell // 2 + 3}" text-anchor="middle" '
                f'font-size="8" font-family="sans-serif">{m[i, j]:.2f}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_bar_profile(
    values: np.ndarray, title: str, y_label: str, width: int = 640, height: int = 360
) -> str:
    """Descending bar profile (e.g. ranked coverage tail)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ConfigurationError("need a non-empty 1-d array")
    margin_l, margin_r, margin_t, margin_b = 60, 20, 40, 30
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    hi = float(v.max()) if float(v.max()) > 0 else 1.0
    bw = plot_w / v.size
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="24" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title}</text>',
        f'<text x="16" y="{margin_t + plot_h // 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {margin_t + plot_h // 2})">'
        f"{y_label}</text>",
    ]
    for i, val in enumerate(v):
        h = plot_h * float(val) / hi
        parts.append(
            f'<rect x="{_f(margin_l + i * bw)}" y="{_f(margin_t + plot_h - h)}" '
            f'width="{_f(max(bw - 1.0, 0.5))}" height="{_f(h)}" fill="#1f77b4"/>'
        )
    parts.append(
        f'<line x1="{margin_l}" y1="{margin_t + plot_h}" x2="{margin_l + plot_w}" '
        f'y2="{margin_t + plot_h}" stroke="black"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(svg: str, path: str | Path) -> None:
    Path(path).write_text(svg, encoding="utf-8")
