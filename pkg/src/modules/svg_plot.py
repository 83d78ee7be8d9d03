"""
Standalone SVG line and scatter plots, written as plain text so identical input gives identical bytes.
"""
from pathlib import Path
from typing import List, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from ..errors import DomainError

WIDTH = 640
HEIGHT = 400
MARGIN_LEFT = 70
MARGIN_RIGHT = 150
MARGIN_TOP = 30
MARGIN_BOTTOM = 50
TICKS = 5
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

Curve = Sequence[Tuple[float, float]]


def _fmt(value: float) -> str:
    text = f"{value:.2f}"
    return "0.00" if text == "-0.00" else text


def _tick_label(value: float) -> str:
    return f"{value:.4g}"


def _check_curves(curves: Sequence[Curve], min_points: int) -> List[np.ndarray]:
    if not curves:
        raise DomainError("nothing to plot: no curves given")
    arrays = []
    for index, curve in enumerate(curves):
        points = np.asarray(curve, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise DomainError(f"curve {index} must be a list of (x, y) pairs")
        if len(points) < min_points:
            raise DomainError(f"curve {index} has {len(points)} point(s), need at least {min_points}")
        if not np.all(np.isfinite(points)):
            raise DomainError(f"curve {index} contains NaN or infinite values")
        arrays.append(points)
    return arrays


def _bounds(values: np.ndarray) -> Tuple[float, float]:
    low, high = float(values.min()), float(values.max())
    if low == high:
        pad = abs(low) * 0.05 or 1.0
        return low - pad, high + pad
    return low, high


class _Frame:
    def __init__(self, arrays: List[np.ndarray]):
        stacked = np.concatenate(arrays)
        self.x_low, self.x_high = _bounds(stacked[:, 0])
        self.y_low, self.y_high = _bounds(stacked[:, 1])
        self.plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
        self.plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(self, x: float) -> float:
        return MARGIN_LEFT + (x - self.x_low) / (self.x_high - self.x_low) * self.plot_w

    def py(self, y: float) -> float:
        return MARGIN_TOP + (self.y_high - y) / (self.y_high - self.y_low) * self.plot_h

    def axes(self, title: str, x_label: str, y_label: str) -> List[str]:
        bottom = MARGIN_TOP + self.plot_h
        right = MARGIN_LEFT + self.plot_w
        parts = [
            f'<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{self.plot_w}" height="{self.plot_h}" fill="none" stroke="#000000"/>',
        ]
        for i in range(TICKS + 1):
            xv = self.x_low + (self.x_high - self.x_low) * i / TICKS
            yv = self.y_low + (self.y_high - self.y_low) * i / TICKS
            x, y = self.px(xv), self.py(yv)
            parts.append(f'<line x1="{_fmt(x)}" y1="{bottom}" x2="{_fmt(x)}" y2="{bottom + 5}" stroke="#000000"/>')
            parts.append(f'<text x="{_fmt(x)}" y="{bottom + 18}" text-anchor="middle">{escape(_tick_label(xv))}</text>')
            parts.append(f'<line x1="{MARGIN_LEFT - 5}" y1="{_fmt(y)}" x2="{MARGIN_LEFT}" y2="{_fmt(y)}" stroke="#000000"/>')
            parts.append(f'<text x="{MARGIN_LEFT - 8}" y="{_fmt(y + 4)}" text-anchor="end">{escape(_tick_label(yv))}</text>')
        parts.append(f'<text x="{_fmt((MARGIN_LEFT + right) / 2)}" y="{HEIGHT - 10}" text-anchor="middle">{escape(x_label)}</text>')
        parts.append(
            f'<text x="15" y="{_fmt(MARGIN_TOP + self.plot_h / 2)}" text-anchor="middle" '
            f'transform="rotate(-90 15 {_fmt(MARGIN_TOP + self.plot_h / 2)})">{escape(y_label)}</text>'
        )
        if title:
            parts.append(f'<text x="{_fmt((MARGIN_LEFT + right) / 2)}" y="{MARGIN_TOP - 10}" text-anchor="middle">{escape(title)}</text>')
        return parts


def _legend(labels: Sequence[str]) -> List[str]:
    parts = []
    x = WIDTH - MARGIN_RIGHT + 15
    for index, label in enumerate(labels):
        y = MARGIN_TOP + 15 + 18 * index
        color = PALETTE[index % len(PALETTE)]
        parts.append(f'<rect x="{x}" y="{y - 8}" width="12" height="8" fill="{color}"/>')
        parts.append(f'<text x="{x + 18}" y="{y}">{escape(str(label))}</text>')
    return parts


def _write(path: str | Path, body: List[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        *body,
        "</svg>",
    ]
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return path


def emit_line_plot(curves: Sequence[Curve], labels: Sequence[str], path: str | Path,
                   title: str = "", x_label: str = "", y_label: str = "") -> Path:
    """One polyline per curve, with axes, ticks and a legend."""
    arrays = _check_curves(curves, min_points=2)
    if len(labels) != len(arrays):
        raise DomainError(f"{len(labels)} labels for {len(arrays)} curves")
    frame = _Frame(arrays)
    body = frame.axes(title, x_label, y_label)
    for index, points in enumerate(arrays):
        coords = " ".join(f"{_fmt(frame.px(x))},{_fmt(frame.py(y))}" for x, y in points)
        color = PALETTE[index % len(PALETTE)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
    body.extend(_legend(labels))
    return _write(path, body)


def emit_scatter_plot(points: Sequence[Tuple[float, float]], groups: Sequence[int] | None, path: str | Path,
                      title: str = "", x_label: str = "", y_label: str = "", group_labels: Sequence[str] = ()) -> Path:
    """Points coloured by integer group (all one colour when groups is None)."""
    array = _check_curves([points], min_points=1)[0]
    groups = np.zeros(len(array), dtype=int) if groups is None else np.asarray(groups, dtype=int)
    if groups.shape != (len(array),):
        raise DomainError(f"{len(groups)} group ids for {len(array)} points")
    frame = _Frame([array])
    body = frame.axes(title, x_label, y_label)
    for (x, y), group in zip(array, groups):
        color = PALETTE[int(group) % len(PALETTE)]
        body.append(f'<circle cx="{_fmt(frame.px(x))}" cy="{_fmt(frame.py(y))}" r="2.5" fill="{color}"/>')
    if group_labels:
        body.extend(_legend(group_labels))
    return _write(path, body)


def loss_curve(step_losses: Sequence[float]) -> List[Tuple[float, float]]:
    return [(float(step), float(loss)) for step, loss in enumerate(step_losses)]
