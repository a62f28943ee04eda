"""SVG rendering of predicted scenes.

Detections are drawn as small circles colored by their prediction status for
the moving classes (blue true positive, white true negative, yellow false
negative, red false positive) with ground-truth boxes overlaid in green
(dynamic) or white (static).  Unlabeled scenes fall back to coloring by the
predicted class.
"""

from __future__ import annotations

import math

import numpy as np

from .cloud import Label, PointCloud, UNLABELED
from .scenes import BoundingBox

COLOR_TP = "#3f7fdc"
COLOR_TN = "#f2f2f2"
COLOR_FN = "#f2d33c"
COLOR_FP = "#e05252"
COLOR_BG = "#17181c"
CLASS_COLORS = {Label.STATIC: COLOR_TN, Label.VEHICLE: COLOR_TP,
                Label.PEDESTRIAN: "#ef8f3a"}


def point_status_colors(true_labels, pred_labels) -> list[str]:
    """Per-point color by TP/TN/FN/FP status against the moving classes."""
    colors = []
    for t, p in zip(true_labels, pred_labels):
        if t == p:
            colors.append(COLOR_TN if t == int(Label.STATIC) else COLOR_TP)
        elif t != int(Label.STATIC):
            colors.append(COLOR_FN)  # a moving detection was missed or confused
        else:
            colors.append(COLOR_FP)
    return colors


def _box_corners(box: BoundingBox) -> np.ndarray:
    half_l, half_w = 0.5 * box.extent[0], 0.5 * box.extent[1]
    c, s = math.cos(box.heading), math.sin(box.heading)
    local = np.array([[half_l, half_w], [half_l, -half_w],
                      [-half_l, -half_w], [-half_l, half_w]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.center)


def render_scene_svg(cloud: PointCloud, pred_labels, boxes=(),
                     width: int = 800) -> str:
    """Well-formed standalone SVG 1.1 document for one predicted scene."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    xs, ys = cloud.x, cloud.y
    all_x = [xs]
    all_y = [ys]
    for box in boxes:
        corners = _box_corners(box)
        all_x.append(corners[:, 0])
        all_y.append(corners[:, 1])
    min_x, max_x = float(np.min(np.concatenate(all_x))), float(np.max(np.concatenate(all_x)))
    min_y, max_y = float(np.min(np.concatenate(all_y))), float(np.max(np.concatenate(all_y)))
    span_x = max(max_x - min_x, 1e-6)
    span_y = max(max_y - min_y, 1e-6)
    pad = 0.04 * max(span_x, span_y)
    scale = (width - 2) / (span_x + 2 * pad)
    height = int(math.ceil((span_y + 2 * pad) * scale)) + 2

    def sx(x: float) -> float:
        return (x - min_x + pad) * scale + 1

    def sy(y: float) -> float:
        return height - ((y - min_y + pad) * scale + 1)

    if cloud.labels is not None and (cloud.labels != UNLABELED).any():
        colors = point_status_colors(cloud.labels, pred)
    else:
        colors = [CLASS_COLORS[Label(int(p))] for p in pred]

    radius = max(1.5, 0.2 * scale)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="{COLOR_BG}"/>',
    ]
    for box in boxes:
        corners = _box_corners(box)
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in corners)
        stroke = "#3fbf4f" if box.dynamic else "#f2f2f2"
        parts.append(f'<polygon points="{pts}" fill="none" stroke="{stroke}" '
                     f'stroke-width="1.5"/>')
    for i in range(cloud.n):
        parts.append(f'<circle cx="{sx(float(xs[i])):.2f}" cy="{sy(float(ys[i])):.2f}" '
                     f'r="{radius:.2f}" fill="{colors[i]}" fill-opacity="0.9"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def prediction_csv(cloud: PointCloud, scores: np.ndarray, pred_labels) -> str:
    """Per-point CSV: index, channel scores, predicted and true label."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    lines = ["index,score_vehicle,score_pedestrian,predicted,true"]
    labels = cloud.labels if cloud.labels is not None else np.full(cloud.n, UNLABELED)
    for i in range(cloud.n):
        lines.append(f"{i},{scores[i, 0]:.6f},{scores[i, 1]:.6f},"
                     f"{int(pred[i])},{int(labels[i])}")
    return "\n".join(lines) + "\n"
