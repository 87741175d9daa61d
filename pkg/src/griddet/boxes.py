"""Axis-aligned bounding-box algebra: IoU, GIoU, the GIoU loss and its
analytic gradient, and greedy non-maximum suppression.

Boxes are stored center-form (cx, cy, w, h) with a confidence score; one
coordinate frame (normalized or pixels) per call site. Everything here is a
pure function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class BBox:
    """Center-form box plus detection confidence and class id."""

    cx: float
    cy: float
    w: float
    h: float
    confidence: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise UsageError(f"box extents must be non-negative, got w={self.w} h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) with x1 <= x2, y1 <= y2."""
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def iou_giou_grad(e: np.ndarray, f: np.ndarray):
    """Vectorized IoU/GIoU of row-paired center-form boxes, with gradients.

    e, f: (N, 4) arrays of (cx, cy, w, h). Returns (iou, giou, diou_de,
    dgiou_de) where the gradient arrays are (N, 4) in the same coordinate
    order. At configuration boundaries (edges exactly touching) the
    one-sided derivative from the overlapping regime is used. Degenerate
    pairs with zero union get iou 0, giou -1 (or 0 when the enclosing box
    is also empty) and zero gradients.
    """
    e = np.asarray(e, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    ex1, ex2 = e[:, 0] - e[:, 2] / 2, e[:, 0] + e[:, 2] / 2
    ey1, ey2 = e[:, 1] - e[:, 3] / 2, e[:, 1] + e[:, 3] / 2
    fx1, fx2 = f[:, 0] - f[:, 2] / 2, f[:, 0] + f[:, 2] / 2
    fy1, fy2 = f[:, 1] - f[:, 3] / 2, f[:, 1] + f[:, 3] / 2

    iw = np.minimum(ex2, fx2) - np.maximum(ex1, fx1)
    ih = np.minimum(ey2, fy2) - np.maximum(ey1, fy1)
    overlap = (iw > 0) & (ih > 0)
    iw_c = np.where(overlap, iw, 0.0)
    ih_c = np.where(overlap, ih, 0.0)
    inter = iw_c * ih_c

    ae = (ex2 - ex1) * (ey2 - ey1)
    af = (fx2 - fx1) * (fy2 - fy1)
    union = ae + af - inter

    cw = np.maximum(ex2, fx2) - np.minimum(ex1, fx1)
    ch = np.maximum(ey2, fy2) - np.minimum(ey1, fy1)
    ac = cw * ch

    live = union > 0
    u_safe = np.where(live, union, 1.0)
    iou = np.where(live, inter / u_safe, 0.0)
    ac_pos = ac > 0
    ac_safe = np.where(ac_pos, ac, 1.0)
    giou = np.where(live, iou - (ac - union) / ac_safe, np.where(ac_pos, -1.0, 0.0))

    # corner-space partials; indicator conventions pick the e-side at ties
    di_dex1 = np.where(overlap & (ex1 >= fx1), -ih_c, 0.0)
    di_dex2 = np.where(overlap & (ex2 <= fx2), ih_c, 0.0)
    di_dey1 = np.where(overlap & (ey1 >= fy1), -iw_c, 0.0)
    di_dey2 = np.where(overlap & (ey2 <= fy2), iw_c, 0.0)

    eh = ey2 - ey1
    ew = ex2 - ex1
    dae_dex1, dae_dex2 = -eh, eh
    dae_dey1, dae_dey2 = -ew, ew

    dac_dex1 = np.where(ex1 <= fx1, -ch, 0.0)
    dac_dex2 = np.where(ex2 >= fx2, ch, 0.0)
    dac_dey1 = np.where(ey1 <= fy1, -cw, 0.0)
    dac_dey2 = np.where(ey2 >= fy2, cw, 0.0)

    def per_corner(di, dae, dac):
        du = dae - di
        diou = np.where(live, (di * union - inter * du) / (u_safe * u_safe), 0.0)
        dgiou = diou + np.where(live, du / ac_safe - union * dac / (ac_safe * ac_safe), 0.0)
        return diou, dgiou

    diou_x1, dgiou_x1 = per_corner(di_dex1, dae_dex1, dac_dex1)
    diou_x2, dgiou_x2 = per_corner(di_dex2, dae_dex2, dac_dex2)
    diou_y1, dgiou_y1 = per_corner(di_dey1, dae_dey1, dac_dey1)
    diou_y2, dgiou_y2 = per_corner(di_dey2, dae_dey2, dac_dey2)

    def to_center(gx1, gx2, gy1, gy2):
        return np.stack([gx1 + gx2, gy1 + gy2, (gx2 - gx1) / 2, (gy2 - gy1) / 2], axis=1)

    diou_de = to_center(diou_x1, diou_x2, diou_y1, diou_y2)
    dgiou_de = to_center(dgiou_x1, dgiou_x2, dgiou_y1, dgiou_y2)
    return iou, giou, diou_de, dgiou_de


def iou(e: BBox, f: BBox) -> float:
    """|E∩F| / |E∪F|, in [0, 1]; 0 for disjoint or fully degenerate pairs."""
    v, _, _, _ = iou_giou_grad(e.as_array()[None], f.as_array()[None])
    return float(v[0])


def giou(e: BBox, f: BBox) -> float:
    """IoU minus normalized empty area of the smallest enclosing box, in (-1, 1]."""
    _, v, _, _ = iou_giou_grad(e.as_array()[None], f.as_array()[None])
    return float(v[0])


def giou_loss(e: BBox, f: BBox) -> tuple[float, np.ndarray]:
    """1 - GIoU(e, f) in [0, 2), and its gradient w.r.t. e's (cx, cy, w, h)."""
    _, g, _, dg = iou_giou_grad(e.as_array()[None], f.as_array()[None])
    return float(1.0 - g[0]), -dg[0]


def nms(boxes, iou_threshold: float):
    """Greedy class-aware suppression.

    Repeatedly keeps the highest-confidence remaining box and removes every
    remaining box of the same class whose IoU with it exceeds the
    threshold. Returns survivors sorted by descending confidence; ties
    break on input order.
    """
    if not 0 < iou_threshold < 1:
        raise UsageError(f"nms iou_threshold must lie in (0, 1), got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    kept: list[BBox] = []
    suppressed = set()
    for i in order:
        if i in suppressed:
            continue
        kept.append(boxes[i])
        for j in order:
            if j == i or j in suppressed:
                continue
            if boxes[j].class_id == boxes[i].class_id and iou(boxes[i], boxes[j]) > iou_threshold:
                suppressed.add(j)
    return kept


# training and tests want row-paired IoUs without the gradient plumbing
def iou_many(e: np.ndarray, f: np.ndarray) -> np.ndarray:
    v, _, _, _ = iou_giou_grad(e, f)
    return v
