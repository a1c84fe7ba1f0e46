"""Box algebra, trajectory overlap, and RoI pooling.

Boxes are center-size tuples (cx, cy, w, h) as fractions of the image, so
every coordinate lives in [0, 1] and regression heads can use a sigmoid.
Scalar helpers operate on plain floats; the tensor variants mirror them for
batched, differentiable use inside losses and the matcher.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Tuple

import numpy as np
import torch


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> Tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)


def corners_to_box(x1: float, y1: float, x2: float, y2: float,
                   extent: Tuple[float, float] = (1.0, 1.0)) -> Box:
    """Build a normalized Box from corner coordinates in extent units."""
    w, h = extent
    return Box(
        (x1 + x2) / 2.0 / w,
        (y1 + y2) / 2.0 / h,
        (x2 - x1) / w,
        (y2 - y1) / h,
    )


def _intersection(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    inter = _intersection(a, b)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """IoU minus the hull area not covered by the union, over the hull."""
    inter = _intersection(a, b)
    union = a.area() + b.area() - inter
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    value = inter / union if union > 0.0 else 0.0
    if hull > 0.0:
        value -= (hull - union) / hull
    return value


@dataclass
class TimedBoxSequence:
    """A gap-free run of per-frame boxes over [start, end] inclusive."""

    start: int
    end: int
    boxes: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"start {self.start} after end {self.end}")
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        expect = self.end - self.start + 1
        if self.boxes.shape != (expect, 4):
            raise ValueError(
                f"span [{self.start}, {self.end}] needs {expect} boxes, "
                f"got array of shape {self.boxes.shape}"
            )

    def __len__(self) -> int:
        return self.end - self.start + 1

    def box_at(self, t: int) -> Box:
        if not self.start <= t <= self.end:
            raise ValueError(f"frame {t} outside [{self.start}, {self.end}]")
        return Box(*self.boxes[t - self.start])

    def covers(self, t: int) -> bool:
        return self.start <= t <= self.end

    def slice(self, start: int, end: int) -> "TimedBoxSequence":
        if start < self.start or end > self.end:
            raise ValueError("slice outside span")
        return TimedBoxSequence(start, end, self.boxes[start - self.start:end - self.start + 1])


def viou(a: TimedBoxSequence, b: TimedBoxSequence) -> float:
    """Trajectory overlap: summed per-frame intersection over summed union.

    Runs over the temporal union of both spans; a frame covered by only one
    trajectory adds that box's area to the union and nothing to the
    intersection.
    """
    t0 = min(a.start, b.start)
    t1 = max(a.end, b.end)
    inter_sum = 0.0
    union_sum = 0.0
    for t in range(t0, t1 + 1):
        in_a = a.covers(t)
        in_b = b.covers(t)
        if in_a and in_b:
            box_a = a.box_at(t)
            box_b = b.box_at(t)
            inter = _intersection(box_a, box_b)
            inter_sum += inter
            union_sum += box_a.area() + box_b.area() - inter
        elif in_a:
            union_sum += a.box_at(t).area()
        elif in_b:
            union_sum += b.box_at(t).area()
    if union_sum <= 0.0:
        return 0.0
    return inter_sum / union_sum


# tensor variants over (..., 4) center-size boxes


def boxes_to_corners(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def _corner_iou_union(a: torch.Tensor, b: torch.Tensor):
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    union = area_a + area_b - inter
    return inter / union.clamp(min=1e-12), union


def elementwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    value, _ = _corner_iou_union(boxes_to_corners(a), boxes_to_corners(b))
    return value


def elementwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ca = boxes_to_corners(a)
    cb = boxes_to_corners(b)
    value, union = _corner_iou_union(ca, cb)
    lt = torch.minimum(ca[..., :2], cb[..., :2])
    rb = torch.maximum(ca[..., 2:], cb[..., 2:])
    hull = (rb - lt)[..., 0] * (rb - lt)[..., 1]
    return value - (hull - union) / hull.clamp(min=1e-12)


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs GIoU between a [N, 4] and b [M, 4]."""
    return elementwise_giou(a[:, None, :], b[None, :, :])


def pairwise_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs L1 box distance (sum over the 4 coordinates)."""
    return (a[:, None, :] - b[None, :, :]).abs().sum(-1)


def _coverage_weights(rows: int, cols: int, corners, dtype, device) -> torch.Tensor:
    """Absolute overlap area of the box with each grid cell, clipped to the image."""
    x1, y1, x2, y2 = corners
    x1, x2 = max(x1, 0.0), min(x2, 1.0)
    y1, y2 = max(y1, 0.0), min(y2, 1.0)
    xs = torch.linspace(0, 1, cols + 1, dtype=dtype, device=device)
    ys = torch.linspace(0, 1, rows + 1, dtype=dtype, device=device)
    wx = (torch.minimum(xs[1:], torch.tensor(x2, dtype=dtype)) -
          torch.maximum(xs[:-1], torch.tensor(x1, dtype=dtype))).clamp(min=0)
    wy = (torch.minimum(ys[1:], torch.tensor(y2, dtype=dtype)) -
          torch.maximum(ys[:-1], torch.tensor(y1, dtype=dtype))).clamp(min=0)
    return wy[:, None] * wx[None, :]


def roi_pool(patches: torch.Tensor, box: Box, out: Tuple[int, int] = (1, 1)) -> torch.Tensor:
    """Pool a patch grid [rows, cols, D] over a box into one dim-D vector.

    Each output cell averages the patch vectors it covers, weighted by
    fractional coverage; the out grid's cells are then averaged so the result
    is always dim D. A box covering no cell snaps to the cell under its
    center.
    """
    rows, cols, _dim = patches.shape
    x1, y1, x2, y2 = box.corners()
    r_out, c_out = out
    if r_out < 1 or c_out < 1:
        raise ValueError("out grid must be at least 1x1")
    cells = []
    for i in range(r_out):
        for j in range(c_out):
            sub = (
                x1 + (x2 - x1) * j / c_out,
                y1 + (y2 - y1) * i / r_out,
                x1 + (x2 - x1) * (j + 1) / c_out,
                y1 + (y2 - y1) * (i + 1) / r_out,
            )
            weights = _coverage_weights(rows, cols, (sub[0], sub[1], sub[2], sub[3]),
                                        patches.dtype, patches.device)
            total = weights.sum()
            if total <= 0:
                r_idx = min(max(int(box.cy * rows), 0), rows - 1)
                c_idx = min(max(int(box.cx * cols), 0), cols - 1)
                cells.append(patches[r_idx, c_idx])
            else:
                cells.append((weights[..., None] * patches).sum(dim=(0, 1)) / total)
    return torch.stack(cells, dim=0).mean(dim=0)
