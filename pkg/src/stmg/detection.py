"""Event-level detection: head outputs, box encoding, active-region pooling,
NMS, target assignment and COCO-style mAP.

Class layout: indices 0..n-1 are object classes, index n is background.
Boxes are (cx, cy, w, h) in pixels.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError
from .events import GEN1, GroundTruth, SensorGeometry
from .network import Model, head_block, head_outputs

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
DET_HEADER = "# t_us,class_id,score,cx,cy,w,h"


@dataclass
class HeadConfig:
    w0: float = 64.0
    h0: float = 64.0
    pool_voxel: int = 2
    nms_iou: float = 0.5
    score_threshold: float = 0.1
    detect_horizon: int = 10_000     # us; nodes this recent vote at a label time

    def __post_init__(self):
        if self.w0 <= 0 or self.h0 <= 0:
            raise ValueError("w0 and h0 must be positive")
        if self.pool_voxel < 1:
            raise ValueError("pool voxel must be >= 1 pixel")


@dataclass
class BBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    score: float = 1.0
    node_id: int = -1

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got {self.w}x{self.h}")

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass
class NodePrediction:
    node_id: int
    probs: np.ndarray
    box: np.ndarray
    s: float


@dataclass
class HeadOutput:
    """Per-node head outputs (tensors, differentiable)."""

    logits: torch.Tensor
    box: torch.Tensor
    s_logit: torch.Tensor

    @property
    def probs(self):
        return torch.softmax(self.logits, dim=1)

    @property
    def s(self):
        return torch.sigmoid(self.s_logit)

    def to_list(self, ids) -> list[NodePrediction]:
        p = self.probs.detach().numpy()
        b = self.box.detach().numpy()
        s = self.s.detach().numpy()
        return [NodePrediction(int(i), p[k], b[k], float(s[k])) for k, i in enumerate(ids)]


def head_forward(features: torch.Tensor, graph, model: Model, train: bool = False,
                 executor=None) -> HeadOutput:
    z = head_block(model, features, graph, train, executor)
    return HeadOutput(*head_outputs(model, z))


# ---------------------------------------------------------------------------
# box coding


def encode_box(gt, pos, cfg: HeadConfig | None = None):
    """gt (cx, cy, w, h), node pos (x, y) -> (x', y', w', h'). Vectorised."""
    cfg = cfg or HeadConfig()
    if isinstance(gt, BBox):
        gt = gt.as_array()
    lib = torch if isinstance(gt, torch.Tensor) else np
    gt = gt if lib is torch else np.asarray(gt, dtype=np.float64)
    pos = pos if lib is torch else np.asarray(pos, dtype=np.float64)
    if (gt[..., 2] <= 0).any() or (gt[..., 3] <= 0).any():
        raise ValueError("ground-truth box dims must be positive")
    return lib.stack([(gt[..., 0] - pos[..., 0]) / cfg.w0, (gt[..., 1] - pos[..., 1]) / cfg.h0,
                      lib.log(gt[..., 2] / cfg.w0), lib.log(gt[..., 3] / cfg.h0)], -1)


def decode_box(pred, pos, cfg: HeadConfig | None = None, geometry: SensorGeometry | None = None):
    """Inverse of :func:`encode_box`; clamps to the sensor when ``geometry``
    is given. Vectorised over leading dims."""
    cfg = cfg or HeadConfig()
    lib = torch if isinstance(pred, torch.Tensor) else np
    pred = pred if lib is torch else np.asarray(pred, dtype=np.float64)
    pos = pos if lib is torch else np.asarray(pos, dtype=np.float64)
    cx = pred[..., 0] * cfg.w0 + pos[..., 0]
    cy = pred[..., 1] * cfg.h0 + pos[..., 1]
    w = cfg.w0 * lib.exp(pred[..., 2])
    h = cfg.h0 * lib.exp(pred[..., 3])
    out = lib.stack([cx, cy, w, h], -1)
    if geometry is not None:
        out = clamp_boxes(out, geometry)
    return out


def clamp_boxes(b, geometry: SensorGeometry, min_size: float = 1e-3):
    lib = torch if isinstance(b, torch.Tensor) else np
    x0 = lib.clip(b[..., 0] - b[..., 2] / 2, 0, geometry.width)
    x1 = lib.clip(b[..., 0] + b[..., 2] / 2, 0, geometry.width)
    y0 = lib.clip(b[..., 1] - b[..., 3] / 2, 0, geometry.height)
    y1 = lib.clip(b[..., 1] + b[..., 3] / 2, 0, geometry.height)
    w = lib.maximum(x1 - x0, lib.full_like(x0, min_size)) if lib is np else torch.clamp(x1 - x0, min=min_size)
    h = lib.maximum(y1 - y0, lib.full_like(y0, min_size)) if lib is np else torch.clamp(y1 - y0, min=min_size)
    return lib.stack([(x0 + x1) / 2, (y0 + y1) / 2, w, h], -1)


# ---------------------------------------------------------------------------
# IoU


def iou(a, b) -> float:
    a = a.as_array() if isinstance(a, BBox) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, BBox) else np.asarray(b, dtype=np.float64)
    return float(iou_matrix(a[None], b[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ax1 = a[:, 0] - a[:, 2] / 2, a[:, 0] + a[:, 2] / 2
    ay0, ay1 = a[:, 1] - a[:, 3] / 2, a[:, 1] + a[:, 3] / 2
    bx0, bx1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    by0, by1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None]), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# detections


@dataclass
class Detections:
    """Flat detection table: boxes [M,4], scores [M], classes [M], node ids [M]."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    node_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.node_ids) == 0 and len(self.scores):
            self.node_ids = np.arange(len(self.scores))
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.scores)

    def subset(self, idx) -> "Detections":
        return Detections(self.boxes[idx], self.scores[idx], self.classes[idx], self.node_ids[idx])

    @classmethod
    def from_bboxes(cls, boxes: list[BBox]) -> "Detections":
        if not boxes:
            return cls()
        return cls([b.as_array() for b in boxes], [b.score for b in boxes],
                   [b.class_id for b in boxes], [b.node_id for b in boxes])

    def to_bboxes(self) -> list[BBox]:
        return [BBox(*self.boxes[i], int(self.classes[i]), float(self.scores[i]), int(self.node_ids[i]))
                for i in range(len(self))]


def node_scores(probs: np.ndarray, s: np.ndarray):
    """(score, class) per node: best non-background probability times s."""
    fg = probs[:, :-1]
    cls = np.argmax(fg, axis=1)
    return fg[np.arange(len(fg)), cls] * s, cls


@dataclass
class PooledRegions:
    rows: np.ndarray        # winning node row per region
    pos: np.ndarray         # [R, 2] mean node position per region


def active_region_pool(pos: np.ndarray, scores: np.ndarray, node_ids: np.ndarray,
                       voxel: int) -> PooledRegions:
    """Group nodes into ``voxel``-pixel cells; each cell keeps its best node
    (highest score, then smaller node id) and is anchored at the mean
    position of its members."""
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
    if len(pos) == 0:
        return PooledRegions(np.zeros(0, np.int64), np.zeros((0, 2)))
    cell = np.floor(pos / voxel).astype(np.int64)
    _, region = np.unique(cell, axis=0, return_inverse=True)
    region = region.reshape(-1)
    n_reg = region.max() + 1
    order = np.lexsort((node_ids, -scores, region))
    first = np.r_[True, region[order][1:] != region[order][:-1]]
    rows = order[first]
    counts = np.bincount(region, minlength=n_reg)
    mean = np.stack([np.bincount(region, pos[:, d], minlength=n_reg) for d in range(2)], 1)
    mean /= counts[:, None]
    return PooledRegions(rows, mean[region[rows]])


def nms(dets: Detections, iou_threshold: float = 0.5) -> Detections:
    """Greedy per-class suppression, descending score, ties by node id."""
    if len(dets) == 0:
        return dets
    order = np.lexsort((dets.node_ids, -dets.scores))
    keep = []
    for c in np.unique(dets.classes):
        idx = order[dets.classes[order] == c]
        ious = iou_matrix(dets.boxes[idx], dets.boxes[idx])
        alive = np.ones(len(idx), bool)
        for a in range(len(idx)):
            if not alive[a]:
                continue
            keep.append(idx[a])
            alive[a + 1:] &= ~(ious[a, a + 1:] > iou_threshold)
    keep = np.array(sorted(keep, key=lambda i: (-dets.scores[i], dets.node_ids[i])), dtype=np.int64)
    return dets.subset(keep)


def detect(probs: np.ndarray, box_enc: np.ndarray, s: np.ndarray, pos: np.ndarray,
           node_ids: np.ndarray, cfg: HeadConfig, geometry: SensorGeometry = GEN1) -> Detections:
    """Pool -> threshold -> decode -> NMS over one set of nodes."""
    score, cls = node_scores(probs, s)
    pooled = active_region_pool(pos, score, node_ids, cfg.pool_voxel)
    rows = pooled.rows
    ok = score[rows] >= cfg.score_threshold
    rows, anchor = rows[ok], pooled.pos[ok]
    boxes = decode_box(box_enc[rows], anchor, cfg, geometry)
    return nms(Detections(boxes, score[rows], cls[rows], node_ids[rows]), cfg.nms_iou)


# ---------------------------------------------------------------------------
# target assignment


@dataclass
class Targets:
    labels: np.ndarray      # [N] class id or num_classes for background
    boxes: np.ndarray       # [N, 4] assigned gt box (zeros for background)
    positive: np.ndarray    # [N] bool


def assign_targets(x, y, t, gt: GroundTruth, num_classes: int) -> Targets:
    """Positive iff (x, y) lies in a box at the label time nearest the node's
    timestamp; the smallest such box wins."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    n = len(x)
    labels = np.full(n, num_classes, np.int64)
    boxes = np.zeros((n, 4))
    if n == 0 or len(gt) == 0:
        return Targets(labels, boxes, labels < num_classes)
    if (gt.boxes[:, 1] >= num_classes).any():
        raise DataError("ground-truth class id exceeds num_classes")
    times = gt.times()
    # nearest label time, ties towards the later label
    k = np.searchsorted(times, t)
    lo = np.clip(k - 1, 0, len(times) - 1)
    hi = np.clip(k, 0, len(times) - 1)
    nearest = np.where(np.abs(times[hi] - t) <= np.abs(t - times[lo]), times[hi], times[lo])
    for tl in np.unique(nearest):
        rows = np.flatnonzero(nearest == tl)
        g = gt.at(tl)
        area = g[:, 4] * g[:, 5]
        best = np.full(len(rows), np.inf)
        for j in np.argsort(area, kind="stable"):
            cx, cy, w, h = g[j, 2:]
            inside = ((np.abs(x[rows] - cx) <= w / 2) & (np.abs(y[rows] - cy) <= h / 2)
                      & (area[j] < best))
            labels[rows[inside]] = int(g[j, 1])
            boxes[rows[inside]] = g[j, 2:]
            best[inside] = area[j]
    return Targets(labels, boxes, labels < num_classes)


# ---------------------------------------------------------------------------
# mAP


@dataclass
class MapResult:
    map: float
    map50: float
    ap: dict            # class -> array of AP per threshold
    thresholds: tuple

    def report(self) -> str:
        lines = ["class  AP@50   AP@[.50:.95]"]
        for c in sorted(self.ap):
            lines.append(f"{c:5d}  {self.ap[c][0]:.4f}  {float(np.mean(self.ap[c])):.4f}")
        lines.append(f"mAP      {self.map:.4f}")
        lines.append(f"mAP@50   {self.map50:.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["class_id," + ",".join(f"ap{int(round(th * 100))}" for th in self.thresholds)]
        for c in sorted(self.ap):
            lines.append(f"{c}," + ",".join(f"{v:.6f}" for v in self.ap[c]))
        lines.append(f"map,{self.map:.6f}")
        lines.append(f"map50,{self.map50:.6f}")
        return "\n".join(lines) + "\n"


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from TP flags sorted by descending score."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    pts = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, pts, side="left")
    q = np.where(idx < len(recall), precision[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(q.mean())


def evaluate_map(dets_by_time: dict, gt: GroundTruth, iou_thresholds=COCO_THRESHOLDS,
                 num_classes: int | None = None) -> MapResult:
    """COCO-style mAP. ``dets_by_time`` maps label time -> Detections.
    Classes without ground truth are left out of the mean."""
    thresholds = tuple(float(v) for v in iou_thresholds)
    gt_times = set(gt.times().tolist())
    classes = set(gt.boxes[:, 1].astype(int).tolist())
    if num_classes is not None:
        if classes and max(classes) >= num_classes:
            raise DataError("ground truth uses more classes than configured")
        for d in dets_by_time.values():
            if len(d) and d.classes.max() >= num_classes:
                raise DataError("detections use more classes than configured")
    # flat table of detections; frames without labels contribute only FPs
    rows = []
    for t, d in dets_by_time.items():
        for i in range(len(d)):
            rows.append((int(t), int(d.classes[i]), float(d.scores[i]), *d.boxes[i]))
    ap = {}
    for c in sorted(classes):
        dc = [r for r in rows if r[1] == c]
        dc.sort(key=lambda r: (-r[2], r[0], r[3], r[4], r[5], r[6]))
        gts = {t: gt.at(t) for t in gt_times}
        gts = {t: g[g[:, 1] == c, 2:] for t, g in gts.items()}
        n_gt = sum(len(g) for g in gts.values())
        per = []
        for th in thresholds:
            matched = {t: np.zeros(len(g), bool) for t, g in gts.items()}
            tp = np.zeros(len(dc), bool)
            for k, r in enumerate(dc):
                g = gts.get(r[0])
                if g is None or len(g) == 0:
                    continue
                ious = iou_matrix(np.array(r[3:7])[None], g)[0]
                ious[matched[r[0]]] = -1.0
                j = int(np.argmax(ious))
                if ious[j] >= th - 1e-12:
                    tp[k] = True
                    matched[r[0]][j] = True
            per.append(average_precision(tp, n_gt))
        ap[c] = np.array(per)
    if not ap:
        return MapResult(0.0, 0.0, {}, thresholds)
    table = np.stack(list(ap.values()))
    return MapResult(float(table.mean()), float(table[:, 0].mean()), ap, thresholds)


# ---------------------------------------------------------------------------
# detection CSV


def detections_to_csv(dets_by_time: dict) -> str:
    buf = io.StringIO()
    buf.write(DET_HEADER + "\n")
    for t in sorted(dets_by_time):
        d = dets_by_time[t]
        for i in range(len(d)):
            cx, cy, w, h = d.boxes[i]
            buf.write(f"{int(t)},{int(d.classes[i])},{d.scores[i]:.6f},"
                      f"{cx:.6f},{cy:.6f},{w:.6f},{h:.6f}\n")
    return buf.getvalue()


def parse_detections(text: str) -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise DataError(f"detection line {lineno}: expected 7 fields")
        try:
            t, c = int(parts[0]), int(parts[1])
            vals = [float(v) for v in parts[2:]]
        except ValueError:
            raise DataError(f"detection line {lineno}: bad field") from None
        if not all(math.isfinite(v) for v in vals) or vals[3] <= 0 or vals[4] <= 0:
            raise DataError(f"detection line {lineno}: invalid box")
        out.setdefault(t, []).append((c, *vals))
    res = {}
    for t, lst in out.items():
        a = np.array(lst)
        res[t] = Detections(a[:, 2:6], a[:, 1], a[:, 0].astype(np.int64))
    return res
