"""Losses, augmentation, optimiser, schedule and the training loop."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .detection import (HeadConfig, Detections, assign_targets, decode_box, encode_box,
                        evaluate_map, iou_matrix)
from .engine import detections_at, window_outputs
from .errors import DataError, NumericError
from .events import (EventStream, GroundTruth, downsample_density, read_events, read_labels,
                     translate_stream, window_slice)
from .graph import GraphArrays, GraphConfig, build_graph
from .network import Model, ModelConfig, init_model, model_forward, save_checkpoint

LOG_HEADER = ["step", "lr", "l_cls", "l_loc", "l_dim", "l_conf", "l_total"]


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 3.0
    lam: float = 1.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class OptimizerConfig:
    max_lr: float = 4e-4
    weight_decay: float = 1e-4
    total_steps: int = 175_000
    batch_size: int = 24
    warmup_frac: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.max_lr <= 0 or self.total_steps <= 0 or self.batch_size <= 0:
            raise ValueError("learning rate, steps and batch size must be positive")


@dataclass
class AugmentConfig:
    p_translate: float = 0.5
    translate_min: float = 0.05
    translate_max: float = 0.15
    p_crop: float = 0.4
    crop_min: float = 0.05
    crop_max: float = 0.25

    def __post_init__(self):
        for p in (self.p_translate, self.p_crop):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.translate_min > self.translate_max or self.crop_min > self.crop_max:
            raise ValueError("min magnitude exceeds max")


# ---------------------------------------------------------------------------
# losses


def loss_cls(logits: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    """-(1/N) sum_i w_{y_i} log p_i[y_i] over every node."""
    if logits.shape[0] == 0:
        raise ValueError("classification loss over an empty node set")
    logp = torch.log_softmax(logits, dim=1)
    picked = logp.gather(1, labels[:, None]).squeeze(1)
    return -(class_weights.to(logits.dtype)[labels] * picked).mean()


def ciou(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Per-box complete-IoU loss for (cx, cy, w, h) rows."""
    px0, px1 = pred[:, 0] - pred[:, 2] / 2, pred[:, 0] + pred[:, 2] / 2
    py0, py1 = pred[:, 1] - pred[:, 3] / 2, pred[:, 1] + pred[:, 3] / 2
    gx0, gx1 = gt[:, 0] - gt[:, 2] / 2, gt[:, 0] + gt[:, 2] / 2
    gy0, gy1 = gt[:, 1] - gt[:, 3] / 2, gt[:, 1] + gt[:, 3] / 2
    iw = (torch.minimum(px1, gx1) - torch.maximum(px0, gx0)).clamp(min=0)
    ih = (torch.minimum(py1, gy1) - torch.maximum(py0, gy0)).clamp(min=0)
    inter = iw * ih
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    iou = inter / (union + eps)
    cw = torch.maximum(px1, gx1) - torch.minimum(px0, gx0)
    ch = torch.maximum(py1, gy1) - torch.minimum(py0, gy0)
    diag = cw ** 2 + ch ** 2 + eps
    dist = (pred[:, 0] - gt[:, 0]) ** 2 + (pred[:, 1] - gt[:, 1]) ** 2
    v = (4 / math.pi ** 2) * (torch.atan(gt[:, 2] / gt[:, 3]) - torch.atan(pred[:, 2] / pred[:, 3])) ** 2
    a = v / ((1 - iou) + v + eps)
    return 1 - iou + dist / diag + a * v


def loss_loc(pred_boxes: torch.Tensor, gt_boxes: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cIoU over positive nodes on decoded boxes; 0 without positives."""
    if not bool(mask.any()):
        return pred_boxes.sum() * 0.0
    return ciou(pred_boxes[mask], gt_boxes[mask].to(pred_boxes.dtype)).mean()


def huber(r: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    a = r.abs()
    return torch.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def loss_dim(pred_wh: torch.Tensor, target_wh: torch.Tensor, mask: torch.Tensor,
             delta: float = 1.0) -> torch.Tensor:
    """Masked mean Huber loss over encoded (w', h') components."""
    if not bool(mask.any()):
        return pred_wh.sum() * 0.0
    return huber(pred_wh[mask] - target_wh[mask].to(pred_wh.dtype), delta).mean()


def conf_targets(decoded: np.ndarray, gt_boxes: np.ndarray, positive: np.ndarray,
                 threshold: float = 0.5) -> np.ndarray:
    t = np.zeros(len(decoded))
    idx = np.flatnonzero(positive)
    if len(idx):
        a, b = decoded[idx], gt_boxes[idx]
        ious = np.array([iou_matrix(a[k:k + 1], b[k:k + 1])[0, 0] for k in range(len(idx))])
        t[idx] = (ious >= threshold).astype(np.float64)
    return t


def loss_conf(s_logit: torch.Tensor, decoded: torch.Tensor, gt_boxes: torch.Tensor,
              positive: torch.Tensor) -> torch.Tensor:
    """BCE of the IoU confidence against 1[IoU(decoded, gt) >= 0.5];
    background targets 0. Averaged over all nodes."""
    target = conf_targets(decoded.detach().double().numpy(), np.asarray(gt_boxes, np.float64),
                          np.asarray(positive, bool))
    return F.binary_cross_entropy_with_logits(s_logit, torch.as_tensor(target, dtype=s_logit.dtype))


def total_loss(parts, weights: LossWeights | None = None):
    w = weights or LossWeights()
    l_cls, l_loc, l_dim, l_conf = parts
    return w.alpha * l_cls + w.beta * l_loc + w.gamma * l_dim + w.lam * l_conf


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse frequency normalised to mean 1 (absent classes count as 1)."""
    c = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    inv = 1.0 / c
    return inv / inv.mean()


# ---------------------------------------------------------------------------
# augmentation


def translate(stream: EventStream, gt: GroundTruth, dx: int, dy: int):
    g = stream.geometry
    out = translate_stream(stream, dx, dy)
    b = gt.boxes.copy()
    b[:, 2] += dx
    b[:, 3] += dy
    return out, clip_gt(b, 0, 0, g.width, g.height)


def clip_gt(b: np.ndarray, x0, y0, x1, y1) -> GroundTruth:
    if len(b) == 0:
        return GroundTruth(b)
    lx = np.clip(b[:, 2] - b[:, 4] / 2, x0, x1)
    rx = np.clip(b[:, 2] + b[:, 4] / 2, x0, x1)
    ly = np.clip(b[:, 3] - b[:, 5] / 2, y0, y1)
    ry = np.clip(b[:, 3] + b[:, 5] / 2, y0, y1)
    out = b.copy()
    out[:, 2], out[:, 3] = (lx + rx) / 2, (ly + ry) / 2
    out[:, 4], out[:, 5] = rx - lx, ry - ly
    return GroundTruth(out[(out[:, 4] > 0) & (out[:, 5] > 0)])


def crop(stream: EventStream, gt: GroundTruth, x0: int, y0: int, w: int, h: int):
    """Keep events inside [x0, x0+w) x [y0, y0+h) and shift them to the origin."""
    ok = (stream.x >= x0) & (stream.x < x0 + w) & (stream.y >= y0) & (stream.y < y0 + h)
    s = stream.subset(ok)
    s = EventStream(s.t, s.x - x0, s.y - y0, s.p, stream.geometry, sort=False)
    b = gt.boxes.copy()
    b[:, 2] -= x0
    b[:, 3] -= y0
    return s, clip_gt(b, 0, 0, w, h)


def augment(stream: EventStream, gt: GroundTruth, cfg: AugmentConfig | None = None, seed: int = 0):
    """Random translation then anchor-preserving crop."""
    cfg = cfg or AugmentConfig()
    if len(gt) == 0:
        raise DataError("augmentation needs at least one ground-truth box")
    rng = np.random.default_rng(seed)
    g = stream.geometry
    anchor = gt.boxes[rng.integers(len(gt))].copy()
    if rng.random() < cfg.p_translate:
        fx, fy = rng.uniform(cfg.translate_min, cfg.translate_max, 2)
        sx, sy = rng.choice([-1, 1], 2)
        dx, dy = int(round(sx * fx * g.width)), int(round(sy * fy * g.height))
        stream, gt = translate(stream, gt, dx, dy)
        anchor[2] += dx
        anchor[3] += dy
    if rng.random() < cfg.p_crop and len(gt):
        c = rng.uniform(cfg.crop_min, cfg.crop_max)
        w, h = int(round((1 - c) * g.width)), int(round((1 - c) * g.height))
        ax0 = max(anchor[2] - anchor[4] / 2, 0)
        ax1 = min(anchor[2] + anchor[4] / 2, g.width)
        ay0 = max(anchor[3] - anchor[5] / 2, 0)
        ay1 = min(anchor[3] + anchor[5] / 2, g.height)
        lo_x, hi_x = max(0, math.ceil(ax1 - w)), min(g.width - w, math.floor(ax0))
        lo_y, hi_y = max(0, math.ceil(ay1 - h)), min(g.height - h, math.floor(ay0))
        if lo_x <= hi_x and lo_y <= hi_y and ax1 > ax0 and ay1 > ay0:
            x0 = int(rng.integers(lo_x, hi_x + 1))
            y0 = int(rng.integers(lo_y, hi_y + 1))
            stream, gt = crop(stream, gt, x0, y0, w, h)
    return stream, gt


# ---------------------------------------------------------------------------
# optimiser


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear one-cycle: warm up from max/div_start to max over the first
    ``warmup_frac`` of steps, then anneal linearly to max/div_final."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    lo, hi, end = cfg.max_lr / cfg.div_start, cfg.max_lr, cfg.max_lr / cfg.div_final
    warm = cfg.warmup_frac * total
    if step <= warm:
        return lo + (hi - lo) * (step / warm if warm > 0 else 1.0)
    return hi + (end - hi) * (step - warm) / (total - warm)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@torch.no_grad()
def optimizer_step(params: dict, grads: dict, state: AdamState, cfg: OptimizerConfig, step: int,
                   lr: float | None = None) -> float:
    """AdamW in place. Returns the learning rate used."""
    for k, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {k}")
    lr = lr_at(step, cfg) if lr is None else lr
    b1, b2 = cfg.betas
    state.t += 1
    bc1 = 1 - b1 ** state.t
    bc2 = 1 - b2 ** state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = torch.zeros_like(p)
        if k not in state.m:
            state.m[k] = torch.zeros_like(p)
            state.v[k] = torch.zeros_like(p)
        m, v = state.m[k], state.v[k]
        p.mul_(1 - lr * cfg.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return lr


# ---------------------------------------------------------------------------
# data


@dataclass
class Sequence:
    stream: EventStream
    gt: GroundTruth
    name: str = ""


@dataclass
class Sample:
    seq: int
    t_end: int
    events: EventStream
    gt: GroundTruth       # boxes with label time in the window


def load_manifest(path) -> list[Sequence]:
    """Text file of ``events.csv,labels.csv`` lines (paths relative to it)."""
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [s.strip() for s in line.split(",")]
        if len(parts) != 2:
            raise DataError(f"manifest line {lineno}: expected 'events,labels'")
        ev, lb = (base / p if not Path(p).is_absolute() else Path(p) for p in parts)
        out.append(Sequence(read_events(ev), read_labels(lb), ev.stem))
    return out


def make_samples(seqs: list[Sequence], window: int, max_per_ms: int | None = None,
                 seed: int = 0) -> list[Sample]:
    """One sample per label time: the window ending there."""
    out = []
    for k, s in enumerate(seqs):
        stream = s.stream if max_per_ms is None else downsample_density(s.stream, max_per_ms, seed + k)
        for T in s.gt.times().tolist():
            ev = window_slice(stream, T, window)
            keep = (s.gt.boxes[:, 0] > T - window) & (s.gt.boxes[:, 0] <= T)
            out.append(Sample(k, int(T), ev, GroundTruth(s.gt.boxes[keep])))
    return out


@dataclass
class Prepared:
    ga: GraphArrays
    labels: torch.Tensor
    gt_boxes: torch.Tensor
    positive: torch.Tensor
    box_targets: torch.Tensor


def prepare(events: EventStream, gt: GroundTruth, t_start: int, gcfg: GraphConfig,
            head: HeadConfig, num_classes: int) -> Prepared:
    ga = build_graph(events, gcfg, t_start).to_arrays()
    tg = assign_targets(ga.x, ga.y, ga.t, gt, num_classes)
    pos = np.stack([ga.x, ga.y], 1).astype(np.float64)
    enc = np.zeros((ga.num_nodes, 4))
    if tg.positive.any():
        enc[tg.positive] = encode_box(tg.boxes[tg.positive], pos[tg.positive], head)
    return Prepared(ga, torch.as_tensor(tg.labels), torch.as_tensor(tg.boxes),
                    torch.as_tensor(tg.positive), torch.as_tensor(enc))


def merge_graphs(parts: list[GraphArrays]) -> GraphArrays:
    """Disjoint union; node ids are replaced by running row numbers."""
    offs = np.cumsum([0] + [p.num_nodes for p in parts])
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    shift = lambda name: np.concatenate([getattr(p, name) + o for p, o in zip(parts, offs)])  # noqa: E731
    return GraphArrays(np.arange(offs[-1]), cat("x"), cat("y"), cat("t"), cat("p"),
                       np.concatenate([p.feat for p in parts]).reshape(-1, 4),
                       shift("s_src"), shift("s_dst"),
                       np.concatenate([p.s_attr for p in parts]).reshape(-1, 3),
                       shift("t_src"), shift("t_dst"),
                       np.concatenate([p.t_attr for p in parts]).reshape(-1, 6),
                       geometry=parts[0].geometry)


def batch_loss(model: Model, batch: list[Prepared], head: HeadConfig, weights: LossWeights,
               class_weights: torch.Tensor, train: bool = True):
    ga = batch[0].ga if len(batch) == 1 else merge_graphs([b.ga for b in batch])
    labels = torch.cat([b.labels for b in batch])
    gt_boxes = torch.cat([b.gt_boxes for b in batch])
    positive = torch.cat([b.positive for b in batch])
    enc_t = torch.cat([b.box_targets for b in batch])
    logits, box, s_logit = model_forward(ga, model, train)
    pos = torch.as_tensor(np.stack([ga.x, ga.y], 1), dtype=box.dtype)
    decoded = decode_box(box, pos, head)
    parts = (loss_cls(logits, labels, class_weights),
             loss_loc(decoded, gt_boxes, positive),
             loss_dim(box[:, 2:], enc_t[:, 2:], positive),
             loss_conf(s_logit, decoded, gt_boxes.numpy(), positive.numpy()))
    return total_loss(parts, weights), parts


# ---------------------------------------------------------------------------
# evaluation / training loop


def evaluate(model: Model, samples: list[Sample], gcfg: GraphConfig, head: HeadConfig,
             mode: str = "dense") -> "MapResult":
    """mAP over samples; each sample's frame is keyed apart by sequence."""
    dets, rows = {}, []
    for s in samples:
        key = s.seq * 10 ** 10 + s.t_end
        ga, probs, box, conf = window_outputs(model, s.events, s.t_end - gcfg.window, gcfg, mode)
        dets[key] = detections_at(ga, probs, box, conf, s.t_end, head) if ga.num_nodes else Detections()
        g = s.gt.at(s.t_end).copy()
        g[:, 0] = key
        rows.append(g)
    gt = GroundTruth(np.concatenate(rows) if rows else np.zeros((0, 6)))
    return evaluate_map(dets, gt, num_classes=model.cfg.num_classes)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    val_every: int = 250
    augment: bool = True
    max_lr: float = 4e-4
    weight_decay: float = 1e-4
    seed: int = 0
    dtype: str = "float32"
    num_threads: int = 1


@dataclass
class TrainResult:
    model: Model
    best_map: float
    best_step: int
    log: list
    val_history: list


def train(train_samples: list[Sample], val_samples: list[Sample], model_cfg: ModelConfig,
          tcfg: TrainConfig, gcfg: GraphConfig | None = None, head: HeadConfig | None = None,
          weights: LossWeights | None = None, aug: AugmentConfig | None = None,
          out_dir=None, progress=None) -> TrainResult:
    """Mini-batch training; keeps the checkpoint with the best validation
    mAP@50 (the last one if no validation set is given)."""
    gcfg = gcfg or GraphConfig()
    head = head or HeadConfig()
    weights = weights or LossWeights()
    aug = aug or AugmentConfig()
    if not train_samples:
        raise DataError("empty training set")
    torch.manual_seed(tcfg.seed)
    if tcfg.num_threads:
        torch.set_num_threads(tcfg.num_threads)
    dtype = getattr(torch, tcfg.dtype)
    model = init_model(model_cfg, tcfg.seed, dtype)
    ocfg = OptimizerConfig(tcfg.max_lr, tcfg.weight_decay, tcfg.steps, tcfg.batch_size)
    rng = np.random.default_rng(tcfg.seed)
    nc = model_cfg.num_classes

    cache = {}

    def prepared(i, augmented):
        s = train_samples[i]
        if not augmented:
            if i not in cache:
                cache[i] = prepare(s.events, s.gt, s.t_end - gcfg.window, gcfg, head, nc)
            return cache[i]
        ev, gt = augment(s.events, s.gt, aug, int(rng.integers(2 ** 31)))
        return prepare(ev, gt, s.t_end - gcfg.window, gcfg, head, nc)

    counts = np.zeros(nc + 1)
    for i in range(len(train_samples)):
        counts += np.bincount(prepared(i, False).labels.numpy(), minlength=nc + 1)
    cw = torch.as_tensor(class_weights_from_counts(counts), dtype=dtype)

    state = AdamState()
    log, val_hist = [], []
    best = (-1.0, 0, None)
    order = []
    for step in range(tcfg.steps):
        if len(order) < tcfg.batch_size:
            order.extend(rng.permutation(len(train_samples)).tolist())
        idx, order = order[: tcfg.batch_size], order[tcfg.batch_size:]
        batch = [prepared(i, tcfg.augment and len(train_samples[i].gt) > 0) for i in idx]
        batch = [b for b in batch if b.ga.num_nodes > 0]
        if not batch:
            continue
        loss, parts = batch_loss(model, batch, head, weights, cw, train=True)
        if not torch.isfinite(loss):
            raise NumericError(f"loss diverged at step {step}: {float(loss)}")
        names = list(model.params)
        grads = torch.autograd.grad(loss, [model.params[k] for k in names], allow_unused=True)
        lr = optimizer_step(model.params, dict(zip(names, grads)), state, ocfg, step)
        log.append([step, lr] + [float(p.detach()) for p in parts] + [float(loss.detach())])
        if progress and step % 50 == 0:
            progress(f"step {step} lr {lr:.2e} loss {float(loss.detach()):.4f}")
        last = step == tcfg.steps - 1
        if val_samples and ((step + 1) % tcfg.val_every == 0 or last):
            res = evaluate(model, val_samples, gcfg, head)
            val_hist.append((step + 1, res.map50, res.map))
            if progress:
                progress(f"val step {step + 1}: mAP@50 {res.map50:.4f} mAP {res.map:.4f}")
            if res.map50 > best[0]:
                best = (res.map50, step + 1, model.clone())
                if out_dir is not None:
                    save_checkpoint(model, Path(out_dir) / "best.ckpt", graph_extra(gcfg, head))
    final = best[2] if best[2] is not None else model
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / "last.ckpt", graph_extra(gcfg, head))
        Path(out_dir, "metrics.csv").write_text(log_to_csv(log))
    return TrainResult(final, best[0], best[1], log, val_hist)


def graph_extra(gcfg: GraphConfig, head: HeadConfig) -> dict:
    """Inference settings stored next to the model config."""
    return {"graph_window": gcfg.window, "graph_direction": gcfg.edge_direction,
            "head_w0": head.w0, "head_h0": head.h0, "head_pool_voxel": head.pool_voxel,
            "head_nms_iou": head.nms_iou, "head_score_threshold": head.score_threshold,
            "head_detect_horizon": head.detect_horizon}


def log_to_csv(log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for row in log:
        w.writerow([row[0]] + [f"{v:.8g}" for v in row[1:]])
    return buf.getvalue()
