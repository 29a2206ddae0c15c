"""Three-scale detector trunk, teacher training and feature distillation.

The trunk taps features at strides 4, 8 and 16 (32, 64 and 128 channels)
right before three light detection heads. A teacher is trained with box
labels on modality A and frozen; a student with a one-channel stem learns
to reproduce the teacher's taps from modality B using paired images only.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, make_optimizer
from .core import functional as F
from .core.nn import Conv2d, ConvAct, Module, assign_names
from .core.tensor import _make, abs_, add, mean, mul, square, sub, sum_
from .training import DivergenceGuard, History, cosine_lr, minibatches

log = logging.getLogger(__name__)

STRIDES = (4, 8, 16)
WIDTHS = (32, 64, 128)
HEAD_CHANNELS = 5  # objectness logit + (dx, dy, log w, log h)


@dataclass
class MultiScaleFeatures:
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray

    def taps(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.f1, self.f2, self.f3)


class Trunk(Module):
    def __init__(self, cin: int, rng: np.random.Generator):
        self.c1 = ConvAct(cin, 16, 3, 2, rng)
        self.c2 = ConvAct(16, 16, 3, 1, rng)
        self.c3 = ConvAct(16, 32, 3, 2, rng)
        self.c4 = ConvAct(32, 32, 3, 1, rng)
        self.c5 = ConvAct(32, 32, 3, 1, rng)
        self.c6 = ConvAct(32, 64, 3, 2, rng)
        self.c7 = ConvAct(64, 64, 3, 1, rng)
        self.c8 = ConvAct(64, 128, 3, 2, rng)
        self.c9 = ConvAct(128, 128, 3, 1, rng)
        self.c10 = ConvAct(128, 128, 1, 1, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        x = self.c4(self.c3(self.c2(self.c1(x))))
        f1 = self.c5(x)
        f2 = self.c7(self.c6(f1))
        f3 = self.c10(self.c9(self.c8(f2)))
        return f1, f2, f3


class Head(Module):
    def __init__(self, cin: int, rng: np.random.Generator):
        self.hidden = ConvAct(cin, cin // 2, 3, 1, rng)
        self.out = Conv2d(cin // 2, HEAD_CHANNELS, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(self.hidden(x))


class Heads(Module):
    def __init__(self, rng: np.random.Generator):
        self.h1 = Head(WIDTHS[0], rng)
        self.h2 = Head(WIDTHS[1], rng)
        self.h3 = Head(WIDTHS[2], rng)

    def forward(self, taps: Sequence[Tensor]) -> list[Tensor]:
        return [h(t) for h, t in zip((self.h1, self.h2, self.h3), taps)]


class DetectorNet(Module):
    def __init__(self, in_channels: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.trunk = Trunk(in_channels, rng)
        self.heads = Heads(rng)
        assign_names(self)

    def forward(self, x: Tensor, heads: "Heads | None" = None):
        taps = self.trunk(x)
        return taps, (heads or self.heads)(taps)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _check_input(net: DetectorNet, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    batched = img.ndim == 4
    x = img if batched else img[None]
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W] image, got shape {img.shape}")
    if x.shape[1] != net.in_channels:
        raise ValueError(f"network expects {net.in_channels} input channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} must be divisible by 16")
    return x


def extract_features(net: DetectorNet, img: np.ndarray) -> MultiScaleFeatures:
    x = _check_input(net, img)
    taps = net.trunk(Tensor(x))
    if np.asarray(img).ndim == 3:
        return MultiScaleFeatures(*(t.data[0] for t in taps))
    return MultiScaleFeatures(*(t.data for t in taps))


def extract_batched(net: DetectorNet, images: np.ndarray, batch_size: int = 16, heads: Heads | None = None):
    """Taps (and head outputs) for a stack of images, computed in chunks."""
    taps_out: list[list[np.ndarray]] = [[], [], []]
    head_out: list[list[np.ndarray]] = [[], [], []]
    for start in range(0, len(images), batch_size):
        x = _check_input(net, images[start : start + batch_size])
        taps, outs = net(Tensor(x), heads)
        for k in range(3):
            taps_out[k].append(taps[k].data)
            head_out[k].append(outs[k].data)
    return [np.concatenate(t) for t in taps_out], [np.concatenate(o) for o in head_out]


def tap_distance(t: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Per-pixel channel L2 distance scaled by 1/sqrt(C); works on [C,h,w] or [N,C,h,w]."""
    if t.shape != s.shape:
        raise ValueError(f"feature shapes differ: {t.shape} vs {s.shape}")
    c = t.shape[-3]
    return np.sqrt(((t - s) ** 2).sum(axis=-3)) / np.sqrt(c)


def mean_feature_distance(teacher_taps: Sequence[np.ndarray], student_taps: Sequence[np.ndarray]) -> float:
    return float(np.mean([tap_distance(t, s).mean() for t, s in zip(teacher_taps, student_taps)]))


# targets and detection --------------------------------------------------------


def build_targets(boxes_per_image: Sequence[Sequence[dict]], size: tuple[int, int]):
    """Center-cell objectness and (dx, dy, log w, log h) targets per scale."""
    h, w = size
    targets = []
    for stride in STRIDES:
        gh, gw = h // stride, w // stride
        obj = np.zeros((len(boxes_per_image), 1, gh, gw))
        reg = np.zeros((len(boxes_per_image), 4, gh, gw))
        for n, boxes in enumerate(boxes_per_image):
            for b in boxes:
                cx, cy = b["x"] + b["w"] / 2, b["y"] + b["h"] / 2
                j = min(int(cx // stride), gw - 1)
                i = min(int(cy // stride), gh - 1)
                obj[n, 0, i, j] = 1.0
                reg[n, :, i, j] = (
                    cx / stride - (j + 0.5),
                    cy / stride - (i + 0.5),
                    np.log(max(b["w"], 1.0) / stride),
                    np.log(max(b["h"], 1.0) / stride),
                )
        targets.append((obj, reg))
    return targets


def visible_boxes(boxes: Sequence[dict], min_contrast: float) -> list[dict]:
    return [b for b in boxes if b.get("contrast_a", np.inf) >= min_contrast]


@dataclass
class Detection:
    score: float
    x: float
    y: float
    w: float
    h: float


@dataclass
class DetectionOutput:
    objectness: list[np.ndarray]
    offsets: list[np.ndarray]
    decoded: list[Detection] = field(default_factory=list)


def box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: -d.score):
        if all(box_iou((d.x, d.y, d.w, d.h), (k.x, k.y, k.w, k.h)) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def decode(objectness: Sequence[np.ndarray], offsets: Sequence[np.ndarray], image_size: tuple[int, int],
           conf_thresh: float = 0.5, nms_iou: float = 0.45) -> list[Detection]:
    h, w = image_size
    dets = []
    for stride, obj, off in zip(STRIDES, objectness, offsets):
        for i, j in zip(*np.nonzero(obj >= conf_thresh)):
            dx, dy, lw, lh = off[:, i, j]
            cx, cy = (j + 0.5 + dx) * stride, (i + 0.5 + dy) * stride
            bw, bh = np.exp(np.clip(lw, -5, 5)) * stride, np.exp(np.clip(lh, -5, 5)) * stride
            x0, y0 = max(0.0, cx - bw / 2), max(0.0, cy - bh / 2)
            x1, y1 = min(float(w), cx + bw / 2), min(float(h), cy + bh / 2)
            if x1 > x0 and y1 > y0:
                dets.append(Detection(float(obj[i, j]), float(x0), float(y0), float(x1 - x0), float(y1 - y0)))
    return nms(dets, nms_iou)


def detect(net: DetectorNet, img: np.ndarray, conf_thresh: float = 0.5, nms_iou: float = 0.45,
           heads: Heads | None = None) -> DetectionOutput:
    x = _check_input(net, img)
    _, outs = net(Tensor(x[:1]), heads)
    obj = [F._sigmoid(o.data[0, 0]) for o in outs]
    off = [o.data[0, 1:] for o in outs]
    return DetectionOutput(obj, off, decode(obj, off, x.shape[2:], conf_thresh, nms_iou))


def detect_batch(net: DetectorNet, images: np.ndarray, conf_thresh: float = 0.5, nms_iou: float = 0.45,
                 heads: Heads | None = None) -> list[list[Detection]]:
    _, outs = extract_batched(net, images, heads=heads)
    size = images.shape[2:]
    results = []
    for n in range(len(images)):
        obj = [F._sigmoid(o[n, 0]) for o in outs]
        off = [o[n, 1:] for o in outs]
        results.append(decode(obj, off, size, conf_thresh, nms_iou))
    return results


# teacher training ----------------------------------------------------------------


@dataclass
class TeacherConfig:
    epochs: int = 16
    lr: float = 2e-3
    batch_size: int = 8
    seed: int = 0
    pos_weight: float = 20.0
    box_weight: float = 1.0
    min_contrast: float = 0.08
    jitter: float = 0.0  # exposure and per-channel gain augmentation


def detection_loss(outs: Sequence[Tensor], targets, pos_weight: float, box_weight: float) -> Tensor:
    """Objectness BCE on every cell plus L1 box regression on positive cells, summed over scales."""
    total = None
    for out, (obj_t, reg_t) in zip(outs, targets):
        loss = F.bce_with_logits(slice_channels(out, 0, 1), obj_t, pos_weight)
        npos = max(obj_t.sum(), 1.0)
        mask = np.broadcast_to(obj_t, reg_t.shape)
        box = sum_(mul(abs_(sub(slice_channels(out, 1, HEAD_CHANNELS), reg_t)), mask))
        loss = add(loss, box * (box_weight / (4.0 * npos)))
        total = loss if total is None else add(total, loss)
    return total


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, lo:hi] = g
        return (full,)

    return _make(x.data[:, lo:hi].copy(), (x,), bw, "slice")


def photometric_jitter(x: np.ndarray, rng: np.random.Generator, amount: float) -> np.ndarray:
    """Random exposure in [1/(1+a), 1+a] and per-channel gain within +-a/3, per image."""
    n, c = x.shape[:2]
    exposure = np.exp(rng.uniform(-1.0, 1.0, size=(n, 1, 1, 1)) * np.log1p(amount))
    gain = 1.0 + rng.uniform(-amount / 3, amount / 3, size=(n, c, 1, 1))
    return np.clip(x * exposure * gain, 0.0, 1.0)


def teacher_train(images: np.ndarray, boxes: Sequence[Sequence[dict]], config: TeacherConfig | None = None,
                  history: History | None = None) -> DetectorNet:
    """Fit a modality-A detector on labeled images; the result is treated as frozen."""
    cfg = config or TeacherConfig()
    net = DetectorNet(images.shape[1], seed=cfg.seed)
    labels = [visible_boxes(b, cfg.min_contrast) for b in boxes]
    targets = build_targets(labels, images.shape[2:])
    opt = make_optimizer(net.parameters(), "adam", lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    guard = DivergenceGuard(name="teacher")
    history = history if history is not None else History(["epoch", "loss"])
    total_steps = cfg.epochs * -(-len(images) // cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in minibatches(len(images), cfg.batch_size, rng):
            opt.lr = cosine_lr(cfg.lr, step, total_steps)
            step += 1
            x = images[idx]
            if rng.random() < 0.5:
                x = x[..., ::-1]
                bt = build_targets([_flip_boxes(labels[i], images.shape[3]) for i in idx], images.shape[2:])
            else:
                bt = [(o[idx], r[idx]) for o, r in targets]
            if cfg.jitter > 0:
                x = photometric_jitter(x, rng, cfg.jitter)
            opt.zero_grad()
            _, outs = net(Tensor(np.ascontiguousarray(x)))
            loss = detection_loss(outs, bt, cfg.pos_weight, cfg.box_weight)
            backward(loss)
            opt.step()
            losses.append(loss.item())
        epoch_loss = float(np.mean(losses))
        guard.update(epoch_loss)
        history.append(epoch, epoch_loss)
        log.info("teacher epoch %d loss %.4f", epoch, epoch_loss)
    return net


def _flip_boxes(boxes: Sequence[dict], width: int) -> list[dict]:
    return [dict(b, x=width - b["x"] - b["w"]) for b in boxes]


# distillation -------------------------------------------------------------------------

MODES = ("MidOnly", "YoloOnly", "MidPlusYolo")
_MODE_ALIASES = {"mid": "MidOnly", "yolo": "YoloOnly", "midyolo": "MidPlusYolo"}


AUGMENTS = ("none", "flip", "dihedral")


def dihedral(x: np.ndarray, ops: np.ndarray) -> np.ndarray:
    """Per-image symmetry of the square: bit 0 mirrors columns, bits 1-2 count quarter turns."""
    out = np.empty_like(x)
    for i, op in enumerate(ops):
        img = x[i, :, :, ::-1] if op & 1 else x[i]
        out[i] = np.rot90(img, k=int(op) >> 1, axes=(1, 2))
    return out


@dataclass
class DistillConfig:
    mode: str = "MidOnly"
    lambda_yolo: float | None = None
    epochs: int = 30
    steps: int | None = None
    lr: float = 2e-3
    batch_size: int = 8
    seed: int = 0
    augment: str = "dihedral"

    def __post_init__(self):
        self.mode = _MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if self.augment not in AUGMENTS:
            raise ValueError(f"augment must be one of {AUGMENTS}, got {self.augment!r}")
        if self.mode == "MidPlusYolo" and self.lambda_yolo is None:
            raise ValueError("MidPlusYolo requires lambda_yolo")
        if self.mode != "MidPlusYolo" and self.lambda_yolo is not None:
            raise ValueError(f"lambda_yolo is only valid for MidPlusYolo, not {self.mode}")


@dataclass
class TeacherTargets:
    """Frozen teacher taps and head outputs for a fixed image stack."""

    taps: list[np.ndarray]
    heads: list[np.ndarray]

    @classmethod
    def compute(cls, teacher: DetectorNet, images_a: np.ndarray) -> "TeacherTargets":
        taps, heads = extract_batched(teacher, images_a)
        return cls(taps, heads)

    def subset(self, idx) -> "TeacherTargets":
        return TeacherTargets([t[idx] for t in self.taps], [h[idx] for h in self.heads])


def distill_loss(mode: str, lambda_yolo: float | None, taps: Sequence[Tensor], outs: Sequence[Tensor],
                 t_taps: Sequence[np.ndarray], t_heads: Sequence[np.ndarray]) -> Tensor:
    mid = None
    if mode in ("MidOnly", "MidPlusYolo"):
        for s, t in zip(taps, t_taps):
            term = mean(square(sub(s, t)))
            mid = term if mid is None else add(mid, term)
    head = None
    if mode in ("YoloOnly", "MidPlusYolo"):
        for s, t in zip(outs, t_heads):
            term = mean(square(sub(s, t)))
            head = term if head is None else add(head, term)
    if mode == "MidOnly":
        return mid
    if mode == "YoloOnly":
        return head
    return add(mid, head * lambda_yolo)


def distill(teacher: DetectorNet, images_a: np.ndarray, images_b: np.ndarray, config: DistillConfig | None = None,
            heldout: tuple[np.ndarray, np.ndarray] | None = None, history: History | None = None,
            student: DetectorNet | None = None, targets: TeacherTargets | None = None,
            on_epoch: Callable[[int, DetectorNet], None] | None = None) -> DetectorNet:
    """Train a student on ``images_b`` to match the frozen teacher on ``images_a``."""
    cfg = config or DistillConfig()
    if images_a.shape[0] != images_b.shape[0] or images_a.shape[2:] != images_b.shape[2:]:
        raise ValueError(f"pair stacks disagree: A {images_a.shape} vs B {images_b.shape}")
    before = teacher.param_hash()
    student = student or DetectorNet(images_b.shape[1], seed=cfg.seed + 1000)
    augment = cfg.augment if images_a.shape[2] == images_a.shape[3] or cfg.augment == "none" else "flip"
    if augment == "none":
        targets = targets or TeacherTargets.compute(teacher, images_a)
    held_targets = TeacherTargets.compute(teacher, heldout[0]) if heldout is not None else None
    # the student keeps its own heads only when they are part of the objective
    params = student.trunk.parameters() if cfg.mode == "MidOnly" else student.parameters()
    opt = make_optimizer(params, "adam", lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    guard = DivergenceGuard(name="distill")
    history = history if history is not None else History(["epoch", "train_loss", "heldout_distance"])
    n = len(images_b)
    steps_per_epoch = -(-n // cfg.batch_size)
    epochs = cfg.epochs if cfg.steps is None else max(1, -(-cfg.steps // steps_per_epoch))
    total_steps = cfg.steps if cfg.steps is not None else epochs * steps_per_epoch
    step = 0
    if held_targets is not None:
        history.append(-1, np.nan, _heldout_distance(student, heldout[1], held_targets))
    for epoch in range(epochs):
        losses = []
        for idx in minibatches(n, cfg.batch_size, rng):
            if cfg.steps is not None and step >= cfg.steps:
                break
            opt.lr = cosine_lr(cfg.lr, step, total_steps)
            opt.zero_grad()
            batch_b = images_b[idx]
            if augment == "none":
                tgt = targets.subset(idx)
            else:
                # the trunk is not equivariant, so transformed pairs get a fresh teacher pass
                ops = rng.integers(0, 8 if augment == "dihedral" else 2, size=len(idx))
                batch_a = dihedral(images_a[idx], ops)
                batch_b = dihedral(batch_b, ops)
                t_taps, t_outs = teacher(Tensor(batch_a))
                tgt = TeacherTargets([t.data for t in t_taps], [o.data for o in t_outs])
            taps, outs = student(Tensor(batch_b))
            loss = distill_loss(cfg.mode, cfg.lambda_yolo, taps, outs, tgt.taps, tgt.heads)
            backward(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        guard.update(epoch_loss)
        held = _heldout_distance(student, heldout[1], held_targets) if held_targets is not None else np.nan
        history.append(epoch, epoch_loss, held)
        log.info("distill[%s] epoch %d loss %.5f heldout %.5f", cfg.mode, epoch, epoch_loss, held)
        if on_epoch is not None:
            on_epoch(epoch, student)
    if teacher.param_hash() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return student


def _heldout_distance(student: DetectorNet, images_b: np.ndarray, held: TeacherTargets) -> float:
    taps, _ = extract_batched(student, images_b)
    return mean_feature_distance(held.taps, taps)


def heldout_distance(teacher: DetectorNet, student: DetectorNet, images_a: np.ndarray, images_b: np.ndarray) -> float:
    t_taps, _ = extract_batched(teacher, images_a)
    s_taps, _ = extract_batched(student, images_b)
    return mean_feature_distance(t_taps, s_taps)


def heldout_loss(teacher: DetectorNet, student: DetectorNet, images_a: np.ndarray, images_b: np.ndarray) -> float:
    """Per-element MSE summed over the three taps, the MidOnly objective."""
    t_taps, _ = extract_batched(teacher, images_a)
    s_taps, _ = extract_batched(student, images_b)
    return float(sum(np.mean((t - s) ** 2) for t, s in zip(t_taps, s_taps)))


def student_heads(teacher: DetectorNet, student: DetectorNet, mode: str) -> Heads:
    """Heads used at detection time: the teacher's for MidOnly, the student's own otherwise."""
    return teacher.heads if _MODE_ALIASES.get(mode, mode) == "MidOnly" else student.heads
