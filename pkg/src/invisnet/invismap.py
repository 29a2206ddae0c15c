"""Per-pixel invisibility scores from teacher/student feature distances.

A pixel's score fuses the three upsampled tap distances ``d_k`` against
per-scale ceilings ``t_k``::

    F = 1 - 1/3 * sum_k clamp((t_k - d_k) / t_k, 0, 1)

so ``F = 0`` where the modalities agree and ``F = 1`` once every distance
reaches its ceiling. ``literal=True`` selects the variant with
``min(., 0)`` in place of the clamp, which is >= 1 everywhere; it exists
only so the two readings can be compared.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import DetectorNet, MultiScaleFeatures, STRIDES, extract_batched, extract_features, tap_distance
from .core import Tensor, backward, make_optimizer
from .core import functional as F
from .core.nn import Conv2d, ConvAct, Module, assign_names
from .core.tensor import concat
from .training import DivergenceGuard, History, cosine_lr, minibatches

log = logging.getLogger(__name__)

PAPER_THRESHOLDS = (4.0, 3.5, 3.2)


@dataclass
class DistanceMaps:
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.d1, self.d2, self.d3])


@dataclass(frozen=True)
class Thresholds:
    t1: float
    t2: float
    t3: float

    def __post_init__(self):
        for name, v in (("t1", self.t1), ("t2", self.t2), ("t3", self.t3)):
            if not v > 0:
                raise ValueError(f"threshold {name} must be positive, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.t1, self.t2, self.t3])

    def write(self, path: str | Path) -> None:
        Path(path).write_text(" ".join(repr(float(v)) for v in self.as_array()) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "Thresholds":
        vals = [float(v) for v in Path(path).read_text().split()]
        if len(vals) != 3:
            raise ValueError(f"{path}: expected three thresholds, got {len(vals)}")
        return cls(*vals)


def _upsample(d: np.ndarray, factor: int) -> np.ndarray:
    return F.bilinear_upsample(Tensor(d), factor).data


def feature_distance(teacher: MultiScaleFeatures, student: MultiScaleFeatures, upsample: bool = True) -> DistanceMaps:
    """Channel-normalized L2 distance per tap, upsampled to input resolution as ``[1,H,W]``."""
    maps = []
    for stride, t, s in zip(STRIDES, teacher.taps(), student.taps()):
        d = tap_distance(t, s)
        if upsample:
            d = _upsample(d, stride)
        maps.append(d[..., None, :, :] if d.ndim == 2 else d[:, None])
    return DistanceMaps(*maps)


def fuse_score(d: DistanceMaps | np.ndarray, t: Thresholds | Sequence[float], literal: bool = False) -> np.ndarray:
    stacked = d.stack() if isinstance(d, DistanceMaps) else np.asarray(d, dtype=np.float64)
    tk = t.as_array() if isinstance(t, Thresholds) else np.asarray(t, dtype=np.float64)
    if np.any(tk <= 0):
        raise ValueError(f"thresholds must be positive, got {tk.tolist()}")
    tk = tk.reshape((3,) + (1,) * (stacked.ndim - 1))
    ratio = (tk - stacked) / tk
    if literal:
        return 1.0 - np.minimum(ratio, 0.0).mean(axis=0)
    return 1.0 - np.clip(ratio, 0.0, 1.0).mean(axis=0)


def calibrate_thresholds(day_distances: Sequence[DistanceMaps], percentile: float = 99.0) -> Thresholds:
    """Per-scale percentile of pooled day-condition distances."""
    if not day_distances:
        raise ValueError("calibrate_thresholds needs at least one distance map")
    if not 50.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (50, 100], got {percentile}")
    pooled = [np.concatenate([np.ravel(getattr(m, f"d{k}")) for m in day_distances]) for k in (1, 2, 3)]
    vals = [float(np.percentile(p, percentile)) for p in pooled]
    if any(v <= 0 for v in vals):
        raise ValueError(f"degenerate day distances: calibrated thresholds {vals} must be positive")
    return Thresholds(*vals)


def score_pair(teacher: DetectorNet, student: DetectorNet, img_a: np.ndarray, img_b: np.ndarray,
               t: Thresholds, literal: bool = False) -> np.ndarray:
    dist = feature_distance(extract_features(teacher, img_a), extract_features(student, img_b))
    return fuse_score(dist, t, literal)


def distance_batch(teacher: DetectorNet, student: DetectorNet, images_a: np.ndarray, images_b: np.ndarray) -> DistanceMaps:
    """Distance maps ``[N,1,H,W]`` for stacks of paired images."""
    t_taps, _ = extract_batched(teacher, images_a)
    s_taps, _ = extract_batched(student, images_b)
    return feature_distance(MultiScaleFeatures(*t_taps), MultiScaleFeatures(*s_taps))


def score_batch(teacher: DetectorNet, student: DetectorNet, images_a: np.ndarray, images_b: np.ndarray,
                t: Thresholds, literal: bool = False) -> tuple[np.ndarray, DistanceMaps]:
    dist = distance_batch(teacher, student, images_a, images_b)
    return fuse_score(dist, t, literal), dist


# color-only predictor ------------------------------------------------------------


class PredictorNet(Module):
    """Three-level encoder-decoder with skips, sigmoid output."""

    def __init__(self, in_channels: int = 3, width: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        w = width
        self.in_channels = in_channels
        self.e1 = ConvAct(in_channels, w, 3, 1, rng)
        self.e2 = ConvAct(w, 2 * w, 3, 2, rng)
        self.e3 = ConvAct(2 * w, 4 * w, 3, 2, rng)
        self.mid = ConvAct(4 * w, 4 * w, 3, 1, rng)
        self.d2 = ConvAct(4 * w + 2 * w, 2 * w, 3, 1, rng)
        self.d1 = ConvAct(2 * w + w, w, 3, 1, rng)
        self.out = Conv2d(w, 1, 1, 1, rng)
        assign_names(self)

    def forward(self, x: Tensor) -> Tensor:
        s1 = self.e1(x)
        s2 = self.e2(s1)
        b = self.mid(self.e3(s2))
        u2 = self.d2(concat([F.bilinear_upsample(b, 2), s2], axis=1))
        u1 = self.d1(concat([F.bilinear_upsample(u2, 2), s1], axis=1))
        return F.sigmoid(self.out(u1))


@dataclass
class PredictorConfig:
    epochs: int = 20
    lr: float = 3e-3
    batch_size: int = 8
    width: int = 8
    seed: int = 0


def train_predictor(images: np.ndarray, targets: np.ndarray, config: PredictorConfig | None = None,
                    heldout: tuple[np.ndarray, np.ndarray] | None = None,
                    history: History | None = None) -> PredictorNet:
    """L1 regression of color images ``[N,3,H,W]`` onto score maps ``[N,1,H,W]``."""
    cfg = config or PredictorConfig()
    if images.shape[0] != targets.shape[0] or images.shape[2:] != targets.shape[2:]:
        raise ValueError(f"images {images.shape} and targets {targets.shape} disagree")
    net = PredictorNet(images.shape[1], cfg.width, cfg.seed)
    opt = make_optimizer(net.parameters(), "adam", lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    guard = DivergenceGuard(name="predictor")
    history = history if history is not None else History(["epoch", "train_l1", "heldout_mae"])
    total = cfg.epochs * -(-len(images) // cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in minibatches(len(images), cfg.batch_size, rng):
            opt.lr = cosine_lr(cfg.lr, step, total)
            step += 1
            opt.zero_grad()
            loss = F.l1_loss(net(Tensor(images[idx])), targets[idx])
            backward(loss)
            opt.step()
            losses.append(loss.item())
        epoch_loss = float(np.mean(losses))
        guard.update(epoch_loss)
        mae = predictor_mae(net, *heldout) if heldout is not None else np.nan
        history.append(epoch, epoch_loss, mae)
        log.info("predictor epoch %d l1 %.4f heldout %.4f", epoch, epoch_loss, mae)
    return net


def predict_mask(net: PredictorNet, color_img: np.ndarray) -> np.ndarray:
    x = np.asarray(color_img, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1] != net.in_channels:
        raise ValueError(f"predictor expects {net.in_channels} channels, got {x.shape[1]}")
    outs = [net(Tensor(x[i : i + 16])).data for i in range(0, len(x), 16)]
    out = np.clip(np.concatenate(outs), 0.0, 1.0)
    return out[0] if single else out


def predictor_mae(net: PredictorNet, images: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.abs(predict_mask(net, images) - targets)))
