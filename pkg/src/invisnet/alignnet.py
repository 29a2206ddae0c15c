"""Learned re-rendering of a color frame at the infrared frame's object positions.

Two networks share an encoder-decoder shape. ``G_m`` reads the source image
and a target-position edge map and emits a 2-channel motion cue, starting
from a parameter-free block-matching prior; ``G`` warps the source by the
cue and adds a correction computed from source, edge map and cue. Training
targets come from two streams: cross-modal pairs warped by classical block
matching, and consecutive color frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .core import Tensor, backward, make_optimizer
from .core import functional as F
from .core.nn import Conv2d, ConvAct, Module, assign_names
from .core.ntsr import load_checkpoint, save_checkpoint
from .core.tensor import concat, mean, square, sub
from .registration import sample_bilinear
from .training import DivergenceGuard, History, minibatches

log = logging.getLogger(__name__)

STREAMS = ("cross_modal", "temporal")


# edges and block-matching flow --------------------------------------------------------


def edge_gradient(img: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude of the channel mean, one-pixel border left at zero."""
    x = np.asarray(img, dtype=np.float64)
    m = x.mean(axis=0) if x.ndim == 3 else x
    gx = np.zeros_like(m)
    gy = np.zeros_like(m)
    gx[1:-1, 1:-1] = (m[1:-1, 2:] - m[1:-1, :-2]) / 2.0
    gy[1:-1, 1:-1] = (m[2:, 1:-1] - m[:-2, 1:-1]) / 2.0
    return np.sqrt(gx * gx + gy * gy)


def edge_map(img: np.ndarray) -> np.ndarray:
    """Normalized gradient magnitude ``[1,H,W]`` in [0, 1]."""
    g = edge_gradient(img)
    peak = g.max()
    return (g / peak if peak > 0 else np.zeros_like(g))[None]


@dataclass
class FlowField:
    flow: np.ndarray  # [2,H,W] (dx, dy)
    confidence: np.ndarray  # [1,H,W]
    radius: int

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.flow[0], self.flow[1])

    def masked(self, min_conf: float) -> np.ndarray:
        """Flow with low-confidence pixels set to zero displacement."""
        return np.where(self.confidence >= min_conf, self.flow, 0.0)


def _displacements(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    d = np.stack([dx.ravel(), dy.ravel()], axis=1)
    # smallest displacement first so ties resolve toward zero motion
    order = np.lexsort((d[:, 0], d[:, 1], np.abs(d).max(axis=1), (d**2).sum(axis=1)))
    return d[order]


def dense_flow(ref: np.ndarray, tgt: np.ndarray, radius: int = 8, block: int = 7, eps: float = 1e-6) -> FlowField:
    """Exhaustive SAD block matching: ``tgt(p + flow(p))`` best matches ``ref(p)``.

    The runner-up cost excludes displacements adjacent to the winner, so
    confidence measures how distinct the match is rather than how smooth the
    cost surface is.
    """
    ref = np.asarray(ref, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if ref.ndim == 2:
        ref, tgt = ref[None], tgt[None]
    if ref.shape != tgt.shape:
        raise ValueError(f"ref {ref.shape} and tgt {tgt.shape} differ in shape")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if block < 1 or block % 2 == 0:
        raise ValueError(f"block must be a positive odd size, got {block}")
    _, h, w = ref.shape
    if block > min(h, w):
        raise ValueError(f"block {block} larger than image {h}x{w}")
    disp = _displacements(radius)
    padded = np.pad(tgt, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    windows = sliding_window_view(padded, (h, w), axis=(1, 2))  # [C, 2r+1, 2r+1, H, W]
    shifted = windows[:, disp[:, 1] + radius, disp[:, 0] + radius]  # [C, D, H, W]
    diff = np.abs(shifted - ref[:, None]).sum(axis=0)
    costs = ndimage.uniform_filter(diff, size=(1, block, block), mode="nearest") * (block * block)
    costs = np.maximum(costs, 0.0)
    best_i = np.argmin(costs, axis=0)
    best = np.take_along_axis(costs, best_i[None], axis=0)[0]
    bd = disp[best_i]  # [H,W,2]
    # mask the winner and its 8 neighbours, then take the minimum of the rest
    side = 2 * radius + 1
    lookup = np.full((side + 2, side + 2), -1)
    lookup[disp[:, 1] + radius + 1, disp[:, 0] + radius + 1] = np.arange(len(disp))
    masked = costs.copy()
    for ox in (-1, 0, 1):
        for oy in (-1, 0, 1):
            j = lookup[bd[..., 1] + oy + radius + 1, bd[..., 0] + ox + radius + 1]
            np.put_along_axis(masked, np.where(j >= 0, j, best_i)[None], np.inf, axis=0)
    second = masked.min(axis=0)
    second = np.where(np.isfinite(second), second, best)
    conf = np.clip(1.0 - (best + eps) / (second + eps), 0.0, 1.0)
    flow = np.moveaxis(bd, -1, 0).astype(np.float64)
    return FlowField(flow, conf[None], radius)


def warp_by_flow(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward warp: ``out(p) = img(p + flow(p))``, coordinates clamped to the frame."""
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = np.clip(xx + flow[0], 0, w - 1)
    ys = np.clip(yy + flow[1], 0, h - 1)
    return sample_bilinear(img, xs, ys, fill=0.0)


def residual_flow(a: np.ndarray, b: np.ndarray, radius: int = 8, block: int = 7, min_conf: float = 0.1) -> float:
    """Mean confident displacement magnitude between the edge maps of two images."""
    ff = dense_flow(edge_map(a), edge_map(b), radius, block)
    mask = ff.confidence[0] >= min_conf
    return float(ff.magnitude()[mask].mean()) if mask.any() else 0.0


# training streams -----------------------------------------------------------------------


@dataclass
class AlignTrainSample:
    source: np.ndarray  # [3,H,W]
    edge_target: np.ndarray  # [1,H,W]
    target: np.ndarray  # [3,H,W]
    stream: str
    flow_ref: np.ndarray  # [2,H,W], reference motion for the motion-cue discriminator

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"stream must be one of {STREAMS}, got {self.stream!r}")


def cross_modal_sample(sample, radius: int = 8, block: int = 7, min_conf: float = 0.3,
                       flow: FlowField | None = None) -> AlignTrainSample:
    """Stream 1 from a registered pair: color frame moved onto the infrared geometry."""
    edge_b = edge_map(sample.imgB)
    if flow is None:
        flow = dense_flow(edge_b, edge_map(sample.imgA), radius, block)
    f = flow.masked(min_conf)
    return AlignTrainSample(sample.imgA, edge_b, warp_by_flow(sample.imgA, f), "cross_modal", f)


def temporal_sample(frame, nxt, radius: int = 8, block: int = 7, min_conf: float = 0.3) -> AlignTrainSample:
    edge_next = edge_map(nxt.imgA)
    f = dense_flow(edge_next, edge_map(frame.imgA), radius, block).masked(min_conf)
    return AlignTrainSample(frame.imgA, edge_next, nxt.imgA, "temporal", f)


def make_training_streams(video: Sequence, flows: Sequence[FlowField | None] | None = None, radius: int = 8,
                          block: int = 7, min_conf: float = 0.3) -> tuple[list[AlignTrainSample], int]:
    """Both streams from consecutive registered frames; ``None`` entries are dropped frames.

    Frame t contributes to both streams only when frame t+1 exists, so each
    stream has ``frames - 1`` samples for a complete video. Returns the
    samples and the number of skipped frames.
    """
    out: list[AlignTrainSample] = []
    skipped = 0
    for t in range(len(video) - 1):
        frame, nxt = video[t], video[t + 1]
        if frame is None or nxt is None:
            skipped += 1
            continue
        out.append(cross_modal_sample(frame, radius, block, min_conf, None if flows is None else flows[t]))
        out.append(temporal_sample(frame, nxt, radius, block, min_conf))
    if skipped:
        log.info("make_training_streams: skipped %d frames without a neighbour", skipped)
    return out, skipped


# networks ----------------------------------------------------------------------------------


class EncoderDecoder(Module):
    """Three-level encoder-decoder with skip connections."""

    def __init__(self, cin: int, cout: int, width: int = 8, rng: np.random.Generator | None = None,
                 zero_out: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        w = width
        self.cin, self.cout = cin, cout
        self.e1 = ConvAct(cin, w, 3, 1, rng)
        self.e2 = ConvAct(w, 2 * w, 3, 2, rng)
        self.e3 = ConvAct(2 * w, 4 * w, 3, 2, rng)
        self.mid = ConvAct(4 * w, 4 * w, 3, 1, rng)
        self.d2 = ConvAct(6 * w, 2 * w, 3, 1, rng)
        self.d1 = ConvAct(3 * w, w, 3, 1, rng)
        self.out = Conv2d(w, cout, 3, 1, rng, zero_init=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        s1 = self.e1(x)
        s2 = self.e2(s1)
        b = self.mid(self.e3(s2))
        u2 = self.d2(concat([F.bilinear_upsample(b, 2), s2], axis=1))
        u1 = self.d1(concat([F.bilinear_upsample(u2, 2), s1], axis=1))
        return self.out(u1)


def correlation_prior(source: np.ndarray, edge_target: np.ndarray, radius: int = 8, block: int = 7,
                      min_conf: float = 0.3) -> np.ndarray:
    """Fixed (parameter-free) first layer of the motion-cue net: confident block-matching flow
    from the target edge map to the source's own edge map, in units of ``radius``."""
    src = np.asarray(source, dtype=np.float64)
    edge = np.asarray(edge_target, dtype=np.float64)
    if src.ndim == 3:
        return correlation_prior(src[None], edge[None], radius, block, min_conf)[0]
    return np.stack([dense_flow(e, edge_map(s), radius, block).masked(min_conf) for s, e in zip(src, edge)]) / radius


class Generator(Module):
    """Warps the source by the motion cue, then adds a learned correction.

    The correction branch sees (source, edge map, motion cue) concatenated.
    """

    def __init__(self, channels: int = 3, width: int = 8, rng: np.random.Generator | None = None, radius: int = 8):
        self.channels = channels
        self.radius = radius
        self.net = EncoderDecoder(channels + 3, channels, width, rng)

    def forward(self, source: Tensor, edge: Tensor, cue: Tensor) -> Tensor:
        return F.warp(source, cue * float(self.radius)) + self.net(concat([source, edge, cue], axis=1))


class MotionNet(Module):
    """Motion cue = correlation prior + learned residual (zero at initialization)."""

    def __init__(self, channels: int = 3, width: int = 8, rng: np.random.Generator | None = None,
                 radius: int = 8, block: int = 7, min_conf: float = 0.3):
        self.radius, self.block, self.min_conf = radius, block, min_conf
        self.net = EncoderDecoder(channels + 3, 2, width, rng, zero_out=True)

    def forward(self, source: Tensor, edge: Tensor, prior: np.ndarray | None = None) -> Tensor:
        if prior is None:
            prior = correlation_prior(source.data, edge.data, self.radius, self.block, self.min_conf)
        p = Tensor(prior)
        return p + self.net(concat([source, edge, p], axis=1))


class PatchDiscriminator(Module):
    """Four convolutions; one realness score per 4x4 patch."""

    def __init__(self, cin: int, width: int = 8, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c1 = ConvAct(cin, width, 3, 2, rng)
        self.c2 = ConvAct(width, 2 * width, 3, 2, rng)
        self.c3 = ConvAct(2 * width, 2 * width, 3, 1, rng)
        self.c4 = Conv2d(2 * width, 1, 3, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.c4(self.c3(self.c2(self.c1(x))))


@dataclass
class AlignConfig:
    epochs: int = 4
    lr: float = 2e-3
    batch_size: int = 8
    width: int = 8
    lambda_adv: float = 0.05
    lambda_cue: float = 1.0
    radius: int = 8
    block: int = 7
    min_conf: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.lambda_adv < 0 or self.lambda_cue < 0:
            raise ValueError(f"loss weights must be >= 0, got lambda_adv={self.lambda_adv} lambda_cue={self.lambda_cue}")


@dataclass
class AlignModels:
    G: Generator
    G_m: MotionNet
    D: PatchDiscriminator
    D_m: PatchDiscriminator
    config: AlignConfig

    @classmethod
    def init(cls, config: AlignConfig | None = None, channels: int = 3) -> "AlignModels":
        cfg = config or AlignConfig()
        rng = np.random.default_rng([cfg.seed, 5])
        models = cls(
            Generator(channels, cfg.width, rng, cfg.radius),
            MotionNet(channels, cfg.width, rng, cfg.radius, cfg.block, cfg.min_conf),
            PatchDiscriminator(channels, cfg.width, rng),
            PatchDiscriminator(2, cfg.width, rng),
            cfg,
        )
        for m in models.nets().values():
            assign_names(m)
        return models

    def nets(self) -> dict[str, Module]:
        return {"G": self.G, "G_m": self.G_m, "D": self.D, "D_m": self.D_m}

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {k: str(v) for k, v in vars(self.config).items()}
        for name, net in self.nets().items():
            save_checkpoint(d / f"{name}.ntsr", net.state_dict(), dict(meta, network=name))

    @classmethod
    def load(cls, directory: str | Path, config: AlignConfig | None = None) -> "AlignModels":
        d = Path(directory)
        _, meta = load_checkpoint(d / "G.ntsr")
        if config is None:
            types = {k: type(v) for k, v in vars(AlignConfig()).items()}
            config = AlignConfig(**{k: types[k](meta[k]) for k in types if k in meta})
        models = cls.init(config)
        for name, net in models.nets().items():
            state, _ = load_checkpoint(d / f"{name}.ntsr")
            net.load_state_dict(state)
        for name, net in models.nets().items():
            for pname, p in net.named_parameters():
                if not np.all(np.isfinite(p.data)):
                    raise ValueError(f"{name}.{pname} contains non-finite values")
        return models


def _lsgan(scores: Tensor, real: bool) -> Tensor:
    return mean(square(sub(scores, 1.0 if real else 0.0)))


def _stack(samples: Sequence[AlignTrainSample], idx) -> tuple[np.ndarray, ...]:
    sel = [samples[i] for i in idx]
    return (
        np.stack([s.source for s in sel]),
        np.stack([s.edge_target for s in sel]),
        np.stack([s.target for s in sel]),
        np.stack([s.flow_ref for s in sel]),
    )


def train_align(samples: Sequence[AlignTrainSample], config: AlignConfig | None = None,
                history: History | None = None) -> AlignModels:
    """Alternate stream-1 and stream-2 batches.

    Generator loss: L1 to the target, plus ``lambda_cue`` x L1 between the
    motion cue and the block-matching reference (in units of the search
    radius), plus ``lambda_adv`` x LSGAN terms from both discriminators.
    """
    cfg = config or AlignConfig()
    by_stream = {s: [x for x in samples if x.stream == s] for s in STREAMS}
    for s, items in by_stream.items():
        if not items:
            raise ValueError(f"train_align needs at least one {s} sample")
    models = AlignModels.init(cfg, samples[0].source.shape[0])
    adversarial = cfg.lambda_adv > 0
    opt_g = make_optimizer(models.G.parameters() + models.G_m.parameters(), "adam", lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = make_optimizer(models.D.parameters() + models.D_m.parameters(), "adam", lr=cfg.lr, betas=(0.5, 0.999))
    rng = np.random.default_rng([cfg.seed, 9])
    guard = DivergenceGuard(name="train_align")
    history = history if history is not None else History(["epoch", "l1", "cue_l1", "adv_g", "d", "d_m"])
    for epoch in range(cfg.epochs):
        batches = {s: list(minibatches(len(by_stream[s]), cfg.batch_size, rng)) for s in STREAMS}
        n_iter = max(len(b) for b in batches.values())
        sums = np.zeros(5)
        count = 0
        for it in range(n_iter):
            for s in STREAMS:
                idx = batches[s][it % len(batches[s])]
                src, edge, tgt, fref = (Tensor(a) for a in _stack(by_stream[s], idx))
                opt_g.zero_grad()
                cue = models.G_m(src, edge, fref.data / cfg.radius)
                pred = models.G(src, edge, cue)
                l1 = F.l1_loss(pred, tgt.data)
                cue_l1 = F.l1_loss(cue, fref.data / cfg.radius)
                loss = l1 + cue_l1 * cfg.lambda_cue if cfg.lambda_cue > 0 else l1
                adv = 0.0
                if adversarial:
                    adv_t = _lsgan(models.D(pred), True) + _lsgan(models.D_m(cue), True)
                    loss = loss + adv_t * cfg.lambda_adv
                    adv = adv_t.item()
                backward(loss)
                opt_g.step()
                d_val = dm_val = 0.0
                if adversarial:
                    opt_d.zero_grad()
                    d_loss = _lsgan(models.D(tgt), True) + _lsgan(models.D(pred.detach()), False)
                    dm_loss = _lsgan(models.D_m(Tensor(fref.data / cfg.radius)), True) + _lsgan(models.D_m(cue.detach()), False)
                    backward((d_loss + dm_loss) * 0.5)
                    opt_d.step()
                    d_val, dm_val = d_loss.item(), dm_loss.item()
                sums += (l1.item(), cue_l1.item(), adv, d_val, dm_val)
                count += 1
        avg = sums / count
        guard.update(float(avg[0] + cfg.lambda_cue * avg[1] + cfg.lambda_adv * avg[2]))
        history.append(epoch, *avg)
        log.info("train_align epoch %d l1 %.4f cue %.4f adv %.4f d %.4f d_m %.4f", epoch, *avg)
    return models


def align(source: np.ndarray, edge_target: np.ndarray, models: AlignModels) -> np.ndarray:
    """Re-render ``source`` ([C,H,W] or batched) at the geometry described by ``edge_target``."""
    src = np.asarray(source, dtype=np.float64)
    edge = np.asarray(edge_target, dtype=np.float64)
    single = src.ndim == 3
    if single:
        src, edge = src[None], edge[None]
    if src.shape[1] != models.G.channels:
        raise ValueError(f"alignment models expect {models.G.channels} source channels, got {src.shape[1]}")
    if edge.shape[1] != 1 or edge.shape[2:] != src.shape[2:]:
        raise ValueError(f"edge map must be [1,H,W] matching the source, got {edge.shape[1:]}")
    if src.shape[2] % 4 or src.shape[3] % 4:
        raise ValueError(f"image size {src.shape[2:]} must be divisible by 4")
    outs = []
    for i in range(0, len(src), 16):
        s, e = Tensor(src[i : i + 16]), Tensor(edge[i : i + 16])
        outs.append(models.G(s, e, models.G_m(s, e)).data)
    out = np.concatenate(outs)
    return out[0] if single else out


def align_pair(sample, models: AlignModels):
    """Replace the color frame of a registered pair with its aligned rendering."""
    return replace(sample, imgA=np.clip(align(sample.imgA, edge_map(sample.imgB), models), 0.0, 1.0))


def align_images(images_a: np.ndarray, images_b: np.ndarray, models: AlignModels) -> np.ndarray:
    edges = np.stack([edge_map(b) for b in images_b])
    return np.clip(align(images_a, edges, models), 0.0, 1.0)
