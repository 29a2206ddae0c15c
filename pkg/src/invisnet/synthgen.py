"""Synthetic two-modality scenes.

Modality A is a 3-channel reflectance image lit by a scene luminance and
degraded by fog and glare. Modality B is a 1-channel temperature image that
ignores lighting entirely. Object reflectance and temperature are drawn
independently, so an object can be plain in one modality and obvious in the
other; the ground-truth invisibility mask marks exactly those pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .core import ntsr
from .registration import Homography, warp

SHAPES = ("rect", "disc", "triangle")
CONDITIONS = ("day", "dawn", "dusk", "night", "fog", "glare")
_SPLIT_CODES = {"train": 1, "val": 2}


@dataclass
class SceneConfig:
    height: int = 96
    width: int = 96
    object_count: tuple[int, int] = (3, 6)
    size_range: tuple[float, float] = (9.0, 22.0)
    aspect_range: tuple[float, float] = (0.6, 1.6)
    reflectance_range: tuple[float, float] = (0.0, 1.0)
    temperature_range: tuple[float, float] = (0.0, 1.0)
    bg_reflectance: tuple[float, float] = (0.25, 0.55)
    bg_temperature: tuple[float, float] = (0.15, 0.30)
    texture_sigma: float = 3.0
    mover_fraction: float = 0.3
    max_speed: float = 3.0
    edge_margin: int = 6

    def __post_init__(self):
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ValueError(f"object_count range invalid: {self.object_count}")
        if self.size_range[0] < 4:
            raise ValueError("object sizes must be at least 4 px")


@dataclass
class RenderConfig:
    sigma_a: float = 0.01
    sigma_b: float = 0.01
    tau_vis: float = 0.08
    haze: float = 0.7
    ring: int = 3
    # per-label luminance/fog/glare ranges
    day: tuple[float, float] = (0.8, 1.0)
    dawn: tuple[float, float] = (0.3, 0.6)
    dusk: tuple[float, float] = (0.3, 0.6)
    night: tuple[float, float] = (0.0, 0.15)
    fog_luminance: tuple[float, float] = (0.5, 0.9)
    fog_density: tuple[float, float] = (0.5, 0.9)
    glare_luminance: tuple[float, float] = (0.3, 0.6)
    glare_radius: tuple[float, float] = (10.0, 24.0)
    glare_intensity: tuple[float, float] = (0.6, 1.0)


@dataclass
class MisalignConfig:
    corner_jitter: float = 4.0
    max_object_shift: float = 6.0
    max_temporal: float = 1.0


@dataclass(frozen=True)
class SceneObject:
    shape: str
    center: tuple[float, float]
    size: float
    aspect: float
    reflectance: float
    temperature: float
    velocity: tuple[float, float]
    tint: tuple[float, float, float]
    mover: bool = False


@dataclass(eq=False)
class Scene:
    seed: int
    height: int
    width: int
    texture: np.ndarray
    bg_reflectance: tuple[float, float]
    bg_temperature: tuple[float, float]
    objects: list[SceneObject]

    def same_as(self, other: "Scene") -> bool:
        return (
            self.seed == other.seed
            and self.objects == other.objects
            and np.array_equal(self.texture, other.texture)
            and self.bg_reflectance == other.bg_reflectance
            and self.bg_temperature == other.bg_temperature
        )

    def reflectance_field(self) -> np.ndarray:
        lo, hi = self.bg_reflectance
        return lo + (hi - lo) * self.texture

    def temperature_field(self) -> np.ndarray:
        lo, hi = self.bg_temperature
        return lo + (hi - lo) * self.texture

    def moved(self, shifts: dict[int, tuple[float, float]] | None = None, dt: float = 0.0) -> "Scene":
        """Scene with object i displaced by ``shifts[i] + velocity_i * dt``, centers kept in bounds."""
        shifts = shifts or {}
        objs = []
        for i, o in enumerate(self.objects):
            sx, sy = shifts.get(i, (0.0, 0.0))
            cx = o.center[0] + sx + o.velocity[0] * dt
            cy = o.center[1] + sy + o.velocity[1] * dt
            cx = _reflect(cx, self.width - 1)
            cy = _reflect(cy, self.height - 1)
            objs.append(replace(o, center=(cx, cy)))
        return replace(self, objects=objs)


def _reflect(v: float, hi: float) -> float:
    if v < 0:
        v = -v
    if v > hi:
        v = 2 * hi - v
    return float(min(max(v, 0.0), hi))


@dataclass
class LightingCondition:
    label: str
    luminance: float
    fog_density: float = 0.0
    glare: dict | None = None

    @classmethod
    def clear(cls, luminance: float, label: str = "custom") -> "LightingCondition":
        return cls(label=label, luminance=luminance)


@dataclass
class MisalignSpec:
    homography: np.ndarray | None = None
    object_shifts: dict[int, tuple[float, float]] = field(default_factory=dict)
    temporal: float = 0.0

    @classmethod
    def none(cls) -> "MisalignSpec":
        return cls()

    def is_identity(self) -> bool:
        h_id = self.homography is None or np.allclose(self.homography, np.eye(3), atol=0, rtol=0)
        return h_id and not any(self.object_shifts.values()) and self.temporal == 0.0

    def to_json(self) -> dict:
        return {
            "homography": None if self.homography is None else np.asarray(self.homography).tolist(),
            "object_shifts": {str(k): list(v) for k, v in self.object_shifts.items()},
            "temporal": self.temporal,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MisalignSpec":
        h = d.get("homography")
        return cls(
            homography=None if h is None else np.asarray(h, dtype=float),
            object_shifts={int(k): tuple(v) for k, v in d.get("object_shifts", {}).items()},
            temporal=float(d.get("temporal", 0.0)),
        )


@dataclass(eq=False)
class PairSample:
    imgA: np.ndarray
    imgB: np.ndarray
    gt_invisibility: np.ndarray
    boxes: list[dict]
    misalign: MisalignSpec
    lighting: LightingCondition
    seed: int = 0
    object_masks: np.ndarray | None = None


@dataclass
class DatasetManifest:
    seed: int
    count: int
    split: str
    lighting: list[str]
    files: list[str]
    sample_seeds: list[int]
    config: dict

    def write(self, path: str | Path) -> None:
        lines = [
            "# invisnet dataset manifest",
            f"seed = {self.seed}",
            f"count = {self.count}",
            f"split = {self.split}",
            f"config = {json.dumps(self.config, sort_keys=True)}",
            "[samples]",
        ]
        for i, (lab, f, s) in enumerate(zip(self.lighting, self.files, self.sample_seeds)):
            lines.append(f"{i} seed={s} lighting={lab} files={f}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        head: dict[str, str] = {}
        lighting, files, seeds = [], [], []
        in_samples = False
        for line in Path(path).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            if line.strip() == "[samples]":
                in_samples = True
                continue
            if in_samples:
                fields = dict(tok.split("=", 1) for tok in line.split()[1:])
                seeds.append(int(fields["seed"]))
                lighting.append(fields["lighting"])
                files.append(fields["files"])
            else:
                key, _, value = line.partition("=")
                head[key.strip()] = value.strip()
        return cls(
            seed=int(head["seed"]),
            count=int(head["count"]),
            split=head["split"],
            lighting=lighting,
            files=files,
            sample_seeds=seeds,
            config=json.loads(head["config"]),
        )


# scene sampling ----------------------------------------------------------------


def sample_seed(seed: int, split: str, index: int) -> int:
    """Fixed splitting rule giving each sample an independent seed."""
    ss = np.random.SeedSequence([int(seed), _SPLIT_CODES.get(split, 3), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma, mode="reflect")
    noise = (noise - noise.min()) / max(np.ptp(noise), 1e-12)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1))
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    tex = 0.7 * noise + 0.3 * ramp
    return (tex - tex.min()) / max(np.ptp(tex), 1e-12)


def generate_scene(seed: int, config: SceneConfig | None = None) -> Scene:
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    texture = _texture(rng, h, w, cfg.texture_sigma)
    n = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    objects: list[SceneObject] = []
    boxes: list[tuple[float, float, float, float]] = []
    for _ in range(n):
        for attempt in range(30):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            size = float(rng.uniform(*cfg.size_range))
            aspect = float(rng.uniform(*cfg.aspect_range)) if shape == "rect" else 1.0
            m = cfg.edge_margin
            cx = float(rng.uniform(m, w - 1 - m))
            cy = float(rng.uniform(m, h - 1 - m))
            cand = _shape_extent(shape, (cx, cy), size, aspect)
            if attempt == 29 or all(_iou(cand, b) < 0.1 for b in boxes):
                break
        mover = bool(rng.random() < cfg.mover_fraction)
        speed = float(rng.uniform(0.5, cfg.max_speed)) if mover else 0.0
        ang = rng.uniform(0, 2 * np.pi)
        # mostly horizontal motion
        vel = (speed * math.cos(ang), 0.4 * speed * math.sin(ang))
        tint = rng.uniform(0.75, 1.25, size=3)
        tint = tint / tint.mean()
        objects.append(
            SceneObject(
                shape=shape,
                center=(cx, cy),
                size=size,
                aspect=aspect,
                reflectance=float(rng.uniform(*cfg.reflectance_range)),
                temperature=float(rng.uniform(*cfg.temperature_range)),
                velocity=vel,
                tint=tuple(float(t) for t in tint),
                mover=mover,
            )
        )
        boxes.append(cand)
    return Scene(seed, h, w, texture, tuple(cfg.bg_reflectance), tuple(cfg.bg_temperature), objects)


def _shape_extent(shape: str, center, size: float, aspect: float) -> tuple[float, float, float, float]:
    cx, cy = center
    half_w = size / 2
    half_h = size * aspect / 2 if shape == "rect" else size / 2
    return (cx - half_w, cy - half_h, 2 * half_w, 2 * half_h)


def _iou(a, b) -> float:
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax2, bx2) - max(a[0], b[0]))
    ih = max(0.0, min(ay2, by2) - max(a[1], b[1]))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def shape_support(obj: SceneObject, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cx, cy = obj.center
    half = obj.size / 2
    if obj.shape == "rect":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half * obj.aspect)
    if obj.shape == "disc":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    # isosceles triangle, apex up
    top = cy - half
    inside_y = (yy >= top) & (yy <= cy + half)
    halfwidth = (yy - top) / 2.0
    return inside_y & (np.abs(xx - cx) <= halfwidth)


def label_map(scene: Scene) -> np.ndarray:
    """Index of the topmost object at each pixel, -1 for background."""
    labels = np.full((scene.height, scene.width), -1, dtype=np.int64)
    for i, obj in enumerate(scene.objects):
        labels[shape_support(obj, scene.height, scene.width)] = i
    return labels


def object_box(obj: SceneObject, h: int, w: int) -> dict:
    x, y, bw, bh = _shape_extent(obj.shape, obj.center, obj.size, obj.aspect)
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(w), x + bw), min(float(h), y + bh)
    return {"class": "object", "x": x0, "y": y0, "w": x1 - x0, "h": y1 - y0}


# lighting ------------------------------------------------------------------------


def sample_lighting(label: str, rng: np.random.Generator, cfg: RenderConfig | None = None,
                    height: int = 96, width: int = 96) -> LightingCondition:
    cfg = cfg or RenderConfig()
    if label in ("day", "dawn", "dusk", "night"):
        return LightingCondition(label, float(rng.uniform(*getattr(cfg, label))))
    if label == "fog":
        return LightingCondition(label, float(rng.uniform(*cfg.fog_luminance)), float(rng.uniform(*cfg.fog_density)))
    if label == "glare":
        glare = {
            "center": [float(rng.uniform(0, width - 1)), float(rng.uniform(0, height - 1))],
            "radius": float(rng.uniform(*cfg.glare_radius)),
            "intensity": float(rng.uniform(*cfg.glare_intensity)),
        }
        return LightingCondition(label, float(rng.uniform(*cfg.glare_luminance)), 0.0, glare)
    raise ValueError(f"unknown lighting label {label!r}; expected one of {CONDITIONS}")


def _apply_lighting(refl: np.ndarray, lighting: LightingCondition, cfg: RenderConfig) -> np.ndarray:
    """Noise-free modality-A intensities from per-channel reflectance [3,H,W]."""
    _, h, w = refl.shape
    img = lighting.luminance * refl
    if lighting.fog_density > 0:
        depth = 1.0 - 0.5 * np.arange(h) / max(h - 1, 1)
        wgt = (lighting.fog_density * depth)[None, :, None]
        img = (1.0 - wgt) * img + wgt * (cfg.haze * lighting.luminance)
    if lighting.glare:
        gx, gy = lighting.glare["center"]
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = (xx - gx) ** 2 + (yy - gy) ** 2
        img = img + lighting.glare["intensity"] * np.exp(-r2 / (2 * lighting.glare["radius"] ** 2))[None]
    return np.clip(img, 0.0, 1.0)


# rendering --------------------------------------------------------------------------


def _fields(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    labels = label_map(scene)
    refl = np.repeat(scene.reflectance_field()[None], 3, axis=0)
    temp = scene.temperature_field().copy()
    for i, obj in enumerate(scene.objects):
        m = labels == i
        if not m.any():
            continue
        for c in range(3):
            refl[c][m] = obj.reflectance * obj.tint[c]
        temp[m] = obj.temperature
    return labels, refl, temp


def clean_modalities(scene: Scene, lighting: LightingCondition, cfg: RenderConfig | None = None):
    """Noise-free (imgA [3,H,W], imgB [H,W], labels) with no misalignment."""
    cfg = cfg or RenderConfig()
    labels, refl, temp = _fields(scene)
    return _apply_lighting(refl, lighting, cfg), temp, labels


def object_contrasts(scene: Scene, lighting: LightingCondition, cfg: RenderConfig | None = None) -> list[tuple[float, float]]:
    """Per-object (A contrast, B contrast) against the local background ring."""
    cfg = cfg or RenderConfig()
    img_a, img_b, labels = clean_modalities(scene, lighting, cfg)
    lum = img_a.mean(axis=0)
    bg = labels < 0
    out = []
    struct = ndimage.generate_binary_structure(2, 2)
    for i in range(len(scene.objects)):
        m = labels == i
        if not m.any():
            out.append((0.0, 0.0))
            continue
        ring = ndimage.binary_dilation(m, struct, iterations=cfg.ring) & bg
        if not ring.any():
            ring = bg
        if ring.any():
            ca = abs(lum[m].mean() - lum[ring].mean())
            cb = abs(img_b[m].mean() - img_b[ring].mean())
        else:
            ca, cb = abs(lum[m].mean()), abs(img_b[m].mean())
        out.append((float(ca), float(cb)))
    return out


def gt_invisibility(scene: Scene, lighting: LightingCondition, cfg: RenderConfig | None = None) -> np.ndarray:
    cfg = cfg or RenderConfig()
    labels = label_map(scene)
    mask = np.zeros(labels.shape, dtype=np.uint8)
    for i, (ca, cb) in enumerate(object_contrasts(scene, lighting, cfg)):
        if ca < cfg.tau_vis and cb >= cfg.tau_vis:
            mask[labels == i] = 1
    return mask


def render_pair(scene: Scene, lighting: LightingCondition, misalign: MisalignSpec | None = None,
                cfg: RenderConfig | None = None, noise_seed: int | None = None) -> PairSample:
    cfg = cfg or RenderConfig()
    misalign = misalign or MisalignSpec.none()
    seed = scene.seed if noise_seed is None else noise_seed
    # sensor noise differs between captures under different lighting
    light_key = int(round(lighting.luminance * 1e6)) + int(round(lighting.fog_density * 1e3)) * 7919
    rng_a = np.random.default_rng([seed, 11, light_key])
    rng_b = np.random.default_rng([seed, 13, light_key])
    clean_a, _, labels = clean_modalities(scene, lighting, cfg)
    img_a = np.clip(clean_a + rng_a.normal(0.0, cfg.sigma_a, size=clean_a.shape), 0.0, 1.0)

    b_scene = scene.moved(misalign.object_shifts, misalign.temporal)
    _, _, temp_b = _fields(b_scene)
    if misalign.homography is not None:
        fill = float(np.mean(b_scene.temperature_field()))
        temp_b = warp(temp_b[None], Homography(misalign.homography), fill=fill)[0]
    img_b = np.clip(temp_b + rng_b.normal(0.0, cfg.sigma_b, size=temp_b.shape), 0.0, 1.0)[None]

    boxes = []
    for o, (ca, cb) in zip(scene.objects, object_contrasts(scene, lighting, cfg)):
        box = object_box(o, scene.height, scene.width)
        box.update(contrast_a=ca, contrast_b=cb)
        boxes.append(box)
    masks = np.stack([labels == i for i in range(len(scene.objects))]) if scene.objects else np.zeros((0,) + labels.shape, bool)
    return PairSample(
        imgA=img_a,
        imgB=img_b,
        gt_invisibility=gt_invisibility(scene, lighting, cfg),
        boxes=boxes,
        misalign=misalign,
        lighting=lighting,
        seed=scene.seed,
        object_masks=masks,
    )


def render_a_at_b(sample: PairSample, scene_cfg: SceneConfig | None = None,
                  cfg: RenderConfig | None = None) -> np.ndarray:
    """Modality A as it would look from B's object positions (ground truth for alignment)."""
    cfg = cfg or RenderConfig()
    scene = generate_scene(sample.seed, scene_cfg)
    moved = scene.moved(sample.misalign.object_shifts, sample.misalign.temporal)
    clean_a, _, _ = clean_modalities(moved, sample.lighting, cfg)
    light_key = int(round(sample.lighting.luminance * 1e6)) + int(round(sample.lighting.fog_density * 1e3)) * 7919
    rng = np.random.default_rng([sample.seed, 17, light_key])
    return np.clip(clean_a + rng.normal(0.0, cfg.sigma_a, size=clean_a.shape), 0.0, 1.0)


def rig_homography(seed: int, height: int = 96, width: int = 96, jitter: float = 4.0) -> np.ndarray:
    """Random homography moving each image corner by at most ``jitter`` px."""
    from .registration import estimate_homography

    rng = np.random.default_rng([seed, 101])
    corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], float)
    ang = rng.uniform(0, 2 * np.pi, size=4)
    rad = jitter * np.sqrt(rng.uniform(0, 1, size=4))
    moved = corners + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    return estimate_homography(np.hstack([corners, moved])).matrix


def sample_misalign(rng: np.random.Generator, scene: Scene, cfg: MisalignConfig | None = None,
                    homography: np.ndarray | None = None) -> MisalignSpec:
    cfg = cfg or MisalignConfig()
    shifts = {}
    for i, o in enumerate(scene.objects):
        if o.mover:
            ang = rng.uniform(0, 2 * np.pi)
            mag = rng.uniform(0, cfg.max_object_shift)
            shifts[i] = (float(mag * np.cos(ang)), float(0.4 * mag * np.sin(ang)))
    return MisalignSpec(homography=homography, object_shifts=shifts, temporal=float(rng.uniform(0, cfg.max_temporal)))


def render_video(scene: Scene, lighting: LightingCondition, n_frames: int, misalign: MisalignSpec | None = None,
                 cfg: RenderConfig | None = None) -> list[PairSample]:
    """Consecutive frames: objects advance by their velocity each frame."""
    frames = []
    for t in range(n_frames):
        frame_scene = scene.moved(dt=float(t))
        frames.append(render_pair(frame_scene, lighting, misalign, cfg, noise_seed=scene.seed * 1000 + t))
    return frames


# datasets ----------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    count: int
    conditions: Sequence[str] = ("day",)
    misaligned: bool = False


def generate_sample(seed: int, label: str, scene_cfg: SceneConfig, render_cfg: RenderConfig,
                    misalign_cfg: MisalignConfig | None = None, rig: np.ndarray | None = None) -> PairSample:
    scene = generate_scene(seed, scene_cfg)
    rng = np.random.default_rng([seed, 7])
    lighting = sample_lighting(label, rng, render_cfg, scene_cfg.height, scene_cfg.width)
    misalign = sample_misalign(rng, scene, misalign_cfg, rig) if misalign_cfg is not None else MisalignSpec.none()
    return render_pair(scene, lighting, misalign, render_cfg)


def generate_dataset(seed: int, spec: DatasetSpec, split: str = "train", scene_cfg: SceneConfig | None = None,
                     render_cfg: RenderConfig | None = None, misalign_cfg: MisalignConfig | None = None,
                     rig: np.ndarray | None = None) -> tuple[list[PairSample], DatasetManifest]:
    scene_cfg = scene_cfg or SceneConfig()
    render_cfg = render_cfg or RenderConfig()
    if spec.misaligned and misalign_cfg is None:
        misalign_cfg = MisalignConfig()
    samples, labels, seeds = [], [], []
    for i in range(spec.count):
        s = sample_seed(seed, split, i)
        label = spec.conditions[i % len(spec.conditions)]
        samples.append(generate_sample(s, label, scene_cfg, render_cfg, misalign_cfg if spec.misaligned else None, rig))
        labels.append(label)
        seeds.append(s)
    manifest = DatasetManifest(
        seed=seed,
        count=spec.count,
        split=split,
        lighting=labels,
        files=[f"{split}_{i:05d}" for i in range(spec.count)],
        sample_seeds=seeds,
        config={
            "scene": asdict(scene_cfg),
            "render": asdict(render_cfg),
            "misalign": asdict(misalign_cfg) if spec.misaligned and misalign_cfg else None,
            "conditions": list(spec.conditions),
            "rig": None if rig is None else np.asarray(rig).tolist(),
        },
    )
    return samples, manifest


def _sample_meta(sample: PairSample) -> dict:
    return {
        "seed": sample.seed,
        "boxes": sample.boxes,
        "lighting": asdict(sample.lighting),
        "misalign": sample.misalign.to_json(),
    }


def save_dataset(directory: str | Path, samples: Sequence[PairSample], manifest: DatasetManifest,
                 pixmaps: bool = True) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stem, s in zip(manifest.files, samples):
        ntsr.save(directory / f"{stem}_A.ntsr", s.imgA)
        ntsr.save(directory / f"{stem}_B.ntsr", s.imgB)
        ntsr.save(directory / f"{stem}_mask.ntsr", s.gt_invisibility.astype(np.float64))
        if s.object_masks is not None:
            ntsr.save(directory / f"{stem}_objects.ntsr", s.object_masks.astype(np.float64))
        (directory / f"{stem}.json").write_text(json.dumps(_sample_meta(s), sort_keys=True))
        if pixmaps:
            write_pixmap(directory / f"{stem}_A.ppm", s.imgA)
            write_pixmap(directory / f"{stem}_B.pgm", s.imgB)
    path = directory / "manifest.txt"
    manifest.write(path)
    return path


def load_dataset(directory: str | Path) -> tuple[list[PairSample], DatasetManifest]:
    directory = Path(directory)
    manifest = DatasetManifest.read(directory / "manifest.txt")
    samples = []
    for stem in manifest.files:
        meta = json.loads((directory / f"{stem}.json").read_text())
        obj_path = directory / f"{stem}_objects.ntsr"
        samples.append(
            PairSample(
                imgA=ntsr.load(directory / f"{stem}_A.ntsr"),
                imgB=ntsr.load(directory / f"{stem}_B.ntsr"),
                gt_invisibility=ntsr.load(directory / f"{stem}_mask.ntsr").astype(np.uint8),
                boxes=meta["boxes"],
                misalign=MisalignSpec.from_json(meta["misalign"]),
                lighting=LightingCondition(**meta["lighting"]),
                seed=int(meta["seed"]),
                object_masks=ntsr.load(obj_path).astype(bool) if obj_path.exists() else None,
            )
        )
    return samples, manifest


def regenerate(manifest: DatasetManifest) -> list[PairSample]:
    cfg = manifest.config
    scene_cfg = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["scene"].items()})
    render_cfg = RenderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["render"].items()})
    misalign_cfg = MisalignConfig(**cfg["misalign"]) if cfg.get("misalign") else None
    rig = None if cfg.get("rig") is None else np.asarray(cfg["rig"])
    return [
        generate_sample(s, lab, scene_cfg, render_cfg, misalign_cfg, rig)
        for s, lab in zip(manifest.sample_seeds, manifest.lighting)
    ]


def write_pixmap(path: str | Path, img: np.ndarray) -> None:
    """8-bit binary PPM (3 channels) or PGM (1 channel) for inspection."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    c, h, w = q.shape
    if c == 3:
        header, body = b"P6", q.transpose(1, 2, 0).tobytes()
    elif c == 1:
        header, body = b"P5", q[0].tobytes()
    else:
        raise ValueError(f"pixmap needs 1 or 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(header + f"\n{w} {h}\n255\n".encode() + body)


def read_pixmap(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval_line, body = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    maxval = int(maxval_line)
    arr = np.frombuffer(body, dtype=np.uint8)
    if magic == b"P6":
        return arr.reshape(h, w, 3).transpose(2, 0, 1) / float(maxval)
    return arr.reshape(1, h, w) / float(maxval)


def iter_conditions(labels: Iterable[str]) -> list[str]:
    bad = [lab for lab in labels if lab not in CONDITIONS]
    if bad:
        raise ValueError(f"unknown lighting labels {bad}")
    return list(labels)
