"""Run configuration: an INI file with one section per module.

Every knob has a default, so an empty file is a valid config. Unknown
sections or keys, unparsable values and out-of-range values are rejected
with a ``section.key`` path.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

STORE_ENV = "INVISNET_STORE"


class ConfigError(ValueError):
    pass


def _opt(default, doc: str, check: Callable[[Any], bool] | None = None, rule: str = ""):
    return field(default=default, metadata={"doc": doc, "check": check, "rule": rule})


def _pos(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit(v) -> bool:
    return 0 <= v <= 1


@dataclass
class RunSection:
    seed: int = _opt(0, "global seed; every stage derives its own stream from it")
    store: str = _opt("runs", "artifact store root (overridden by $INVISNET_STORE)")
    name: str = _opt("default", "run directory name under the store root")


@dataclass
class SynthgenSection:
    height: int = _opt(96, "image height in px", lambda v: v > 0 and v % 16 == 0, "positive multiple of 16")
    width: int = _opt(96, "image width in px", lambda v: v > 0 and v % 16 == 0, "positive multiple of 16")
    train_pairs: int = _opt(400, "aligned day pairs for distillation", _pos, "> 0")
    heldout_pairs: int = _opt(40, "held-out aligned day pairs", _pos, "> 0")
    teacher_pairs: int = _opt(400, "labeled modality-A images for the teacher", _pos, "> 0")
    eval_pairs: int = _opt(40, "evaluation pairs per lighting condition", _pos, "> 0")
    sweep_pool: int = _opt(800, "day pairs available to the size sweep", _pos, "> 0")
    align_videos: int = _opt(24, "weakly-aligned videos for alignment training", _pos, "> 0")
    align_frames: int = _opt(5, "frames per alignment video", lambda v: v >= 2, ">= 2")
    weak_pairs: int = _opt(40, "weakly-aligned held-out pairs for the alignment ablation", _pos, "> 0")
    predictor_pairs: int = _opt(48, "mixed-condition pairs per split for the color-only predictor", _pos, "> 0")
    object_min: int = _opt(3, "minimum objects per scene", _pos, "> 0")
    object_max: int = _opt(6, "maximum objects per scene", _pos, "> 0")
    mover_fraction: float = _opt(0.3, "fraction of objects that move", _unit, "in [0, 1]")
    sigma_a: float = _opt(0.01, "modality-A sensor noise", _nonneg, ">= 0")
    sigma_b: float = _opt(0.01, "modality-B sensor noise", _nonneg, ">= 0")
    tau_vis: float = _opt(0.08, "visibility contrast threshold", _pos, "> 0")
    corner_jitter: float = _opt(4.0, "rig homography corner displacement bound (px)", _nonneg, ">= 0")
    max_object_shift: float = _opt(6.0, "per-object extra shift bound for movers (px)", _nonneg, ">= 0")
    max_temporal: float = _opt(1.0, "temporal offset bound (frames)", _nonneg, ">= 0")


@dataclass
class RegistrationSection:
    board_rows: int = _opt(6, "checkerboard corner rows", lambda v: v >= 2, ">= 2")
    board_cols: int = _opt(8, "checkerboard corner columns", lambda v: v >= 2, ">= 2")
    corner_noise: float = _opt(0.2, "corner localization noise (px)", _nonneg, ">= 0")


@dataclass
class AlignnetSection:
    epochs: int = _opt(4, "alignment training epochs", _pos, "> 0")
    lr: float = _opt(2e-3, "Adam learning rate", _pos, "> 0")
    batch_size: int = _opt(8, "minibatch size", _pos, "> 0")
    width: int = _opt(8, "base channel width of G, G_m and discriminators", _pos, "> 0")
    lambda_adv: float = _opt(0.05, "LSGAN weight; 0 selects pure-L1 training", _nonneg, ">= 0")
    lambda_cue: float = _opt(1.0, "L1 weight pulling motion cues toward block-matching flow", _nonneg, ">= 0")
    radius: int = _opt(8, "block-matching search radius (px)", _pos, "> 0")
    block: int = _opt(7, "block-matching window (odd)", lambda v: v > 0 and v % 2 == 1, "positive odd")
    min_conf: float = _opt(0.3, "flow confidence below which displacement is zeroed", _unit, "in [0, 1]")


@dataclass
class BackboneSection:
    teacher_epochs: int = _opt(12, "teacher training epochs", _pos, "> 0")
    teacher_lr: float = _opt(2e-3, "teacher Adam learning rate", _pos, "> 0")
    jitter: float = _opt(0.0, "teacher photometric augmentation strength", _nonneg, ">= 0")
    mode: str = _opt("MidOnly", "main distillation mode", lambda v: v in ("MidOnly", "YoloOnly", "MidPlusYolo", "mid", "yolo", "midyolo"),
                     "one of MidOnly, YoloOnly, MidPlusYolo")
    lambda_yolo: float = _opt(0.0, "head-term weight, used only with MidPlusYolo", _nonneg, ">= 0")
    distill_epochs: int = _opt(30, "main distillation epochs", _pos, "> 0")
    distill_lr: float = _opt(2e-3, "distillation Adam learning rate", _pos, "> 0")
    batch_size: int = _opt(8, "minibatch size", _pos, "> 0")
    augment: str = _opt("dihedral", "distillation pair augmentation", lambda v: v in ("none", "flip", "dihedral"),
                        "one of none, flip, dihedral")
    ablation_steps: int = _opt(300, "optimizer steps per layer-ablation variant", _pos, "> 0")
    ablation_lambdas: str = _opt("0.05,0.1,1.0", "MidPlusYolo weights in the layer ablation")
    conf_thresh: float = _opt(0.5, "objectness threshold", _unit, "in [0, 1]")
    nms_iou: float = _opt(0.45, "non-maximum suppression IoU", _unit, "in [0, 1]")
    min_contrast: float = _opt(0.08, "teacher labels keep objects at least this visible", _nonneg, ">= 0")


@dataclass
class InvismapSection:
    percentile: float = _opt(99.0, "day-distance percentile used as t_k", lambda v: 50 < v <= 100, "in (50, 100]")
    paper_thresholds: bool = _opt(False, "use the published t_k instead of calibrating")
    eq1_literal: bool = _opt(False, "use the printed min-with-0 fusion form")
    predictor_epochs: int = _opt(15, "predictor training epochs", _pos, "> 0")
    predictor_lr: float = _opt(3e-3, "predictor Adam learning rate", _pos, "> 0")
    predictor_width: int = _opt(8, "predictor base width", _pos, "> 0")


@dataclass
class EvalkitSection:
    coverage_threshold: float = _opt(0.35, "threshold marked on the coverage histogram", _unit, "in [0, 1]")
    iou_thresh: float = _opt(0.5, "detection match IoU", lambda v: 0 < v < 1, "in (0, 1)")
    histogram_bins: int = _opt(20, "bins of the score histogram", _pos, "> 0")
    sweep_sizes: str = _opt("50,100,200,400,800", "training-set sizes for the size sweep")
    sweep_steps: int = _opt(300, "optimizer steps per sweep point", _pos, "> 0")
    raw_vs_aligned_steps: int = _opt(300, "optimizer steps per raw/aligned training comparison", _pos, "> 0")


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "synthgen": SynthgenSection,
    "registration": RegistrationSection,
    "alignnet": AlignnetSection,
    "backbone": BackboneSection,
    "invismap": InvismapSection,
    "evalkit": EvalkitSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    synthgen: SynthgenSection = field(default_factory=SynthgenSection)
    registration: RegistrationSection = field(default_factory=RegistrationSection)
    alignnet: AlignnetSection = field(default_factory=AlignnetSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    invismap: InvismapSection = field(default_factory=InvismapSection)
    evalkit: EvalkitSection = field(default_factory=EvalkitSection)

    def store_root(self) -> Path:
        return Path(os.environ.get(STORE_ENV) or self.run.store)

    def run_dir(self) -> Path:
        return self.store_root() / self.run.name

    def sweep_sizes(self) -> list[int]:
        return _int_list(self.evalkit.sweep_sizes, "evalkit.sweep_sizes")

    def ablation_lambdas(self) -> list[float]:
        try:
            return [float(v) for v in self.backbone.ablation_lambdas.split(",") if v.strip()]
        except ValueError as e:
            raise ConfigError(f"backbone.ablation_lambdas: {e}") from None


def _int_list(text: str, path: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not vals or any(v <= 0 for v in vals):
        raise ConfigError(f"{path}: expected a comma-separated list of positive integers")
    return vals


def _convert(raw: str, kind: type, path: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{path}: expected a boolean, got {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{path}: expected {kind.__name__}, got {raw!r}") from None


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _validate(cfg: RunConfig, where: str) -> None:
    for sname in SECTIONS:
        section = getattr(cfg, sname)
        for f in fields(section):
            check = f.metadata.get("check")
            value = getattr(section, f.name)
            if check is not None and not check(value):
                raise ConfigError(f"{where}: {sname}.{f.name} = {value!r} out of range ({f.metadata['rule']})")
    sg = cfg.synthgen
    if sg.object_min > sg.object_max:
        raise ConfigError(f"{where}: synthgen.object_min exceeds synthgen.object_max")
    sizes = cfg.sweep_sizes()
    if max(sizes) > sg.sweep_pool:
        raise ConfigError(f"{where}: evalkit.sweep_sizes exceeds synthgen.sweep_pool ({sg.sweep_pool})")
    cfg.ablation_lambdas()


def parse_config_text(text: str, where: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=where)
    except configparser.Error as e:
        raise ConfigError(f"{where}: {e}".splitlines()[0]) from None
    cfg = RunConfig()
    for sname in parser.sections():
        if sname not in SECTIONS:
            raise ConfigError(f"{where}: unknown section [{sname}]")
        section = getattr(cfg, sname)
        known = {f.name: f for f in fields(section)}
        for key, raw in parser.items(sname):
            path = f"{sname}.{key}"
            if key not in known:
                raise ConfigError(f"{where}: unknown key {path}")
            kind = _TYPES[known[key].type] if isinstance(known[key].type, str) else known[key].type
            setattr(section, key, _convert(raw, kind, f"{where}: {path}"))
    _validate(cfg, where)
    return cfg


def parse_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config_text("", "<defaults>")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"{p}: cannot read config ({e.strerror})") from None
    return parse_config_text(text, str(p))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def echo_config(cfg: RunConfig) -> str:
    """Fully resolved config, one commented key per line, parseable by :func:`parse_config_text`."""
    out = []
    for sname in SECTIONS:
        out.append(f"[{sname}]")
        section = getattr(cfg, sname)
        for f in fields(section):
            out.append(f"# {f.metadata['doc']}")
            out.append(f"{f.name} = {_fmt(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)


def defaults_text() -> str:
    return echo_config(RunConfig())
