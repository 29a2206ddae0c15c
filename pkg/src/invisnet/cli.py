"""Command-line entry point: ``invisnet <subcommand> [--config FILE] [--run DIR] ...``.

Failures print a single line ``invisnet: error[<category>]: <message>`` to
stderr and exit nonzero; the category is one of ``usage``, ``config``,
``dependency``, ``data``, ``divergence``, ``io`` or ``internal``.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import pipeline, registration
from .config import ConfigError, RunConfig, defaults_text, parse_config

EXIT_CODES = {"usage": 2, "config": 3, "dependency": 4, "data": 5, "divergence": 6, "io": 7, "internal": 1}

SUBCOMMAND_STAGE = {
    "gen": "gen",
    "calibrate": "calibrate",
    "train-align": "train-align",
    "train-teacher": "train-teacher",
    "distill": "distill",
    "score": "score",
    "train-predictor": "train-predictor",
    "eval": "eval",
    "sweep-size": "sweep",
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI config file (defaults apply to anything omitted)")
    p.add_argument("--run", type=Path, help="run directory (default: <store>/<run.name>)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invisnet", description="Pixel-level invisibility maps by cross-modal feature distillation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("gen", "generate all synthetic datasets"),
        ("train-teacher", "train the modality-A detector"),
        ("train-predictor", "train the color-only mask predictor"),
        ("eval", "compute every evaluation table"),
    ):
        _common(sub.add_parser(name, help=help_))

    p = sub.add_parser("calibrate", help="estimate the rig homography from checkerboard correspondences")
    _common(p)
    p.add_argument("--points", type=Path, help="correspondence file ('xA yA xB yB' per line); skips the run store")
    p.add_argument("--out", type=Path, help="homography file to write (with --points)")

    p = sub.add_parser("train-align", help="train the alignment networks")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory (with manifest.txt) of weakly aligned video frames")
    p.add_argument("--out", type=Path, help="extra directory receiving the model checkpoints and loss CSV")

    p = sub.add_parser("distill", help="distill the student and run the layer ablation")
    _common(p)
    p.add_argument("--mode", choices=["mid", "yolo", "midyolo", "MidOnly", "YoloOnly", "MidPlusYolo"])
    p.add_argument("--lambda", dest="lambda_yolo", type=float, help="head-term weight for midyolo")

    p = sub.add_parser("score", help="score the evaluation sets, or one stored pair with --pair")
    _common(p)
    p.add_argument("--pair", type=Path, help="sample stem inside a dataset directory, e.g. data/eval/eval_00003")
    p.add_argument("--thresholds", type=Path, help="thresholds file (three numbers)")
    p.add_argument("--eq1-literal", action="store_true", help="use the printed min-with-0 fusion form")

    p = sub.add_parser("sweep-size", help="distill at several training-set sizes")
    _common(p)

    p = sub.add_parser("plot", help="regenerate SVG plots from a run directory")
    _common(p)

    p = sub.add_parser("run", help="run several stages in dependency order (default: all)")
    _common(p)
    p.add_argument("--stages", help="comma-separated stage names")
    p.add_argument("--eq1-literal", action="store_true", help="use the printed min-with-0 fusion form")

    p = sub.add_parser("defaults", help="print the fully documented default config")
    return parser


def _config(args) -> RunConfig:
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "eq1_literal", False):
        cfg.invismap.eq1_literal = True
    if getattr(args, "mode", None):
        cfg.backbone.mode = args.mode
    if getattr(args, "lambda_yolo", None) is not None:
        cfg.backbone.lambda_yolo = args.lambda_yolo
    mode = {"mid": "MidOnly", "yolo": "YoloOnly", "midyolo": "MidPlusYolo"}.get(cfg.backbone.mode, cfg.backbone.mode)
    if getattr(args, "lambda_yolo", None) is not None and mode != "MidPlusYolo":
        raise UsageError("--lambda is only valid with --mode midyolo")
    return cfg


def _score_one(cfg: RunConfig, store: pipeline.ArtifactStore, pair: Path, thresholds: Path | None) -> Path:
    from . import invismap, synthgen
    from .core import ntsr

    directory, stem = pair.parent, pair.name
    if not (directory / "manifest.txt").exists():
        raise FileNotFoundError(f"{directory}: no manifest.txt, --pair must name a sample inside a dataset directory")
    a = ntsr.load(directory / f"{stem}_A.ntsr")
    b = ntsr.load(directory / f"{stem}_B.ntsr")
    store.require("score", ("train-teacher", "distill"))
    t_path = thresholds or store.path("score", "thresholds.txt")
    if not Path(t_path).exists():
        raise pipeline.MissingDependencyError(f"no thresholds file at {t_path}; run 'score' first or pass --thresholds")
    t = invismap.Thresholds.read(t_path)
    score = invismap.score_pair(pipeline.load_teacher(store), pipeline.load_student(store), a, b, t, cfg.invismap.eq1_literal)
    out = store.path("score", f"{stem}_score")
    ntsr.save(out.with_suffix(".ntsr"), score)
    synthgen.write_pixmap(out.with_suffix(".pgm"), score)
    print(f"{stem}: mean score {float(np.mean(score)):.4f} -> {out.with_suffix('.ntsr')}")
    return out


def run(args) -> None:
    if args.command == "defaults":
        sys.stdout.write(defaults_text())
        return
    cfg = _config(args)
    root = args.run if args.run is not None else cfg.run_dir()
    store = pipeline.ArtifactStore(root)
    if args.command == "plot":
        made = pipeline.make_plots(cfg, store)
        if not made:
            raise pipeline.MissingDependencyError(f"nothing to plot in {root}; run 'eval' or 'sweep-size' first")
        for p in made:
            print(p)
        return
    if args.command == "score" and args.pair is not None:
        _score_one(cfg, store, args.pair, args.thresholds)
        return
    if args.command == "calibrate" and (args.points is not None or args.out is not None):
        if args.points is None or args.out is None:
            raise UsageError("--points and --out must be given together")
        H = registration.estimate_homography(registration.read_correspondences(args.points))
        registration.write_homography(args.out, H)
        print(f"homography -> {args.out}")
        return
    if args.command == "train-align" and (args.data is not None or args.out is not None):
        pipeline.run_pipeline(cfg, ["train-align"], root, align_data=args.data)
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            for f in sorted(store.dir("train-align").iterdir()):
                if f.is_file() and f.name != "DONE":
                    shutil.copyfile(f, args.out / f.name)
        return
    if args.command == "run":
        stages = None if not args.stages else [s.strip() for s in args.stages.split(",") if s.strip()]
        try:
            todo = pipeline.resolve_stages(stages)
        except ValueError as e:
            raise UsageError(str(e)) from None
        pipeline.run_pipeline(cfg, todo, root)
        return
    if args.command == "score" and args.thresholds is not None:
        raise UsageError("--thresholds requires --pair")
    pipeline.run_pipeline(cfg, [SUBCOMMAND_STAGE[args.command]], root)


def _category(exc: BaseException) -> str:
    from .core.ntsr import NTSRFormatError
    from .core.optim import NonFiniteGradientError
    from .training import DivergenceError

    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, pipeline.MissingDependencyError):
        return "dependency"
    if isinstance(exc, (DivergenceError, NonFiniteGradientError)):
        return "divergence"
    if isinstance(exc, (NTSRFormatError, registration.DegenerateConfigurationError, KeyError, ValueError)):
        return "data"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        run(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        cat = _category(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"invisnet: error[{cat}]: {msg}", file=sys.stderr)
        if getattr(args, "verbose", False):
            logging.getLogger(__name__).exception("traceback")
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
