"""Stage runner and artifact store.

A run directory holds everything a later stage needs, so any stage can be
re-executed from a completed store. Each stage writes a ``DONE`` marker
last; its absence means the stage's artifacts are incomplete.
"""

from __future__ import annotations

import hashlib
import logging
import time
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import alignnet, backbone, evalkit, invismap, registration, synthgen
from .config import RunConfig, echo_config
from .core import ntsr
from .core.ntsr import load_checkpoint, save_checkpoint
from .training import History

log = logging.getLogger(__name__)

STAGES = ("gen", "calibrate", "train-align", "train-teacher", "distill", "score", "train-predictor", "eval", "sweep")

DEPENDS: dict[str, tuple[str, ...]] = {
    "gen": (),
    "calibrate": ("gen",),
    "train-align": ("gen", "calibrate"),
    "train-teacher": ("gen",),
    "distill": ("gen", "train-teacher"),
    "score": ("gen", "train-teacher", "distill"),
    "train-predictor": ("gen", "score"),
    "eval": ("gen", "calibrate", "train-align", "train-teacher", "distill", "score", "train-predictor"),
    "sweep": ("gen", "train-teacher"),
}

STAGE_DIRS = {
    "gen": "data",
    "calibrate": "calib",
    "train-align": "align",
    "train-teacher": "teacher",
    "distill": "distill",
    "score": "score",
    "train-predictor": "predictor",
    "eval": "eval",
    "sweep": "sweep",
}

DAY_SPLITS = ("teacher", "train", "heldout", "sweep")


class MissingDependencyError(RuntimeError):
    pass


def derive_seed(seed: int, *names: str) -> int:
    """Stable per-stage seed: hash of the global seed and a name path."""
    h = hashlib.sha256(("/".join([str(seed), *names])).encode()).digest()
    return int.from_bytes(h[:4], "little")


class ArtifactStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def dir(self, stage: str) -> Path:
        d = self.root / STAGE_DIRS[stage]
        d.mkdir(parents=True, exist_ok=True)
        return d

    def path(self, stage: str, name: str) -> Path:
        return self.dir(stage) / name

    def done(self, stage: str) -> bool:
        return (self.root / STAGE_DIRS[stage] / "DONE").exists()

    def mark_done(self, stage: str) -> None:
        (self.dir(stage) / "DONE").write_text(stage + "\n")

    def require(self, stage: str, needed: Iterable[str] | None = None) -> None:
        for dep in DEPENDS[stage] if needed is None else needed:
            if not self.done(dep):
                raise MissingDependencyError(f"stage '{stage}' needs artifacts of stage '{dep}' in {self.root}")

    def log(self, line: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / "run.log", "a") as fh:
            fh.write(line.rstrip("\n") + "\n")


# helpers -----------------------------------------------------------------------------


def scene_config(cfg: RunConfig) -> synthgen.SceneConfig:
    sg = cfg.synthgen
    return synthgen.SceneConfig(height=sg.height, width=sg.width, object_count=(sg.object_min, sg.object_max),
                                mover_fraction=sg.mover_fraction)


def render_config(cfg: RunConfig) -> synthgen.RenderConfig:
    sg = cfg.synthgen
    return synthgen.RenderConfig(sigma_a=sg.sigma_a, sigma_b=sg.sigma_b, tau_vis=sg.tau_vis)


def misalign_config(cfg: RunConfig) -> synthgen.MisalignConfig:
    sg = cfg.synthgen
    return synthgen.MisalignConfig(corner_jitter=sg.corner_jitter, max_object_shift=sg.max_object_shift,
                                   max_temporal=sg.max_temporal)


def stack_a(samples: Sequence[synthgen.PairSample]) -> np.ndarray:
    return np.stack([s.imgA for s in samples])


def stack_b(samples: Sequence[synthgen.PairSample]) -> np.ndarray:
    return np.stack([s.imgB for s in samples])


def load_split(store: ArtifactStore, split: str) -> list[synthgen.PairSample]:
    samples, _ = synthgen.load_dataset(store.dir("gen") / split)
    return samples


def load_net(path: Path, in_channels: int) -> backbone.DetectorNet:
    state, _ = load_checkpoint(path)
    net = backbone.DetectorNet(in_channels)
    net.load_state_dict(state)
    return net


def load_teacher(store: ArtifactStore) -> backbone.DetectorNet:
    return load_net(store.path("train-teacher", "teacher.ntsr"), 3)


def load_student(store: ArtifactStore, name: str = "student") -> backbone.DetectorNet:
    return load_net(store.path("distill", f"{name}.ntsr"), 1)


def load_homography(store: ArtifactStore) -> registration.Homography:
    return registration.read_homography(store.path("calibrate", "homography.txt"))


def _distill_config(cfg: RunConfig, mode: str, lam: float | None, seed: int, epochs: int | None = None,
                    steps: int | None = None) -> backbone.DistillConfig:
    b = cfg.backbone
    return backbone.DistillConfig(mode=mode, lambda_yolo=lam, epochs=epochs or b.distill_epochs, steps=steps,
                                  lr=b.distill_lr, batch_size=b.batch_size, seed=seed, augment=b.augment)


def variant_name(mode: str, lam: float | None) -> str:
    return mode if lam is None else f"{mode}{lam:g}"


def ablation_variants(cfg: RunConfig) -> list[tuple[str, float | None]]:
    return [("MidOnly", None), ("YoloOnly", None)] + [("MidPlusYolo", lam) for lam in cfg.ablation_lambdas()]


# stages ------------------------------------------------------------------------------------


def stage_gen(cfg: RunConfig, store: ArtifactStore) -> None:
    sg = cfg.synthgen
    sc, rc, mc = scene_config(cfg), render_config(cfg), misalign_config(cfg)
    seed = derive_seed(cfg.run.seed, "gen")
    rig = synthgen.rig_homography(derive_seed(cfg.run.seed, "rig"), sg.height, sg.width, sg.corner_jitter)
    out = store.dir("gen")
    plan = [
        ("teacher", synthgen.DatasetSpec(sg.teacher_pairs, ("day",)), None),
        ("train", synthgen.DatasetSpec(sg.train_pairs, ("day",)), None),
        ("heldout", synthgen.DatasetSpec(sg.heldout_pairs, ("day",)), None),
        ("sweep", synthgen.DatasetSpec(sg.sweep_pool, ("day",)), None),
        ("eval", synthgen.DatasetSpec(sg.eval_pairs * len(synthgen.CONDITIONS), synthgen.CONDITIONS), None),
        ("predictor_train", synthgen.DatasetSpec(sg.predictor_pairs, synthgen.CONDITIONS), None),
        ("predictor_test", synthgen.DatasetSpec(sg.predictor_pairs, synthgen.CONDITIONS), None),
        ("weak", synthgen.DatasetSpec(sg.weak_pairs, ("day",), misaligned=True), rig),
    ]
    for split, spec, r in plan:
        samples, manifest = synthgen.generate_dataset(seed, spec, split, sc, rc, mc if spec.misaligned else None, r)
        synthgen.save_dataset(out / split, samples, manifest, pixmaps=split == "eval")

    # the same scenes under full and zero luminance, for the drift comparison
    for split, lum in (("stable_day", 1.0), ("stable_night", 0.0)):
        samples = []
        seeds = [synthgen.sample_seed(seed, "stable", i) for i in range(sg.heldout_pairs)]
        for s in seeds:
            samples.append(synthgen.render_pair(synthgen.generate_scene(s, sc), synthgen.LightingCondition.clear(lum, split), None, rc))
        manifest = synthgen.DatasetManifest(seed, len(samples), split, [split] * len(samples),
                                            [f"{split}_{i:05d}" for i in range(len(samples))], seeds,
                                            {"luminance": lum})
        synthgen.save_dataset(out / split, samples, manifest, pixmaps=False)

    # weakly aligned videos for alignment training
    frames, seeds = [], []
    for v in range(sg.align_videos):
        s = synthgen.sample_seed(seed, "align", v)
        scene = synthgen.generate_scene(s, sc)
        rng = np.random.default_rng([s, 7])
        light = synthgen.sample_lighting("day", rng, rc, sg.height, sg.width)
        mis = synthgen.sample_misalign(rng, scene, mc, rig)
        frames += synthgen.render_video(scene, light, sg.align_frames, mis, rc)
        seeds += [s] * sg.align_frames
    files = [f"align_v{v:03d}_f{f:02d}" for v in range(sg.align_videos) for f in range(sg.align_frames)]
    manifest = synthgen.DatasetManifest(seed, len(frames), "align", ["day"] * len(frames), files, seeds,
                                        {"frames_per_video": sg.align_frames})
    synthgen.save_dataset(out / "align", frames, manifest, pixmaps=False)

    # checkerboard corners seen by both cameras
    rg = cfg.registration
    pts = registration.checkerboard_points(rg.board_rows, rg.board_cols, sg.height, sg.width)
    corr = registration.synth_correspondences(registration.Homography(rig), pts, rg.corner_noise,
                                              np.random.default_rng(derive_seed(cfg.run.seed, "corners")))
    registration.write_correspondences(out / "correspondences.txt", corr, "xA yA xB yB")
    registration.write_homography(out / "rig_truth.txt", registration.Homography(rig))


def stage_calibrate(cfg: RunConfig, store: ArtifactStore) -> None:
    corr = registration.read_correspondences(store.path("gen", "correspondences.txt"))
    H = registration.estimate_homography(corr)
    registration.write_homography(store.path("calibrate", "homography.txt"), H)
    truth = registration.read_homography(store.path("gen", "rig_truth.txt"))
    err = registration.reprojection_error(H, corr)
    evalkit.write_csv(store.path("calibrate", "calibration.csv"),
                      ["points", "mean_reprojection_px", "max_reprojection_px", "max_entry_error"],
                      [[len(corr), float(err.mean()), float(err.max()), float(np.abs(H.matrix - truth.matrix).max())]])


def registered_videos(cfg: RunConfig, store: ArtifactStore, data: Path | None = None) -> list[list[synthgen.PairSample]]:
    H = load_homography(store)
    raw = load_split(store, "align") if data is None else synthgen.load_dataset(data)[0]
    frames = [registration.register_pair(f, H) for f in raw]
    n = cfg.synthgen.align_frames
    return [frames[i : i + n] for i in range(0, len(frames), n)]


def align_config(cfg: RunConfig) -> alignnet.AlignConfig:
    a = cfg.alignnet
    return alignnet.AlignConfig(epochs=a.epochs, lr=a.lr, batch_size=a.batch_size, width=a.width,
                                lambda_adv=a.lambda_adv, lambda_cue=a.lambda_cue, radius=a.radius,
                                block=a.block, min_conf=a.min_conf, seed=derive_seed(cfg.run.seed, "align"))


def stage_train_align(cfg: RunConfig, store: ArtifactStore, data: Path | None = None) -> None:
    a = cfg.alignnet
    samples, skipped = [], 0
    for video in registered_videos(cfg, store, data):
        s, k = alignnet.make_training_streams(video, radius=a.radius, block=a.block, min_conf=a.min_conf)
        samples += s
        skipped += k
    hist = History(["epoch", "l1", "cue_l1", "adv_g", "d", "d_m"])
    models = alignnet.train_align(samples, align_config(cfg), hist)
    models.save(store.dir("train-align"))
    hist.write_csv(store.path("train-align", "loss.csv"))
    counts = {st: sum(1 for x in samples if x.stream == st) for st in alignnet.STREAMS}
    evalkit.write_csv(store.path("train-align", "streams.csv"), ["stream", "samples"],
                      [[k, v] for k, v in counts.items()] + [["skipped_frames", skipped]])


def stage_train_teacher(cfg: RunConfig, store: ArtifactStore) -> None:
    b = cfg.backbone
    samples = load_split(store, "teacher")
    tc = backbone.TeacherConfig(epochs=b.teacher_epochs, lr=b.teacher_lr, batch_size=b.batch_size,
                                seed=derive_seed(cfg.run.seed, "teacher"), min_contrast=b.min_contrast, jitter=b.jitter)
    hist = History(["epoch", "loss"])
    net = backbone.teacher_train(stack_a(samples), [s.boxes for s in samples], tc, hist)
    save_checkpoint(store.path("train-teacher", "teacher.ntsr"), net.state_dict(),
                    {"role": "teacher", "param_hash": net.param_hash()})
    hist.write_csv(store.path("train-teacher", "loss.csv"))


def stage_distill(cfg: RunConfig, store: ArtifactStore) -> None:
    teacher = load_teacher(store)
    train, held = load_split(store, "train"), load_split(store, "heldout")
    a, b = stack_a(train), stack_b(train)
    heldout = (stack_a(held), stack_b(held))
    targets = backbone.TeacherTargets.compute(teacher, a)
    seed = derive_seed(cfg.run.seed, "distill")

    hist = History(["epoch", "train_loss", "heldout_distance"])
    lam = cfg.backbone.lambda_yolo if backbone._MODE_ALIASES.get(cfg.backbone.mode, cfg.backbone.mode) == "MidPlusYolo" else None
    t0 = time.perf_counter()
    student = backbone.distill(teacher, a, b, _distill_config(cfg, cfg.backbone.mode, lam, seed), heldout, hist,
                               targets=targets)
    # wall time kept out of the CSVs so they stay byte-reproducible
    store.path("distill", "main_seconds.txt").write_text(f"{time.perf_counter() - t0:.1f}\n")
    save_checkpoint(store.path("distill", "student.ntsr"), student.state_dict(),
                    {"role": "student", "mode": cfg.backbone.mode, "teacher_hash": teacher.param_hash()})
    hist.write_csv(store.path("distill", "history.csv"))

    # layer ablation at a fixed step budget per variant
    rows = []
    for mode, lam in ablation_variants(cfg):
        name = variant_name(mode, lam)
        h = History(["epoch", "train_loss", "heldout_distance"])
        dc = _distill_config(cfg, mode, lam, seed, steps=cfg.backbone.ablation_steps)
        st = backbone.distill(teacher, a, b, dc, heldout, h, targets=targets)
        save_checkpoint(store.path("distill", f"ablation_{name}.ntsr"), st.state_dict(), {"mode": mode, "lambda_yolo": str(lam)})
        rows.append([name, cfg.backbone.ablation_steps, h.rows[0][2], h.rows[-1][2]])
    evalkit.write_csv(store.path("distill", "ablation_training.csv"),
                      ["variant", "steps", "baseline_distance", "final_distance"], rows)


def _scores(cfg: RunConfig, teacher, student, samples, t: invismap.Thresholds):
    score, dist = invismap.score_batch(teacher, student, stack_a(samples), stack_b(samples), t, cfg.invismap.eq1_literal)
    return score, dist


def stage_score(cfg: RunConfig, store: ArtifactStore) -> None:
    teacher, student = load_teacher(store), load_student(store)
    held = load_split(store, "heldout")
    if cfg.invismap.paper_thresholds:
        t = invismap.Thresholds(*invismap.PAPER_THRESHOLDS)
    else:
        d = invismap.distance_batch(teacher, student, stack_a(held), stack_b(held))
        t = invismap.calibrate_thresholds([d], cfg.invismap.percentile)
    t.write(store.path("score", "thresholds.txt"))
    for split in ("eval", "predictor_train", "predictor_test"):
        samples = load_split(store, split)
        taps_t, _ = backbone.extract_batched(teacher, stack_a(samples))
        taps_s, _ = backbone.extract_batched(student, stack_b(samples))
        dist = invismap.feature_distance(backbone.MultiScaleFeatures(*taps_t), backbone.MultiScaleFeatures(*taps_s))
        score = invismap.fuse_score(dist, t, cfg.invismap.eq1_literal)
        ntsr.save(store.path("score", f"{split}_scores.ntsr"), score)
        if split == "eval":
            for k, (tt, ss) in enumerate(zip(taps_t, taps_s), 1):
                ntsr.save(store.path("score", f"eval_tap{k}_distance.ntsr"), backbone.tap_distance(tt, ss))
            for i in range(0, len(samples), max(1, cfg.synthgen.eval_pairs)):
                synthgen.write_pixmap(store.path("score", f"eval_{i:05d}_score.pgm"), score[i])


def stage_train_predictor(cfg: RunConfig, store: ArtifactStore) -> None:
    ip = cfg.invismap
    train, test = load_split(store, "predictor_train"), load_split(store, "predictor_test")
    y_train = ntsr.load(store.path("score", "predictor_train_scores.ntsr"))
    y_test = ntsr.load(store.path("score", "predictor_test_scores.ntsr"))
    pc = invismap.PredictorConfig(epochs=ip.predictor_epochs, lr=ip.predictor_lr, width=ip.predictor_width,
                                  batch_size=cfg.backbone.batch_size, seed=derive_seed(cfg.run.seed, "predictor"))
    hist = History(["epoch", "train_l1", "heldout_mae"])
    net = invismap.train_predictor(stack_a(train), y_train, pc, (stack_a(test), y_test), hist)
    save_checkpoint(store.path("train-predictor", "predictor.ntsr"), net.state_dict(), {"width": str(ip.predictor_width)})
    hist.write_csv(store.path("train-predictor", "loss.csv"))


def load_predictor(cfg: RunConfig, store: ArtifactStore) -> invismap.PredictorNet:
    state, meta = load_checkpoint(store.path("train-predictor", "predictor.ntsr"))
    net = invismap.PredictorNet(3, int(meta.get("width", cfg.invismap.predictor_width)))
    net.load_state_dict(state)
    return net


# evaluation ---------------------------------------------------------------------------------


def eval_distillation(store: ArtifactStore) -> list[list]:
    hist = np.genfromtxt(store.path("distill", "history.csv"), delimiter=",", names=True)
    base, final = float(hist["heldout_distance"][0]), float(hist["heldout_distance"][-1])
    return [[base, final, final / base]]


def eval_stability(teacher, student, store: ArtifactStore) -> list[list]:
    day, night = load_split(store, "stable_day"), load_split(store, "stable_night")
    t1, _ = backbone.extract_batched(teacher, stack_a(day))
    t0, _ = backbone.extract_batched(teacher, stack_a(night))
    s1, _ = backbone.extract_batched(student, stack_b(day))
    s0, _ = backbone.extract_batched(student, stack_b(night))
    td, sd = backbone.mean_feature_distance(t1, t0), backbone.mean_feature_distance(s1, s0)
    return [[td, sd, sd / td]]


def fn_masks(teacher, samples, cfg: RunConfig) -> list[np.ndarray]:
    b = cfg.backbone
    dets = backbone.detect_batch(teacher, stack_a(samples), b.conf_thresh, b.nms_iou)
    return [evalkit.undetected_mask(d, s.boxes, s.object_masks, cfg.evalkit.iou_thresh) for d, s in zip(dets, samples)]


COVERAGE_GRID = tuple(np.round(np.arange(0.05, 1.0001, 0.05), 2))


def stage_eval(cfg: RunConfig, store: ArtifactStore) -> None:
    ev = cfg.evalkit
    teacher, student = load_teacher(store), load_student(store)
    samples = load_split(store, "eval")
    labels = np.array([s.lighting.label for s in samples])
    scores = ntsr.load(store.path("score", "eval_scores.ntsr"))
    taps = [ntsr.load(store.path("score", f"eval_tap{k}_distance.ntsr")) for k in (1, 2, 3)]
    out = store.dir("eval")

    evalkit.write_csv(out / "distillation.csv", ["baseline_distance", "final_distance", "ratio"], eval_distillation(store))
    evalkit.write_csv(out / "stability.csv", ["teacher_drift", "student_drift", "ratio"], eval_stability(teacher, student, store))

    # score and distance distributions, per pixel and per image
    rows = []
    for cond in synthgen.CONDITIONS:
        m = labels == cond
        if not m.any():
            continue
        for name, vals in [("score", scores[m])] + [(f"d{k}", taps[k - 1][m]) for k in (1, 2, 3)]:
            px = evalkit.fit_gaussian(vals)
            im = evalkit.fit_gaussian(vals.reshape(len(vals), -1).mean(axis=1))
            rows.append([cond, name, px.mean, px.std, px.n, im.mean, im.std, im.n])
    evalkit.write_csv(out / "distributions.csv",
                      ["condition", "quantity", "pixel_mean", "pixel_std", "pixel_n", "image_mean", "image_std", "image_n"], rows)

    day, night = scores[labels == "day"], scores[labels == "night"]
    sep = [["day", "night", "pixel", evalkit.separability(day, night)],
           ["day", "night", "image", evalkit.separability(day.reshape(len(day), -1).mean(1), night.reshape(len(night), -1).mean(1))]]
    for cond in ("dawn", "dusk", "fog", "glare"):
        if (labels == cond).any():
            sep.append(["day", cond, "pixel", evalkit.separability(day, scores[labels == cond])])
    evalkit.write_csv(out / "separability.csv", ["a", "b", "pooling", "auc"], sep)

    # coverage of undetected-object pixels on the dim conditions
    cov_rows, hist_rows = [], []
    for cond in ("night", "dawn", "dusk"):
        m = np.nonzero(labels == cond)[0]
        if not len(m):
            continue
        sub = [samples[i] for i in m]
        fn = np.stack(fn_masks(teacher, sub, cfg))
        sc = scores[m][:, 0]
        ntsr.save(out / f"{cond}_fn_mask.ntsr", fn.astype(np.float64))
        for rep in evalkit.coverage_curve(sc, fn, COVERAGE_GRID):
            cov_rows.append([cond, rep.threshold, rep.fn_coverage, rep.flagged_fraction, rep.enrichment, rep.fn_pixels, rep.total_pixels])
        if cond == "night":
            hist_rows = evalkit.score_histogram(sc, fn, ev.histogram_bins)
    evalkit.write_csv(out / "coverage.csv",
                      ["condition", "threshold", "fn_coverage", "flagged_fraction", "enrichment", "fn_pixels", "total_pixels"], cov_rows)
    evalkit.write_csv(out / "histogram.csv", ["bin_left", "undetected_mass", "all_mass"], hist_rows)

    # detection tables: teacher on A, student features with teacher heads on B, per condition
    b = cfg.backbone
    conds = list(labels)
    truths = [s.boxes for s in samples]
    reports = {
        "teacher_A": evalkit.detection_eval(backbone.detect_batch(teacher, stack_a(samples), b.conf_thresh, b.nms_iou),
                                            truths, conds, ev.iou_thresh),
    }
    for mode, lam in ablation_variants(cfg):
        name = variant_name(mode, lam)
        st = load_student(store, f"ablation_{name}")
        heads = backbone.student_heads(teacher, st, mode)
        dets = backbone.detect_batch(st, stack_b(samples), b.conf_thresh, b.nms_iou, heads=heads)
        reports[f"student_B_{name}"] = evalkit.detection_eval(dets, truths, conds, ev.iou_thresh)
    header, rows = evalkit.detection_rows(reports)
    evalkit.write_csv(out / "detection.csv", header, rows)
    (out / "detection.txt").write_text(evalkit.text_table(header, rows))
    abl = [[name[len("student_B_"):], rep.overall.recall, rep.overall.mean_iou]
           for name, rep in reports.items() if name.startswith("student_B_")]
    evalkit.write_csv(out / "layer_ablation.csv", ["variant", "recall_overall", "mean_iou_overall"], abl)

    # alignment ablation on weakly aligned pairs
    H = load_homography(store)
    models = alignnet.AlignModels.load(store.dir("train-align"))
    weak = [registration.register_pair(s, H) for s in load_split(store, "weak")]
    raw_a, img_b = stack_a(weak), stack_b(weak)
    aligned_a = alignnet.align_images(raw_a, img_b, models)
    truth_a = np.stack([synthgen.render_a_at_b(s, scene_config(cfg), render_config(cfg)) for s in load_split(store, "weak")])
    raw_loss = backbone.heldout_loss(teacher, student, raw_a, img_b)
    al_loss = backbone.heldout_loss(teacher, student, aligned_a, img_b)
    raw_l1 = np.abs(raw_a - truth_a).mean(axis=(1, 2, 3))
    al_l1 = np.abs(aligned_a - truth_a).mean(axis=(1, 2, 3))
    a = cfg.alignnet
    raw_rf = np.mean([alignnet.residual_flow(x, t, a.radius, a.block, a.min_conf) for x, t in zip(raw_a, truth_a)])
    al_rf = np.mean([alignnet.residual_flow(x, t, a.radius, a.block, a.min_conf) for x, t in zip(aligned_a, truth_a)])
    evalkit.write_csv(out / "alignment.csv",
                      ["raw_distill_loss", "aligned_distill_loss", "relative_change", "raw_l1_to_truth",
                       "aligned_l1_to_truth", "fraction_improved", "raw_residual_flow", "aligned_residual_flow"],
                      [[raw_loss, al_loss, (al_loss - raw_loss) / raw_loss, raw_l1.mean(), al_l1.mean(),
                        float(np.mean(al_l1 < raw_l1)), raw_rf, al_rf]])

    # residual offsets left after registration (modality B against modality A)
    flows = [alignnet.dense_flow(alignnet.edge_map(s.imgB), alignnet.edge_map(s.imgA), cfg.alignnet.radius, cfg.alignnet.block)
             for s in weak]
    masked = [f.masked(cfg.alignnet.min_conf) for f in flows]
    os_ = evalkit.offset_stats(masked)
    evalkit.write_csv(out / "offsets.csv", ["displacement_px", "fraction_dx", "fraction_dy"],
                      [[int(b_), hx, hy] for b_, hx, hy in zip(os_.bins, os_.hist_dx, os_.hist_dy)])
    evalkit.write_csv(out / "offset_summary.csv", ["frac_ge5", "mean_abs_dx", "mean_abs_dy", "pixels"],
                      [[os_.frac_ge5, os_.mean_abs_dx, os_.mean_abs_dy, os_.n]])

    # color-only predictor
    pred_net = load_predictor(cfg, store)
    test = load_split(store, "predictor_test")
    y = ntsr.load(store.path("score", "predictor_test_scores.ntsr"))
    p = invismap.predict_mask(pred_net, stack_a(test))
    night = np.array([s.lighting.label == "night" for s in test])
    rows = [["all", float(np.abs(p - y).mean()), float(stats.spearmanr(p.reshape(len(p), -1).mean(1), y.reshape(len(y), -1).mean(1))[0])]]
    if night.sum() >= 3:
        pn, yn = p[night].reshape(night.sum(), -1).mean(1), y[night].reshape(night.sum(), -1).mean(1)
        rows.append(["night", float(np.abs(p[night] - y[night]).mean()), float(stats.spearmanr(pn, yn)[0])])
    evalkit.write_csv(out / "predictor.csv", ["subset", "mae", "spearman_image_mean"], rows)

    summary = []
    for fname in ("distillation", "stability", "separability", "alignment", "layer_ablation", "predictor", "offset_summary"):
        text = (out / f"{fname}.csv").read_text().splitlines()
        header = text[0].split(",")
        body = [r.split(",") for r in text[1:]]
        summary.append(f"== {fname} ==\n" + evalkit.text_table(header, body))
    (out / "report.txt").write_text("\n".join(summary))


def sweep_metric(teacher, pool_a, pool_b, held_a, held_b, targets, cfg: RunConfig, size: int, seed: int) -> float:
    """Fraction of the untrained held-out distance removed by a fixed-budget MidOnly run on ``size`` pairs."""
    idx = np.arange(size)
    h = History(["epoch", "train_loss", "heldout_distance"])
    dc = _distill_config(cfg, "MidOnly", None, seed, steps=cfg.evalkit.sweep_steps)
    backbone.distill(teacher, pool_a[idx], pool_b[idx], dc, (held_a, held_b), h, targets=targets.subset(idx))
    return 1.0 - h.rows[-1][2] / h.rows[0][2]


def stage_sweep(cfg: RunConfig, store: ArtifactStore) -> None:
    teacher = load_teacher(store)
    pool, held = load_split(store, "sweep"), load_split(store, "heldout")
    pool_a, pool_b = stack_a(pool), stack_b(pool)
    held_a, held_b = stack_a(held), stack_b(held)
    targets = backbone.TeacherTargets.compute(teacher, pool_a)
    seed = derive_seed(cfg.run.seed, "sweep")
    report = evalkit.size_sweep(
        lambda size, s: sweep_metric(teacher, pool_a, pool_b, held_a, held_b, targets, cfg, size, s),
        cfg.sweep_sizes(), len(pool), seed)
    evalkit.write_csv(store.path("sweep", "sweep.csv"), ["size", "metric", "seed"],
                      [[p.size, p.metric, p.seed] for p in report.points])
    evalkit.plot_sweep(report, store.path("sweep", "sweep.svg"))


def read_sweep(store: ArtifactStore) -> evalkit.SweepReport:
    data = np.genfromtxt(store.path("sweep", "sweep.csv"), delimiter=",", names=True)
    data = np.atleast_1d(data)
    return evalkit.SweepReport([evalkit.SweepPoint(int(r["size"]), float(r["metric"]), int(r["seed"])) for r in data])


def make_plots(cfg: RunConfig, store: ArtifactStore) -> list[Path]:
    """Regenerate every SVG from stored artifacts."""
    plots = store.root / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    made = []
    if store.done("eval"):
        hist = np.atleast_1d(np.genfromtxt(store.path("eval", "histogram.csv"), delimiter=",", names=True))
        evalkit.plot_histogram([(r["bin_left"], r["undetected_mass"], r["all_mass"]) for r in hist],
                               cfg.evalkit.coverage_threshold, plots / "coverage_histogram.svg")
        made.append(plots / "coverage_histogram.svg")
        samples = load_split(store, "eval")
        labels = np.array([s.lighting.label for s in samples])
        scores = ntsr.load(store.path("score", "eval_scores.ntsr"))
        order = [c for c in ("day", "dawn", "dusk", "night") if (labels == c).any()]
        evalkit.plot_distributions({c: scores[labels == c] for c in order}, plots / "score_distributions.svg")
        d1 = ntsr.load(store.path("score", "eval_tap1_distance.ntsr"))
        evalkit.plot_distributions({c: d1[labels == c] for c in order}, plots / "distance_distributions.svg",
                                   xlabel="tap-1 feature distance")
        off = np.atleast_1d(np.genfromtxt(store.path("eval", "offsets.csv"), delimiter=",", names=True))
        summ = np.atleast_1d(np.genfromtxt(store.path("eval", "offset_summary.csv"), delimiter=",", names=True))[0]
        evalkit.plot_offsets(evalkit.OffsetStats(off["displacement_px"].astype(int), off["fraction_dx"], off["fraction_dy"],
                                                 float(summ["frac_ge5"]), float(summ["mean_abs_dx"]),
                                                 float(summ["mean_abs_dy"]), int(summ["pixels"])), plots / "offsets.svg")
        made += [plots / "score_distributions.svg", plots / "distance_distributions.svg", plots / "offsets.svg"]
    if store.done("sweep"):
        evalkit.plot_sweep(read_sweep(store), plots / "sweep.svg")
        made.append(plots / "sweep.svg")
    return made


RUNNERS = {
    "gen": stage_gen,
    "calibrate": stage_calibrate,
    "train-align": stage_train_align,
    "train-teacher": stage_train_teacher,
    "distill": stage_distill,
    "score": stage_score,
    "train-predictor": stage_train_predictor,
    "eval": stage_eval,
    "sweep": stage_sweep,
}


def resolve_stages(stages: Iterable[str] | None) -> list[str]:
    if stages is None:
        return list(STAGES)
    wanted = set(stages)
    unknown = wanted - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s): {', '.join(sorted(unknown))}")
    return [s for s in STAGES if s in wanted]


def run_pipeline(cfg: RunConfig, stages: Iterable[str] | None = None, root: str | Path | None = None,
                 align_data: Path | None = None) -> ArtifactStore:
    """Run ``stages`` in order; ``align_data`` replaces the generated alignment videos."""
    store = ArtifactStore(root if root is not None else cfg.run_dir())
    store.root.mkdir(parents=True, exist_ok=True)
    (store.root / "config.ini").write_text(echo_config(cfg))
    todo = resolve_stages(stages)
    for stage in todo:
        # dependencies may be satisfied earlier in this same invocation
        for dep in DEPENDS[stage]:
            if not store.done(dep):
                raise MissingDependencyError(f"stage '{stage}' needs artifacts of stage '{dep}' in {store.root}")
        marker = store.root / STAGE_DIRS[stage] / "DONE"
        if marker.exists():
            marker.unlink()
        t0 = time.perf_counter()
        log.info("stage %s started", stage)
        if stage == "train-align" and align_data is not None:
            stage_train_align(cfg, store, Path(align_data))
        else:
            RUNNERS[stage](cfg, store)
        store.mark_done(stage)
        elapsed = time.perf_counter() - t0
        store.log(f"{stage}\t{elapsed:.2f}s")
        log.info("stage %s finished in %.1fs", stage, elapsed)
    if "eval" in todo or "sweep" in todo:
        make_plots(cfg, store)
    return store
