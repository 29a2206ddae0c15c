"""Acceptance criteria 1-12. Each test prints one ``criterion N: PASS|FAIL`` line and then asserts."""

import os
import time

import numpy as np
import pytest
from scipy.ndimage import uniform_filter

from invisnet import alignnet as an
from invisnet import config as cf
from invisnet import invismap as im
from invisnet import registration as reg
from invisnet import synthgen as sg
from invisnet.core import ntsr

from conftest import TINY, run_cli
from helpers import gradcheck_network
from oracles import coverage_count, fuse_loop, shift_image
from test_registration import random_homography


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


def read_csv(path):
    return np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")


# pure numerics ------------------------------------------------------------------------------


def test_c01_fusion_exact(verdict):
    t0 = time.perf_counter()
    T = (4.0, 3.5, 3.2)
    err = 0.0
    for d, want in (((0, 0, 0), 0.0), (T, 1.0), ((2.0, 1.75, 1.6), 0.5)):
        err = max(err, abs(float(im.fuse_score(np.array(d, float).reshape(3, 1, 1), T)[0, 0]) - want))
    rng = np.random.default_rng(0)
    ok_props = True
    for _ in range(20):
        t = tuple(rng.uniform(0.1, 10, 3))
        d = rng.uniform(0, 15, (3, 23, 23))
        out = im.fuse_score(d, t)
        err = max(err, float(np.abs(out - fuse_loop(d, t)).max()))
        ok_props &= bool(out.min() >= 0 and out.max() <= 1)
        bumped = d.copy()
        bumped[rng.integers(3)] += rng.uniform(0, 5)
        ok_props &= bool(np.all(im.fuse_score(bumped, t) >= out))
        a = float(rng.uniform(0.01, 100))
        err = max(err, float(np.abs(im.fuse_score(a * d, tuple(a * x for x in t)) - out).max()))
    secs = time.perf_counter() - t0
    verdict(1, err <= 1e-12 and ok_props and secs < 1.0,
            f"{20 * 23 * 23} random pixels, max error {err:.2e}, range and monotone {ok_props}, {secs:.3f}s")


def test_c02_gradcheck(verdict):
    t0 = time.perf_counter()
    errs = [gradcheck_network(seed)[0] for seed in range(20)]
    secs = time.perf_counter() - t0
    worst = max(errs)
    verdict(2, worst < 1e-4 and secs < 60, f"20 networks, worst relative error {worst:.2e}, {secs:.1f}s")


def test_c03_homography(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    entry = 0.0
    for _ in range(20):
        true = random_homography(rng)
        h = reg.estimate_homography(reg.synth_correspondences(true, reg.checkerboard_points()))
        entry = max(entry, float(np.abs(h.matrix - true.matrix).max()))
    reproj = []
    for _ in range(50):
        true = random_homography(rng)
        pts = reg.checkerboard_points()
        h = reg.estimate_homography(reg.synth_correspondences(true, pts, 0.2, rng))
        reproj.append(reg.reprojection_error(h, reg.synth_correspondences(true, pts)).mean())
    secs = time.perf_counter() - t0
    mean = float(np.mean(reproj))
    verdict(3, entry < 1e-8 and mean < 0.5 and secs < 10,
            f"noise-free max entry error {entry:.1e}, noisy mean reprojection {mean:.3f}px over 50 trials, {secs:.2f}s")


def test_c04_flow_integer_shifts(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    radius, block = 6, 7
    good = total = 0
    # the extremes of the search window, then random shifts inside it
    shifts = [(radius, 0), (-radius, 0), (0, radius), (0, -radius), (radius, radius), (-radius, -radius)]
    shifts += [tuple(int(v) for v in rng.integers(-radius, radius + 1, 2)) for _ in range(6)]
    for i, (dx, dy) in enumerate(shifts):
        img = sg.render_pair(sg.generate_scene(100 + i), sg.LightingCondition.clear(1.0)).imgA
        ff = an.dense_flow(img, shift_image(img, dx, dy), radius=radius, block=block)
        g = img.mean(0)
        local_sd = np.sqrt(np.maximum(uniform_filter(g * g, block) - uniform_filter(g, block) ** 2, 0))
        m = radius + block
        keep = np.zeros(g.shape, bool)
        keep[m:-m, m:-m] = True
        keep &= local_sd > 0.02
        ok = (ff.flow[0] == dx) & (ff.flow[1] == dy)
        good += int(ok[keep].sum())
        total += int(keep.sum())
    secs = time.perf_counter() - t0
    rate = good / total
    verdict(4, rate >= 0.95 and secs < 30, f"{rate:.4f} of {total} textured interior pixels exact, {secs:.1f}s")


# trained pipeline -----------------------------------------------------------------------------


def test_c05_distillation(full_run, verdict):
    r = read_csv(full_run.root / "eval" / "distillation.csv")
    secs = float((full_run.root / "distill" / "main_seconds.txt").read_text())
    ok = r["ratio"] <= 0.3 and secs < 900
    verdict(5, bool(ok), f"held-out distance {r['final_distance']:.4f} vs untrained {r['baseline_distance']:.4f} "
                         f"(ratio {r['ratio']:.3f}, need <= 0.3), training {secs:.0f}s")


def test_c06_stability(full_run, verdict):
    r = read_csv(full_run.root / "eval" / "stability.csv")
    verdict(6, bool(r["ratio"] < 0.2), f"student drift {r['student_drift']:.4f}, teacher drift "
                                       f"{r['teacher_drift']:.4f}, ratio {r['ratio']:.3f}")


def test_c07_day_night_auc(full_run, verdict):
    rows = read_csv(full_run.root / "eval" / "separability.csv")
    auc = float(rows[(rows["b"] == "night") & (rows["pooling"] == "pixel")]["auc"][0])
    verdict(7, auc > 0.9, f"pixel AUC day vs night {auc:.4f}")


def test_c08_night_coverage(full_run, verdict):
    root = full_run.root
    rows = read_csv(root / "eval" / "coverage.csv")
    night = rows[rows["condition"] == "night"]
    # recompute the curve from the saved score maps and undetected-object masks
    samples, _ = sg.load_dataset(root / "data" / "eval")
    idx = [i for i, s in enumerate(samples) if s.lighting.label == "night"]
    scores = ntsr.load(root / "score" / "eval_scores.ntsr")[idx][:, 0]
    fn = ntsr.load(root / "eval" / "night_fn_mask.ntsr") > 0.5
    # pooling over images == stacking them into one tall image
    scores, fn = scores.reshape(-1, scores.shape[-1]), fn.reshape(-1, fn.shape[-1])
    oracle_ok = True
    for r in night:
        cov, flagged = coverage_count(scores, fn, r["threshold"])
        oracle_ok &= abs(cov - r["fn_coverage"]) <= 5e-7 and abs(flagged - r["flagged_fraction"]) <= 5e-7
    hits = night[(night["fn_coverage"] >= 0.70) & (night["flagged_fraction"] <= 0.45)]
    band = night[(night["threshold"] >= 0.2 - 1e-9) & (night["threshold"] <= 0.5 + 1e-9)]
    enrich = float(band["enrichment"].min())
    ok = bool(oracle_ok and len(hits) and enrich > 1.5)
    best = f"threshold {hits['threshold'][0]:.2f} covers {hits['fn_coverage'][0]:.3f} flagging {hits['flagged_fraction'][0]:.3f}" \
        if len(hits) else "no threshold meets coverage >= 0.70 with flagged <= 0.45"
    verdict(8, ok, f"{best}; min enrichment on [0.2, 0.5] {enrich:.2f}; oracle agrees {bool(oracle_ok)}")


def test_c09_alignment_lowers_distill_loss(full_run, verdict):
    r = read_csv(full_run.root / "eval" / "alignment.csv")
    verdict(9, bool(r["aligned_distill_loss"] <= r["raw_distill_loss"]),
            f"aligned {r['aligned_distill_loss']:.5f} vs raw {r['raw_distill_loss']:.5f}")


def test_c10_layer_ablation(full_run, verdict):
    rows = read_csv(full_run.root / "eval" / "layer_ablation.csv")
    order = sorted(rows, key=lambda r: -r["recall_overall"])
    text = " > ".join(f"{r['variant']} ({r['recall_overall']:.3f})" for r in order)
    seed = cf.parse_config(full_run.root / "config.ini").run.seed
    verdict(10, len(rows) >= 5, f"recall ordering {text} (run seed {seed})")


def test_c11_size_sweep(full_run, verdict):
    rows = read_csv(full_run.root / "sweep" / "sweep.csv")
    metric = {int(r["size"]): float(r["metric"]) for r in rows}
    gap = abs(metric[400] - metric[800]) / abs(metric[800])
    files = (full_run.root / "sweep" / "sweep.csv").exists() and (full_run.root / "sweep" / "sweep.svg").exists()
    verdict(11, gap <= 0.05 and files, f"metric at 400 {metric[400]:.4f}, at 800 {metric[800]:.4f}, "
                                       f"gap {100 * gap:.2f}%, csv+svg present {files}")


def test_c12_reproducible_and_fast(full_run, tiny_run, tmp_path, verdict):
    again = tmp_path / "run"
    assert run_cli("run", "--config", TINY, "--run", again) == 0
    first = {p.relative_to(tiny_run): p.read_bytes() for p in tiny_run.rglob("*.csv")}
    second = {p.relative_to(again): p.read_bytes() for p in again.rglob("*.csv")}
    same = first == second and len(first) > 0
    budget = full_run.seconds <= 1800
    how = "timed fresh" if full_run.fresh else "summed from run.log"
    verdict(12, same and budget, f"{len(first)} CSVs byte-identical across same-seed runs {same}; full pipeline "
                                 f"{full_run.seconds / 60:.1f} min ({how}, {os.cpu_count()} cpu)")
