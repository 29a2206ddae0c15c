import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from invisnet import evalkit as ek
from invisnet.backbone import Detection

from oracles import auc_pairs, box_iou, coverage_count

# reference statistics from the source publication (checked by hand)
DAY_FIT = (0.020, 0.028)
NIGHT_FIT = (0.268, 0.052)
LARGE_OFFSET_FRACTION = 0.026


# distributions ---------------------------------------------------------------------------


def test_fit_constant():
    f = ek.fit_gaussian([0.7, 0.7, 0.7])
    assert (f.mean, f.std, f.n) == (0.7, 0.0, 3)


def test_fit_two_points():
    f = ek.fit_gaussian([0.0, 1.0])
    assert (f.mean, f.std) == (0.5, 0.5)


def test_fit_sampling_oracle():
    x = np.random.default_rng(0).normal(*NIGHT_FIT, size=100_000)
    f = ek.fit_gaussian(x)
    assert abs(f.mean - NIGHT_FIT[0]) < 0.002 and abs(f.std - NIGHT_FIT[1]) < 0.002


def test_fit_empty():
    with pytest.raises(ValueError):
        ek.fit_gaussian([])


def test_separability_identical_is_half():
    x = np.random.default_rng(1).normal(size=300)
    assert ek.separability(x, x) == 0.5
    assert ek.separability([1, 1, 1], [1, 1]) == 0.5


def test_separability_disjoint():
    assert ek.separability([0.1, 0.2, 0.3], [0.5, 0.9]) == 1.0
    assert ek.separability([0.5, 0.9], [0.1, 0.2]) == 0.0


def test_separability_reference_gaussians():
    rng = np.random.default_rng(2)
    assert ek.separability(rng.normal(*DAY_FIT, 10_000), rng.normal(*NIGHT_FIT, 10_000)) > 0.99


@settings(max_examples=40, deadline=None)
@given(a=st.lists(st.integers(0, 6), min_size=1, max_size=25), b=st.lists(st.integers(0, 6), min_size=1, max_size=25))
def test_separability_matches_pair_count(a, b):
    # small integer supports force many ties
    assert ek.separability(a, b) == pytest.approx(auc_pairs(a, b), abs=1e-12)


def test_separability_empty():
    with pytest.raises(ValueError):
        ek.separability([], [1.0])


# coverage -----------------------------------------------------------------------------------


def test_coverage_threshold_limits():
    rng = np.random.default_rng(3)
    s, m = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8)) > 0.7
    r0 = ek.coverage(s, m, 0.0)
    assert (r0.fn_coverage, r0.flagged_fraction) == (1.0, 1.0)
    r1 = ek.coverage(s, m, 1.01)
    assert (r1.fn_coverage, r1.flagged_fraction) == (0.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_coverage_matches_loop(seed):
    rng = np.random.default_rng(seed)
    s, m = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32)) > 0.8
    for t in (0.1, 0.35, 0.5, 0.9):
        r = ek.coverage(s, m, t)
        cov, flagged = coverage_count(s, m, t)
        assert r.fn_coverage == cov and r.flagged_fraction == flagged


def test_coverage_empty_mask_flagged_absent():
    r = ek.coverage(np.ones((4, 4)), np.zeros((4, 4)), 0.5)
    assert not r.has_fn and r.fn_coverage is None and r.enrichment is None
    assert r.flagged_fraction == 1.0


def test_coverage_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        ek.coverage(np.ones((4, 4)), np.ones((4, 5)), 0.5)


@settings(max_examples=30, deadline=None)
@given(s=hnp.arrays(np.float64, (6, 6), elements=st.floats(0, 1)), seed=st.integers(0, 1000))
def test_coverage_monotone_in_threshold(s, seed):
    m = np.random.default_rng(seed).uniform(size=(6, 6)) > 0.5
    m[0, 0] = True
    reps = ek.coverage_curve(s, m, np.linspace(0, 1, 21))
    for a, b in zip(reps, reps[1:]):
        assert b.fn_coverage <= a.fn_coverage and b.flagged_fraction <= a.flagged_fraction
    assert all(0 <= r.fn_coverage <= 1 and 0 <= r.flagged_fraction <= 1 for r in reps)


def test_histogram_masses_sum_to_one():
    rng = np.random.default_rng(4)
    rows = ek.score_histogram(rng.uniform(size=(4, 16, 16)), rng.uniform(size=(4, 16, 16)) > 0.6, 20)
    assert len(rows) == 20
    assert sum(r[1] for r in rows) == pytest.approx(1.0) and sum(r[2] for r in rows) == pytest.approx(1.0)


# detection ---------------------------------------------------------------------------------


def box(x, y, w, h):
    return {"x": x, "y": y, "w": w, "h": h}


def test_detection_perfect():
    truth = [[box(1, 2, 10, 12), box(30, 30, 8, 8)]]
    preds = [[Detection(1.0, b["x"], b["y"], b["w"], b["h"]) for b in truth[0]]]
    rep = ek.detection_eval(preds, truth, ["day"])
    assert rep.overall.recall == 1.0 and rep.overall.mean_iou == 1.0


def test_detection_no_predictions():
    assert ek.detection_eval([[]], [[box(0, 0, 5, 5)]], ["night"]).per_condition["night"].recall == 0.0


def test_half_overlap_unit_squares_unmatched():
    assert box_iou((0, 0, 1, 1), (0.5, 0, 1, 1)) == pytest.approx(1 / 3, abs=1e-15)
    rep = ek.detection_eval([[Detection(0.9, 0.5, 0.0, 1.0, 1.0)]], [[box(0, 0, 1, 1)]], ["day"], 0.5)
    assert rep.overall.matched == 0


def test_iou_threshold_range():
    with pytest.raises(ValueError):
        ek.match_detections([], [], 1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_matching_is_one_to_one(seed):
    rng = np.random.default_rng(seed)
    truth = [box(*rng.uniform(0, 20, 2), *rng.uniform(4, 10, 2)) for _ in range(rng.integers(1, 5))]
    preds = [Detection(float(rng.uniform()), *rng.uniform(0, 20, 2), *rng.uniform(4, 10, 2)) for _ in range(rng.integers(0, 8))]
    pairs = ek.match_detections(preds, truth, 0.3)
    assert len({p for p, _, _ in pairs}) == len(pairs)
    assert len({t for _, t, _ in pairs}) == len(pairs)
    for p, t, iou in pairs:
        d, b = preds[p], truth[t]
        assert iou == pytest.approx(box_iou((d.x, d.y, d.w, d.h), (b["x"], b["y"], b["w"], b["h"])))
        assert iou >= 0.3


def test_undetected_mask_is_union_of_missed_objects():
    truth = [box(0, 0, 4, 4), box(10, 10, 4, 4)]
    masks = np.zeros((2, 16, 16), bool)
    masks[0, :4, :4] = True
    masks[1, 10:14, 10:14] = True
    out = ek.undetected_mask([Detection(0.9, 0, 0, 4, 4)], truth, masks)
    np.testing.assert_array_equal(out, masks[1])


# offsets -----------------------------------------------------------------------------------


def test_offsets_zero():
    s = ek.offset_stats([np.zeros((2, 8, 8))])
    assert s.frac_ge5 == 0 and s.mean_abs_dx == 0 and s.mean_abs_dy == 0
    assert s.hist_dx.sum() == pytest.approx(1.0)


def test_offsets_uniform_six():
    f = np.zeros((2, 8, 8))
    f[0] = 6
    s = ek.offset_stats([f])
    assert (s.frac_ge5, s.mean_abs_dx, s.mean_abs_dy) == (1.0, 6.0, 0.0)
    assert s.hist_dx[6] == 1.0


def test_offsets_constructed_mixture():
    rng = np.random.default_rng(5)
    flows = []
    for _ in range(20):
        f = np.zeros((2, 64, 64))
        f[0][rng.uniform(size=(64, 64)) < LARGE_OFFSET_FRACTION] = 6
        flows.append(f)
    assert abs(ek.offset_stats(flows).frac_ge5 - LARGE_OFFSET_FRACTION) <= 0.002


def test_offsets_empty():
    with pytest.raises(ValueError):
        ek.offset_stats([])


# sweep -----------------------------------------------------------------------------------


def fake_runner(size, seed):
    rng = np.random.default_rng([size, seed])
    return 1.0 - 1.0 / np.sqrt(size) + 0.001 * rng.normal()


def test_sweep_same_size_same_seed_identical():
    rep = ek.size_sweep(fake_runner, [100, 100], seed=3)
    assert rep.points[0].metric == rep.points[1].metric


def test_sweep_errors():
    with pytest.raises(ValueError, match="positive"):
        ek.size_sweep(fake_runner, [0, 10])
    with pytest.raises(ValueError, match="exceeds"):
        ek.size_sweep(fake_runner, [10, 100], available=50)
    with pytest.raises(ValueError):
        ek.SweepReport([ek.SweepPoint(100, 0.1, 0), ek.SweepPoint(50, 0.1, 0)])


def test_sweep_gap_and_plot(tmp_path):
    rep = ek.size_sweep(fake_runner, [50, 100, 200, 400, 800], seed=0)
    assert rep.relative_gap(400, 800) == pytest.approx(abs(rep.metric_at(400) - rep.metric_at(800)) / rep.metric_at(800))
    ek.plot_sweep(rep, tmp_path / "s.svg")
    assert (tmp_path / "s.svg").read_text().lstrip().startswith("<?xml")


def test_csv_and_table(tmp_path):
    ek.write_csv(tmp_path / "x.csv", ["a", "b"], [[1, 0.5], ["z", None]])
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "a,b" and len(lines) == 3
    assert "a" in ek.text_table(["a", "b"], [[1, 2]])
