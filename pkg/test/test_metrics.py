import itertools
import json
import math
import unittest
from collections import deque

import numpy as np
import pytest

from errors import ShapeError
from metrics import (
    REGIONS,
    dice,
    evaluate,
    evaluate_region,
    hausdorff,
    jaccard,
    label_components,
    lesion_sens_spec,
    match_lesions,
    metrics_table,
    overlap_matrix,
    summarize_subjects,
    surface_voxels,
    write_subject_reports,
)


def _bfs_count(mask):
    """Component count by breadth-first search over the full neighborhood."""
    mask = np.asarray(mask, bool)
    seen = np.zeros_like(mask)
    offsets = [d for d in itertools.product((-1, 0, 1), repeat=mask.ndim) if any(d)]
    count = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            point = queue.popleft()
            for d in offsets:
                n = tuple(p + o for p, o in zip(point, d))
                if all(0 <= c < s for c, s in zip(n, mask.shape)) and mask[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
    return count


def _brute_hausdorff(a, b, percentile):
    pa = np.argwhere(surface_voxels(a)).astype(float)
    pb = np.argwhere(surface_voxels(b)).astype(float)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return pooled.max() if percentile >= 100 else np.percentile(pooled, percentile)


@pytest.fixture
def random_masks():
    rng = np.random.default_rng(21)
    return [rng.random((6, 9, 9)) > 0.8 for _ in range(4)]


def test_component_count_matches_bfs(random_masks):
    for mask in random_masks:
        assert label_components(mask).count == _bfs_count(mask)


def test_diagonal_voxels_join_under_full_connectivity():
    mask = np.zeros((3, 3, 3), bool)
    mask[0, 0, 0] = mask[1, 1, 1] = True
    assert label_components(mask).count == 1
    assert label_components(mask, connectivity=1).count == 2


def test_components_and_sizes():
    mask = np.zeros((5, 5), bool)
    mask[0, :2] = True
    mask[3:, 3:] = True
    lesions = label_components(mask)
    assert lesions.sizes().tolist() == [2, 4]
    assert [len(c) for c in lesions.components] == [2, 4]
    assert lesions.mask(2).sum() == 4


def test_overlap_and_greedy_matching():
    truth = np.zeros((1, 10, 10), bool)
    truth[0, 0:3, 0:3] = True
    truth[0, 6:9, 6:9] = True
    pred = np.zeros_like(truth)
    pred[0, 1:4, 1:4] = True
    pred[0, 0, 8] = True
    t, p = label_components(truth), label_components(pred)
    assert overlap_matrix(p, t).sum() == truth.size
    assert match_lesions(p, t) == [(1, 2, 4)]


def test_matching_tie_break_prefers_small_ids():
    truth = np.zeros((1, 3, 7), bool)
    truth[0, 1, 0:3] = True
    truth[0, 1, 4:7] = True
    pred = np.zeros_like(truth)
    pred[0, 0:3, 2:5] = True
    assert match_lesions(label_components(pred), label_components(truth)) == [(1, 1, 1)]


class TestOverlapScores(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(3)
        self.pred = rng.random((4, 8, 8)) > 0.5
        self.truth = rng.random((4, 8, 8)) > 0.5

    def test_dice_equals_f1(self):
        tp = np.sum(self.pred & self.truth)
        fp = np.sum(self.pred & ~self.truth)
        fn = np.sum(~self.pred & self.truth)
        self.assertAlmostEqual(dice(self.pred, self.truth), 2 * tp / (2 * tp + fp + fn))

    def test_jaccard_identity(self):
        d = dice(self.pred, self.truth)
        self.assertAlmostEqual(jaccard(self.pred, self.truth), d / (2 - d))

    def test_empty_masks(self):
        empty = np.zeros((3, 3), bool)
        self.assertEqual(dice(empty, empty), 1.0)
        self.assertEqual(jaccard(empty, empty), 1.0)
        self.assertEqual(dice(empty, ~empty), 0.0)

    def test_sens_spec(self):
        pred = np.array([1, 1, 0, 0], bool)
        truth = np.array([1, 0, 1, 0], bool)
        self.assertEqual(lesion_sens_spec(pred, truth), (0.5, 0.5))
        self.assertEqual(lesion_sens_spec(pred, np.zeros(4, bool))[0], None)
        self.assertEqual(lesion_sens_spec(pred, np.ones(4, bool))[1], None)


def test_surface_voxels_of_a_cube():
    mask = np.zeros((5, 5, 5), bool)
    mask[1:4, 1:4, 1:4] = True
    surface = surface_voxels(mask)
    assert surface.sum() == 26
    assert not surface[2, 2, 2]


def test_hausdorff_matches_all_pairs(random_masks):
    for a, b in zip(random_masks, random_masks[1:]):
        assert hausdorff(a, b, 100) == pytest.approx(_brute_hausdorff(a, b, 100))
        assert hausdorff(a, b, 95) == pytest.approx(_brute_hausdorff(a, b, 95))
        assert hausdorff(a, b, 95) <= hausdorff(a, b, 100) + 1e-12


def test_hausdorff_sentinels_and_spacing():
    empty = np.zeros((4, 6, 8), bool)
    full = empty.copy()
    full[1, 2, 3] = True
    assert hausdorff(empty, empty) == 0.0
    assert hausdorff(full, empty, spacing=(2.0, 1.0, 1.0)) == pytest.approx(math.sqrt(64 + 36 + 64))
    shifted = empty.copy()
    shifted[3, 2, 3] = True
    assert hausdorff(full, shifted, 100, spacing=(2.0, 1.0, 1.0)) == pytest.approx(4.0)
    with pytest.raises(ShapeError):
        hausdorff(full, np.zeros((4, 6, 7), bool))


def _labels_pair():
    truth = np.zeros((4, 12, 12), dtype=np.uint8)
    truth[1:3, 2:6, 2:6] = 2
    truth[1:3, 3:5, 3:5] = 4
    truth[2, 9:11, 9:11] = 1
    pred = np.zeros_like(truth)
    pred[1:3, 2:6, 3:7] = 2
    pred[1:3, 3:5, 4:6] = 4
    pred[0, 10, 0] = 1
    return pred, truth


def test_evaluate_regions():
    pred, truth = _labels_pair()
    reports = evaluate(pred, truth)
    assert set(reports) == set(REGIONS)
    wt = reports["WT"]
    assert wt.n_truth_lesions == 2 and wt.n_pred_lesions == 2
    assert wt.lesion_fp == 1 and wt.lesion_fn == 1
    assert wt.dice == pytest.approx(dice(pred > 0, truth > 0))
    assert wt.lw_dice == pytest.approx(wt.pairs[0]["dice"] / 3)
    assert wt.lw_sens == pytest.approx(wt.pairs[0]["sens"] / 2)
    assert wt.hd95 <= wt.haus

    et = reports["ET"]
    assert et.n_truth_lesions == 1 and et.lesion_fp == 0 and et.lesion_fn == 0
    assert et.lw_dice == pytest.approx(et.dice)


def test_evaluate_perfect_and_empty():
    _, truth = _labels_pair()
    perfect = evaluate(truth, truth)
    for report in perfect.values():
        assert report.dice == 1.0 and report.hd95 == 0.0 and report.lw_dice == 1.0
    empty = np.zeros_like(truth)
    reports = evaluate(empty, empty)
    assert reports["WT"].lw_dice == 1.0 and reports["WT"].lw_sens is None
    assert reports["WT"].sens is None


def test_evaluate_shape_mismatch():
    with pytest.raises(ShapeError):
        evaluate(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))


def test_region_evaluation_accepts_2d():
    pred = np.zeros((6, 6), bool)
    pred[1:3, 1:3] = True
    report = evaluate_region(pred, pred, "WT")
    assert report.dice == 1.0 and report.n_truth_lesions == 1


def test_summary_table_and_reports(tmp_path):
    pred, truth = _labels_pair()
    reports = {"a": evaluate(pred, truth), "b": evaluate(truth, truth)}
    summary = summarize_subjects(reports)
    assert summary.loc["WT", "dice"] == pytest.approx((reports["a"]["WT"].dice + 1.0) / 2)

    table = metrics_table(summary)
    assert list(table.columns) == [
        "Dice [%] WT", "Dice [%] ET", "Dice [%] TC",
        "HD95 [mm] WT", "HD95 [mm] ET", "HD95 [mm] TC",
        "LW Dice [%] WT", "LW Dice [%] ET", "LW Dice [%] TC",
    ]
    assert table.loc[0, "Dice [%] WT"] == pytest.approx(100 * summary.loc["WT", "dice"])

    paths = write_subject_reports(reports, tmp_path)
    with open(paths[0]) as f:
        saved = json.load(f)
    assert saved["WT"]["n_truth_lesions"] == 2
    assert saved["WT"]["pairs"][0]["truth_id"] == 1


def _bfs_components(mask):
    """Components as voxel sets, numbered by their first voxel in raster order."""
    mask = np.asarray(mask, bool)
    seen = np.zeros_like(mask)
    offsets = [d for d in itertools.product((-1, 0, 1), repeat=mask.ndim) if any(d)]
    components = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        members, queue = {start}, deque([start])
        while queue:
            point = queue.popleft()
            for d in offsets:
                n = tuple(p + o for p, o in zip(point, d))
                if all(0 <= c < s for c, s in zip(n, mask.shape)) and mask[n] and not seen[n]:
                    seen[n] = True
                    members.add(n)
                    queue.append(n)
        components.append(members)
    return components


def _brute_surface(voxels, shape):
    faces = [d for d in itertools.product((-1, 0, 1), repeat=len(shape)) if sum(map(abs, d)) == 1]
    surface = []
    for v in voxels:
        for d in faces:
            n = tuple(p + o for p, o in zip(v, d))
            if not all(0 <= c < s for c, s in zip(n, shape)) or n not in voxels:
                surface.append(v)
                break
    return np.array(sorted(surface), dtype=float).reshape(-1, len(shape))


def _brute_distance(a, b, shape, percentile):
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.sqrt(sum(s * s for s in shape))
    pa, pb = _brute_surface(a, shape), _brute_surface(b, shape)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(pooled.max()) if percentile >= 100 else float(np.percentile(pooled, percentile))


def _brute_region(pred, truth):
    shape = pred.shape
    p_vox = set(zip(*np.nonzero(pred)))
    t_vox = set(zip(*np.nonzero(truth)))
    both, total = len(p_vox & t_vox), len(p_vox) + len(t_vox)
    negatives = pred.size - len(t_vox)

    p_comp, t_comp = _bfs_components(pred), _bfs_components(truth)
    candidates = sorted((-len(t & p), ti + 1, pi + 1)
                        for ti, t in enumerate(t_comp) for pi, p in enumerate(p_comp) if t & p)
    used_t, used_p, pairs = set(), set(), []
    for neg, ti, pi in candidates:
        if ti in used_t or pi in used_p:
            continue
        used_t.add(ti)
        used_p.add(pi)
        t, p = t_comp[ti - 1], p_comp[pi - 1]
        pairs.append({"truth_id": ti, "pred_id": pi, "dice": 2 * -neg / (len(t) + len(p)),
                      "sens": -neg / len(t), "hd95": _brute_distance(p, t, shape, 95)})
    pairs.sort(key=lambda pair: (pair["truth_id"], pair["pred_id"]))
    scored = len(pairs) + (len(p_comp) - len(pairs)) + (len(t_comp) - len(pairs))
    return {
        "dice": 2 * both / total if total else 1.0,
        "sens": both / len(t_vox) if t_vox else None,
        "spec": (pred.size - len(p_vox | t_vox)) / negatives if negatives else None,
        "haus": _brute_distance(p_vox, t_vox, shape, 100),
        "hd95": _brute_distance(p_vox, t_vox, shape, 95),
        "lw_dice": sum(pair["dice"] for pair in pairs) / scored if scored else 1.0,
        "lw_sens": sum(pair["sens"] for pair in pairs) / len(t_comp) if t_comp else None,
        "lesion_fp": len(p_comp) - len(pairs),
        "lesion_fn": len(t_comp) - len(pairs),
        "pairs": pairs,
    }


def _random_label_pair(rng):
    shape = tuple(rng.integers(2, 9, size=3))
    truth = rng.choice(np.array([0, 1, 2, 4], np.uint8), size=shape, p=[0.7, 0.1, 0.1, 0.1])
    pred = truth.copy()
    noisy = rng.random(shape) < 0.3
    pred[noisy] = rng.choice(np.array([0, 1, 2, 4], np.uint8), size=int(noisy.sum()), p=[0.7, 0.1, 0.1, 0.1])
    return pred, truth


def _assert_optional_close(value, expected):
    if expected is None:
        assert value is None
    else:
        assert value == pytest.approx(expected, abs=1e-9)


def test_evaluate_matches_brute_force_evaluator():
    rng = np.random.default_rng(2718)
    for _ in range(200):
        pred, truth = _random_label_pair(rng)
        reports = evaluate(pred, truth)
        for region, values in REGIONS.items():
            report = reports[region]
            expected = _brute_region(np.isin(pred, values), np.isin(truth, values))
            assert report.lesion_fp == expected["lesion_fp"]
            assert report.lesion_fn == expected["lesion_fn"]
            assert [(p["truth_id"], p["pred_id"]) for p in report.pairs] == \
                [(p["truth_id"], p["pred_id"]) for p in expected["pairs"]]
            for got, want in zip(report.pairs, expected["pairs"]):
                for key in ("dice", "sens", "hd95"):
                    assert got[key] == pytest.approx(want[key], abs=1e-9)
            for key in ("dice", "sens", "spec", "haus", "hd95", "lw_dice", "lw_sens"):
                _assert_optional_close(getattr(report, key), expected[key])


def test_overlap_identities_on_random_masks():
    rng = np.random.default_rng(100)
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, size=3))
        pred = rng.random(shape) < rng.uniform(0.1, 0.9)
        truth = rng.random(shape) < rng.uniform(0.1, 0.9)
        tp = np.sum(pred & truth)
        fp = np.sum(pred & ~truth)
        fn = np.sum(~pred & truth)
        d = dice(pred, truth)
        f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
        assert abs(d - f1) <= 1e-9
        assert abs(jaccard(pred, truth) - d / (2 - d)) <= 1e-9


def _separated_lesions():
    truth = np.zeros((3, 16, 16), bool)
    pred = np.zeros_like(truth)
    truth[1, 1:5, 1:5] = True
    pred[1, 1:5, 2:6] = True          # overlap 12 of 16
    truth[1, 10:12, 2:4] = True
    pred[1, 10:12, 2:3] = True        # overlap 2
    truth[0:2, 2:4, 11:15] = True
    pred[0:2, 2:4, 12:15] = True      # overlap 12 of 16
    pred[2, 14, 14] = True            # unmatched prediction
    return pred, truth


def test_lesion_wise_dice_ignores_component_numbering():
    pred, truth = _separated_lesions()
    base = evaluate_region(pred, truth)
    for axes in [(1,), (2,), (1, 2), (0, 1, 2)]:
        flipped = evaluate_region(np.flip(pred, axes), np.flip(truth, axes))
        assert flipped.lw_dice == pytest.approx(base.lw_dice, abs=1e-12)
        assert flipped.lw_sens == pytest.approx(base.lw_sens, abs=1e-12)
        assert sorted(p["dice"] for p in flipped.pairs) == \
            pytest.approx(sorted(p["dice"] for p in base.pairs))


def test_far_duplicate_lesion_is_weighted_equally():
    pred, truth = _separated_lesions()
    base = evaluate_region(pred, truth)
    scored = len(base.pairs) + base.lesion_fp + base.lesion_fn

    wide_pred = np.zeros((3, 16, 40), bool)
    wide_truth = np.zeros_like(wide_pred)
    wide_pred[:, :, :16], wide_truth[:, :, :16] = pred, truth
    # copy of the small 2x2 lesion and its prediction, far from everything else
    wide_truth[1, 10:12, 32:34] = True
    wide_pred[1, 10:12, 32:33] = True
    duplicate_dice = 2 * 2 / (4 + 2)

    widened = evaluate_region(wide_pred, wide_truth)
    assert widened.lw_dice == pytest.approx((base.lw_dice * scored + duplicate_dice) / (scored + 1), abs=1e-12)
