import math

import numpy as np
import pytest

from btranspose.evaluation import (COCO_K, OKS_THRESHOLDS, EvaluationError, GroundTruth, Prediction, ap_ar,
                                   decode_keypoints, oks, per_keypoint_error, predictions_from_heatmaps,
                                   read_predictions, write_predictions)
from btranspose.synth import generate_sample, make_target_heatmaps


def test_constants():
    assert OKS_THRESHOLDS.tolist() == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
    assert COCO_K.shape == (17,) and np.all(COCO_K > 0)
    assert COCO_K[0] == pytest.approx(0.052) and COCO_K[11] == pytest.approx(0.214)


def test_decode_one_hot():
    hm = np.zeros((1, 64, 48))
    hm[0, 20, 30] = 1.0
    np.testing.assert_array_equal(decode_keypoints(hm)[0], [120.0, 80.0, 1.0])


def test_decode_quarter_shift():
    hm = np.zeros((1, 64, 48))
    hm[0, 20, 30] = 1.0
    hm[0, 20, 31] = 0.5
    hm[0, 19, 30] = 0.2
    np.testing.assert_allclose(decode_keypoints(hm)[0], [121.0, 79.0, 1.0])


def test_decode_flat_channel_fallback():
    out = decode_keypoints(np.full((2, 64, 48), 0.3))
    np.testing.assert_allclose(out, [[94.0, 126.0, 0.0]] * 2)


def test_decode_score_clamped_and_errors():
    hm = np.zeros((1, 4, 4))
    hm[0, 1, 1] = 3.0
    assert decode_keypoints(hm)[0, 2] == 1.0
    with pytest.raises(ValueError):
        decode_keypoints(np.full((1, 4, 4), np.nan))
    with pytest.raises(ValueError):
        decode_keypoints(np.zeros((4, 4)))


@pytest.mark.parametrize("seed", range(10))
def test_decode_gaussian_target_within_2px(seed):
    s = generate_sample(seed)
    maps, mask = make_target_heatmaps(s)
    dec = decode_keypoints(maps)
    d = np.hypot(*(dec[mask, :2] - s.keypoints[mask, :2]).T)
    assert d.max() <= 2.0


# -- OKS -----------------------------------------------------------------------------

def test_oks_exact_is_one():
    gt = generate_sample(0).keypoints
    assert oks(gt, gt, 5000.0) == 1.0


def test_oks_single_keypoint_at_scale():
    gt = np.zeros((17, 3))
    gt[5] = (50, 60, 2)
    pred = gt.copy()
    area = 900.0
    pred[5, 0] += math.sqrt(area) * COCO_K[5]
    assert oks(pred, gt, area) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_oks_hand_formula(rng):
    gt = np.zeros((17, 3))
    idx = [2, 9, 14]
    gt[idx, :2] = rng.uniform(0, 100, size=(3, 2))
    gt[idx, 2] = 2
    pred = gt.copy()
    pred[:, :2] += rng.normal(0, 4, size=(17, 2))
    area = 1234.5
    total = 0.0
    for i in idx:
        d2 = (pred[i, 0] - gt[i, 0]) ** 2 + (pred[i, 1] - gt[i, 1]) ** 2
        total += math.exp(-d2 / (2 * area * COCO_K[i] ** 2))
    assert abs(oks(pred, gt, area) - total / 3) < 1e-9


def test_oks_properties(rng):
    gt = generate_sample(1).keypoints
    pred = gt.copy()
    pred[:, :2] += rng.normal(0, 3, size=(17, 2))
    base = oks(pred, gt, 4000.0)
    assert 0.0 <= base <= 1.0
    worse = pred.copy()
    worse[4, :2] = gt[4, :2] + 2 * (pred[4, :2] - gt[4, :2])
    assert oks(worse, gt, 4000.0) <= base
    shift = np.array([7.5, -3.0, 0.0])
    assert oks(pred + shift, gt + shift, 4000.0) == pytest.approx(base, abs=1e-12)


def test_oks_requires_labels():
    with pytest.raises(EvaluationError):
        oks(np.zeros((17, 3)), np.zeros((17, 3)), 100.0)


# -- AP / AR ---------------------------------------------------------------------------

def single_keypoint_case(target_oks, image_id, area=400.0, score=1.0):
    gt = np.zeros((17, 3))
    gt[0] = (10, 10, 2)
    pred = gt.copy()
    pred[0, 0] += math.sqrt(-2 * area * COCO_K[0] ** 2 * math.log(target_oks))
    return Prediction(image_id, pred, score), GroundTruth(image_id, gt, area)


def brute_ladder(oks_values, n_gt):
    ar = [sum(o >= t for o in oks_values) / n_gt for t in OKS_THRESHOLDS]
    return float(np.mean(ar))


def test_two_image_ladder():
    p0, g0 = single_keypoint_case(0.93, 0, score=0.9)
    p1, g1 = single_keypoint_case(0.52, 1, score=0.8)
    res = ap_ar([p0, p1], [g0, g1])
    assert res["AR"] == pytest.approx(0.50)
    assert res["AR"] == pytest.approx(brute_ladder([0.93, 0.52], 2))
    assert res["AR_per_threshold"] == [1.0] + [0.5] * 8 + [0.0]


def test_ap_per_threshold_hand_values():
    p0, g0 = single_keypoint_case(0.93, 0, score=0.9)
    p1, g1 = single_keypoint_case(0.52, 1, score=0.8)
    res = ap_ar([p0, p1], [g0, g1])
    # one TP ranked first: precision 1 up to recall 0.5 -> 51 of 101 recall points
    assert res["AP_per_threshold"][0] == 1.0
    assert res["AP_per_threshold"][1] == pytest.approx(51 / 101)
    assert res["AP_per_threshold"][-1] == 0.0
    # reversed scores: the hit is ranked second, precision 1/2 over the same points
    p0.score, p1.score = 0.1, 0.9
    assert ap_ar([p0, p1], [g0, g1])["AP_per_threshold"][1] == pytest.approx(0.5 * 51 / 101)


def test_perfect_predictions():
    gts = [GroundTruth(i, generate_sample(i).keypoints, 5000.0) for i in range(4)]
    preds = [Prediction(g.image_id, g.keypoints.copy(), 1.0) for g in gts]
    res = ap_ar(preds, gts)
    assert res["AP"] == 1.0 and res["AR"] == 1.0


def test_no_predictions():
    gts = [GroundTruth(0, generate_sample(0).keypoints, 5000.0)]
    res = ap_ar([], gts)
    assert res["AP"] == 0.0 and res["AR"] == 0.0


def test_empty_dataset_errors():
    with pytest.raises(EvaluationError):
        ap_ar([], [])


def test_greedy_match_in_shared_image():
    p_good, g = single_keypoint_case(0.97, 0, score=0.5)
    p_rough, _ = single_keypoint_case(0.62, 0, score=0.9)
    res = ap_ar([p_good, p_rough], [g])
    # up to t = 0.6 the higher-scored rough guess claims the person; above it the good one does, ranked second
    assert res["AR"] == 1.0
    assert res["AP_per_threshold"] == [1.0] * 3 + [0.5] * 7
    assert res["AP"] == pytest.approx(0.65)


def test_decoded_targets_score_high():
    samples = [generate_sample(i) for i in range(8)]
    maps = np.stack([make_target_heatmaps(s)[0] for s in samples])
    preds = predictions_from_heatmaps(maps, range(8))
    res = ap_ar(preds, [GroundTruth(i, s.keypoints, s.area) for i, s in enumerate(samples)])
    assert res["AP"] >= 0.99


def test_predictions_file_round_trip(tmp_path):
    preds = [Prediction(3, np.arange(51, dtype=float).reshape(17, 3), 0.25)]
    write_predictions(preds, tmp_path / "p.json")
    back = read_predictions(tmp_path / "p.json")
    assert back[0].image_id == 3 and back[0].score == 0.25
    np.testing.assert_array_equal(back[0].keypoints, preds[0].keypoints)
    (tmp_path / "bad.json").write_text('[{"image_id": 1}]')
    with pytest.raises(EvaluationError):
        read_predictions(tmp_path / "bad.json")


def test_per_keypoint_error():
    gt = np.zeros((17, 3))
    gt[:, 2] = 2
    gt[3, 2] = 0
    pred = gt.copy()
    pred[:, 0] += 3.0
    err = per_keypoint_error([Prediction(0, pred, 1.0)], [GroundTruth(0, gt, 1.0)])
    assert np.isnan(err[3]) and np.allclose(np.delete(err, 3), 3.0)
