"""Heatmap decoding, object keypoint similarity and ladder AP/AR."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synth import N_KEYPOINTS

# COCO per-keypoint sigmas (person keypoints convention); the OKS constant is k = 2 * sigma.
COCO_SIGMAS = np.array([.026, .025, .025, .035, .035, .079, .079, .072, .072,
                        .062, .062, .107, .107, .087, .087, .089, .089])
COCO_K = 2.0 * COCO_SIGMAS
OKS_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)


class EvaluationError(ValueError):
    pass


def decode_keypoints(heatmaps: np.ndarray, stride: int = 4) -> np.ndarray:
    """Decode K x H x W heatmaps into K x (x, y, score) in input pixels.

    Argmax cell, a quarter-cell shift toward the larger neighbour on each
    axis, then scaled by ``stride``.  A flat channel falls back to the grid
    centre with score 0.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    if hm.ndim != 3:
        raise ValueError(f"expected K x H x W heatmaps, got shape {hm.shape}")
    if not np.all(np.isfinite(hm)):
        raise ValueError("heatmaps contain non-finite values")
    k, h, w = hm.shape
    out = np.zeros((k, 3))
    for c in range(k):
        m = hm[c]
        if m.max() == m.min():
            out[c] = ((w - 1) / 2 * stride, (h - 1) / 2 * stride, 0.0)
            continue
        r, q = np.unravel_index(np.argmax(m), m.shape)
        x, y = float(q), float(r)
        if 0 < q < w - 1:
            x += 0.25 * np.sign(m[r, q + 1] - m[r, q - 1])
        if 0 < r < h - 1:
            y += 0.25 * np.sign(m[r + 1, q] - m[r - 1, q])
        out[c] = (x * stride, y * stride, min(max(m[r, q], 0.0), 1.0))
    return out


def decode_batch(heatmaps: np.ndarray, stride: int = 4) -> np.ndarray:
    return np.stack([decode_keypoints(h, stride) for h in heatmaps])


def oks(pred: np.ndarray, gt: np.ndarray, area: float, k: np.ndarray | None = None) -> float:
    """Mean over labelled keypoints (v > 0) of exp(-d^2 / (2 s^2 k^2)), with s^2 = area."""
    k = COCO_K if k is None else np.asarray(k, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    labelled = gt[:, 2] > 0
    if not labelled.any():
        raise EvaluationError("ground truth has no labelled keypoints")
    d2 = ((pred[:, :2] - gt[:, :2]) ** 2).sum(axis=1)
    e = np.exp(-d2 / (2.0 * area * k**2))
    return float(e[labelled].mean())


@dataclass
class Prediction:
    image_id: int
    keypoints: np.ndarray  # K x 3
    score: float


@dataclass
class GroundTruth:
    image_id: int
    keypoints: np.ndarray  # K x 3
    area: float


def _interp_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated precision over recall for score-sorted TP flags."""
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    valid = idx < precision.size
    return float(np.where(valid, precision[np.minimum(idx, precision.size - 1)], 0.0).mean())


def ap_ar(predictions: list[Prediction], ground_truths: list[GroundTruth], k: np.ndarray | None = None,
          thresholds: np.ndarray = OKS_THRESHOLDS) -> dict:
    """AP and AR averaged over the OKS threshold ladder.

    Predictions are taken in descending score order; each one is matched to
    the unmatched ground truth of its image with the highest OKS, and counts
    as a true positive when that OKS reaches the threshold.
    """
    gts = [g for g in ground_truths if (np.asarray(g.keypoints)[:, 2] > 0).any()]
    if not gts:
        raise EvaluationError("no ground truth with labelled keypoints")
    by_image: dict[int, list[int]] = {}
    for i, g in enumerate(gts):
        by_image.setdefault(int(g.image_id), []).append(i)
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    # OKS of each prediction against each candidate ground truth in its image
    cand = [[(j, oks(predictions[i].keypoints, gts[j].keypoints, gts[j].area, k))
             for j in by_image.get(int(predictions[i].image_id), [])] for i in order]
    aps, ars = [], []
    for t in thresholds:
        taken = np.zeros(len(gts), dtype=bool)
        tp = np.zeros(len(order))
        for rank, options in enumerate(cand):
            best, best_oks = -1, -1.0
            for j, o in options:
                if not taken[j] and o > best_oks:
                    best, best_oks = j, o
            if best >= 0 and best_oks >= t:
                taken[best] = True
                tp[rank] = 1.0
        aps.append(_interp_ap(tp, len(gts)))
        ars.append(float(tp.sum() / len(gts)))
    return {"AP": float(np.mean(aps)), "AR": float(np.mean(ars)), "thresholds": [float(t) for t in thresholds],
            "AP_per_threshold": aps, "AR_per_threshold": ars}


def predictions_from_heatmaps(heatmaps: np.ndarray, image_ids, stride: int = 4, scale: float = 1.0) -> list[Prediction]:
    """Decode a batch of heatmaps; ``scale`` maps decoded pixels back to annotation pixels."""
    preds = []
    for hm, image_id in zip(heatmaps, image_ids):
        kp = decode_keypoints(hm, stride)
        kp[:, :2] *= scale
        preds.append(Prediction(int(image_id), kp, float(kp[:, 2].mean())))
    return preds


def per_keypoint_error(predictions: list[Prediction], ground_truths: list[GroundTruth]) -> np.ndarray:
    """Mean pixel distance per keypoint over labelled instances (NaN where never labelled)."""
    gt_by_id = {int(g.image_id): g for g in ground_truths}
    total = np.zeros(N_KEYPOINTS)
    count = np.zeros(N_KEYPOINTS)
    for p in predictions:
        g = gt_by_id.get(int(p.image_id))
        if g is None:
            continue
        lab = g.keypoints[:, 2] > 0
        d = np.hypot(*(p.keypoints[:, :2] - g.keypoints[:, :2]).T)
        total[lab] += d[lab]
        count[lab] += 1
    with np.errstate(invalid="ignore"):
        return total / count


def write_predictions(predictions: list[Prediction], path) -> None:
    doc = [{"image_id": p.image_id, "category_id": 1,
            "keypoints": [float(v) for v in np.asarray(p.keypoints, dtype=np.float64).reshape(-1)],
            "score": float(p.score)} for p in predictions]
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def read_predictions(path) -> list[Prediction]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"{path}: malformed predictions JSON ({exc})") from exc
    out = []
    for i, item in enumerate(doc):
        try:
            kp = np.asarray(item["keypoints"], dtype=np.float64)
            out.append(Prediction(int(item["image_id"]), kp.reshape(N_KEYPOINTS, 3), float(item["score"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise EvaluationError(f"{path}: bad prediction entry {i} ({exc})") from exc
    return out
