"""Pose training loop, prediction and dataset-level evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .evaluation import GroundTruth, ap_ar, oks, predictions_from_heatmaps
from .losses import SinkhornParams, heatmap_mse, sinkhorn_loss
from .model import BTranspose, ModelSpec
from .optim import Adam, MultiStepSchedule
from .synth import IMAGE_SIZE, PoseSample, augment, downscale_sample, make_target_heatmaps, sample_seed
from .tensor import Tensor, no_grad


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 230
    steps: int | None = None  # desk override: fixed number of updates instead of epochs
    base_lr: float = 1e-4
    lr_steps: tuple[int, ...] = (100, 150, 200, 220)
    lr_factor: float = 0.25
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.0
    loss: str = "l2"
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3
    augment: bool = True
    sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if list(self.lr_steps) != sorted(set(self.lr_steps)) or any(s >= self.epochs for s in self.lr_steps):
            raise ValueError(f"lr_steps {list(self.lr_steps)} must be strictly increasing and below epochs={self.epochs}")
        if self.loss not in ("l2", "sinkhorn"):
            raise ValueError(f"loss must be 'l2' or 'sinkhorn', got {self.loss!r}")


def scale_factor(spec: ModelSpec, source_size: tuple[int, int] = IMAGE_SIZE) -> int:
    """Integer downscale from dataset images to the model input (1 for the canonical 256 x 192)."""
    fh, fw = source_size[0] / spec.input_size[0], source_size[1] / spec.input_size[1]
    if fh != fw or fh != int(fh) or fh < 1:
        raise ValueError(f"model input {spec.input_size} is not an integer downscale of {source_size}")
    return int(fh)


def fit_to_model(samples: list[PoseSample], spec: ModelSpec) -> tuple[list[PoseSample], int]:
    if not samples:
        return [], 1
    factor = scale_factor(spec, samples[0].image.shape[1:])
    return [downscale_sample(s, factor) for s in samples], factor


def _targets(batch: list[PoseSample], spec: ModelSpec, sigma: float):
    stride = spec.input_size[0] // spec.heatmap_size[0]
    pairs = [make_target_heatmaps(s, sigma, spec.heatmap_size, stride) for s in batch]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)
    final_lr: float = 0.0
    steps: int = 0

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.trace])


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def loss_ratio(values, window: int = 20) -> float:
    """Mean of the last ``window`` losses over the mean of the first ``window``."""
    v = np.asarray(values, dtype=np.float64)
    return float(v[-window:].mean() / v[:window].mean())


def steps_to_threshold(values, ratio: float = 0.2, window: int = 20, reference: float | None = None) -> int | None:
    """First step (1-based count) whose smoothed loss is <= ratio * reference (default: initial window mean)."""
    v = np.asarray(values, dtype=np.float64)
    ref = v[:window].mean() if reference is None else reference
    hit = np.flatnonzero(smoothed(v, window) <= ratio * ref)
    hit = hit[hit >= window - 1]
    return int(hit[0]) + 1 if hit.size else None


def train(model: BTranspose, samples: list[PoseSample], cfg: TrainConfig, log=None,
          checkpoint_path=None, stop_ratio: float | None = None) -> TrainResult:
    """Adam with multi-step decay on ``samples`` (already at the model input resolution).

    The epoch count advances by batch_size / len(samples) per step.  A
    non-finite loss aborts before the update; the model is rolled back to the
    last weights that gave a finite loss and, when ``checkpoint_path`` is
    given, those are saved there.  ``stop_ratio`` ends the run once
    the smoothed loss reaches that fraction of its initial value.
    """
    if not samples:
        raise ValueError("training needs a nonempty sample list")
    spec = model.spec
    n = len(samples)
    total = cfg.steps if cfg.steps is not None else math.ceil(cfg.epochs * n / cfg.batch_size)
    opt = Adam(model.parameters(), lr=cfg.base_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    schedule = MultiStepSchedule(cfg.base_lr, cfg.lr_steps, cfg.lr_factor)
    sk = SinkhornParams(cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)
    rng = np.random.default_rng([cfg.seed, 3])
    model.train()
    result = TrainResult()
    t0 = time.perf_counter()
    good, good_step = None, 0
    for step in range(total):
        epoch = step * cfg.batch_size / n
        opt.lr = schedule.lr_at(epoch)
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = [samples[i] for i in idx]
        if cfg.augment:
            batch = [augment(s, sample_seed(cfg.seed, step * n + int(i))) for s, i in zip(batch, idx)]
        target, mask = _targets(batch, spec, cfg.sigma)
        images = Tensor(np.stack([s.image for s in batch]).astype(np.float32))
        pred, _ = model(images)
        if cfg.loss == "l2":
            loss = heatmap_mse(pred, target, mask)
        else:
            loss = sinkhorn_loss(pred, target, mask, sk)
        value = float(loss.item())
        if not math.isfinite(value):
            if good is not None:
                model.load_state_dict(good)
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, step=good_step)
            raise TrainingAborted(f"non-finite loss at step {step} (lr {opt.lr:g}); "
                                  f"last good weights {'saved to ' + str(checkpoint_path) if checkpoint_path else 'restored in the model'}")
        good, good_step = {k: v.copy() for k, v in model.state_dict().items()}, step
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"step": step, "epoch": epoch, "lr": opt.lr, "loss": value, "wall": time.perf_counter() - t0}
        result.trace.append(rec)
        if log is not None:
            log(rec)
        if stop_ratio is not None and steps_to_threshold(result.losses(), stop_ratio) is not None:
            break
    result.final_lr = opt.lr
    result.steps = len(result.trace)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, step=result.steps)
    return result


def predict(model: BTranspose, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode heatmaps for an N x 3 x H x W array."""
    model.eval()
    with no_grad():
        out = [model(Tensor(np.asarray(images[i:i + batch_size], dtype=np.float32)))[0].data
               for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + (model.spec.n_keypoints,) + model.spec.heatmap_size)


@dataclass
class EvalReport:
    ap: dict
    mean_oks: float
    predictions: list
    ground_truths: list


def evaluate(model: BTranspose, samples: list[PoseSample], image_ids=None, batch_size: int = 16) -> EvalReport:
    """Predict on full-resolution samples and score against their own annotations."""
    if not samples:
        raise ValueError("empty evaluation split")
    small, factor = fit_to_model(samples, model.spec)
    heatmaps = predict(model, np.stack([s.image for s in small]), batch_size)
    ids = list(range(len(samples))) if image_ids is None else list(image_ids)
    stride = model.spec.input_size[0] // model.spec.heatmap_size[0]
    preds = predictions_from_heatmaps(heatmaps, ids, stride=stride, scale=factor)
    gts = [GroundTruth(i, s.keypoints, s.area) for i, s in zip(ids, samples)]
    scores = [oks(p.keypoints, g.keypoints, g.area) for p, g in zip(preds, gts) if (g.keypoints[:, 2] > 0).any()]
    return EvalReport(ap_ar(preds, gts), float(np.mean(scores)), preds, gts)


def write_trace(trace: list[dict], path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
