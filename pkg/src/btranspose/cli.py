"""Command-line entry point: synth, pretrain, train, eval, explain, bench."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, load_pretrained
from .config import ConfigError, RunConfig, format_config, load_config
from .dino import DinoConfig, pretrain
from .evaluation import EvaluationError, decode_keypoints, per_keypoint_error, write_predictions
from .explain import ExplainError, explain_image, keypoint_index
from .model import ModelNameError, ModelSpec, build_model
from .synth import AnnotationError, KEYPOINT_NAMES, load_dataset, write_dataset
from .tensor import ShapeError, Tensor, no_grad
from .train import TrainConfig, TrainingAborted, evaluate, fit_to_model, train, write_trace

# exit codes by error category
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_MODEL = 5
EXIT_NUMERIC = 6
EXIT_IO = 7

_CATEGORIES = [
    (ConfigError, EXIT_USAGE),
    (AnnotationError, EXIT_DATA),
    (EvaluationError, EXIT_DATA),
    (CheckpointError, EXIT_CHECKPOINT),
    (ModelNameError, EXIT_MODEL),
    (ShapeError, EXIT_MODEL),
    (ExplainError, EXIT_USAGE),
    (TrainingAborted, EXIT_NUMERIC),
    (FloatingPointError, EXIT_NUMERIC),
    (OSError, EXIT_IO),
]


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def worker_cap(requested: int) -> int:
    """Honour BTK_THREADS as an upper bound on worker parallelism."""
    env = os.environ.get("BTK_THREADS")
    if env is None:
        return max(requested, 1)
    try:
        cap = int(env)
    except ValueError:
        raise ConfigError(f"BTK_THREADS must be an integer, got {env!r}") from None
    return max(min(requested, cap), 1)


def _spec(cfg: RunConfig) -> ModelSpec:
    return ModelSpec.from_descriptor(cfg.model)


def _report(out: Path, name: str, cfg: RunConfig, body: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps({"config": format_config(cfg), **body}, indent=1), encoding="utf-8")
    return path


def _load_split(path: str, what: str):
    root = Path(path)
    if not (root / "annotations.json").exists():
        raise CommandError(f"{what} dataset {root} has no annotations.json", EXIT_DATA)
    return load_dataset(root)


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    write_dataset(out, cfg.n_samples, cfg.seed, workers=worker_cap(cfg.workers))
    return {"samples": cfg.n_samples, "dir": str(out)}


def cmd_pretrain(cfg: RunConfig, out: Path) -> dict:
    samples, _ = _load_split(cfg.data, "pretraining")
    if not samples:
        raise CommandError("pretraining dataset is empty", EXIT_DATA)
    dcfg = DinoConfig(lr=cfg.dino_lr, batch_size=cfg.dino_batch, scope=cfg.dino_scope, centering=cfg.centering)
    images = np.stack([s.image for s in samples])
    result = pretrain(_spec(cfg), images, cfg.dino_steps, seed=cfg.seed, cfg=dcfg)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = result.save(out / "pretrained.btrw")
    write_trace(result.trace, out / "pretrain_trace.jsonl")
    body = {"checkpoint": str(ckpt), "steps": cfg.dino_steps,
            "teacher_std_initial": result.trace[0]["teacher_std"] if result.trace else None,
            "teacher_std_final": result.trace[-1]["teacher_std"] if result.trace else None}
    _report(out, "pretrain_report.json", cfg, body)
    return body


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs, steps=cfg.steps or None, base_lr=cfg.base_lr,
                       lr_steps=tuple(cfg.lr_steps), lr_factor=cfg.lr_factor, betas=(cfg.beta1, cfg.beta2),
                       weight_decay=cfg.weight_decay, loss=cfg.loss, sinkhorn_epsilon=cfg.sinkhorn_epsilon,
                       sinkhorn_iters=cfg.sinkhorn_iters, augment=cfg.augment, seed=cfg.seed)


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    samples, _ = _load_split(cfg.data, "training")
    model = build_model(cfg.model, seed=cfg.seed)
    loaded = load_pretrained(model, cfg.pretrained) if cfg.pretrained else []
    small, _ = fit_to_model(samples, model.spec)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, small, _train_config(cfg), checkpoint_path=out / "model.btrw")
    write_trace(result.trace, out / "train_trace.jsonl")
    body = {"checkpoint": str(out / "model.btrw"), "steps": result.steps, "final_lr": result.final_lr,
            "initial_loss": result.trace[0]["loss"], "final_loss": result.trace[-1]["loss"],
            "pretrained_tensors": len(loaded)}
    if Path(cfg.eval_data, "annotations.json").exists():
        val, records = load_dataset(cfg.eval_data)
        if val:
            rep = evaluate(model, val, [r.image_id for r in records])
            body.update({"AP": rep.ap["AP"], "AR": rep.ap["AR"], "mean_oks": rep.mean_oks})
    _report(out, "train_report.json", cfg, body)
    return body


def _checkpoint_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("this command needs checkpoint = PATH")
    model, ckpt = load_checkpoint(cfg.checkpoint)
    if cfg.model and ModelSpec.from_descriptor(cfg.model) != model.spec:
        raise CommandError(f"checkpoint holds {ckpt.descriptor!r} but the config names {cfg.model!r}", EXIT_MODEL)
    return model


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    model = _checkpoint_model(cfg)
    samples, records = _load_split(cfg.eval_data, "evaluation")
    if not samples:
        raise CommandError("evaluation split is empty", EXIT_DATA)
    rep = evaluate(model, samples, [r.image_id for r in records])
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(rep.predictions, out / "predictions.json")
    err = per_keypoint_error(rep.predictions, rep.ground_truths)
    body = {"AP": rep.ap["AP"], "AR": rep.ap["AR"], "thresholds": rep.ap["thresholds"],
            "AP_per_threshold": rep.ap["AP_per_threshold"], "AR_per_threshold": rep.ap["AR_per_threshold"],
            "mean_oks": rep.mean_oks,
            "per_keypoint_mean_error": {n: (None if np.isnan(e) else float(e)) for n, e in zip(KEYPOINT_NAMES, err)}}
    _report(out, "eval_report.json", cfg, body)
    return body


def cmd_explain(cfg: RunConfig, out: Path) -> dict:
    kps = [keypoint_index(k) for k in cfg.keypoints]
    model = _checkpoint_model(cfg)
    samples, records = _load_split(cfg.eval_data, "explain")
    by_id = {r.image_id: s for r, s in zip(records, samples)}
    if cfg.image_id not in by_id:
        raise CommandError(f"image_id {cfg.image_id} not in {cfg.eval_data}", EXIT_DATA)
    small, _ = fit_to_model([by_id[cfg.image_id]], model.spec)
    image = small[0].image
    model.eval()
    model.set_retain(True)
    with no_grad():
        heatmaps, record = model(Tensor(image[None].astype(np.float32)))
    stride = model.spec.input_size[0] // model.spec.heatmap_size[0]
    pred = decode_keypoints(heatmaps.data[0], stride)
    files = explain_image(image, record, pred, kps, out, cfg.image_id, head=None if cfg.head < 0 else cfg.head)
    return {"files": [str(f) for f in files]}


def cmd_bench(cfg: RunConfig, out: Path) -> dict:
    model = _checkpoint_model(cfg) if cfg.checkpoint else build_model(cfg.model, seed=cfg.seed)
    model.eval()
    h, w = model.spec.input_size
    x = Tensor(np.random.default_rng(cfg.seed).random((cfg.bench_batch, 3, h, w), dtype=np.float32))
    with no_grad():
        model(x)  # warm-up
        lat = []
        for _ in range(cfg.bench_iters):
            t = time.perf_counter()
            model(x)
            lat.append(time.perf_counter() - t)
    lat = np.array(lat)
    body = {"iterations": cfg.bench_iters, "batch": cfg.bench_batch,
            "images_per_s": float(cfg.bench_batch / lat.mean()), "mean_latency_s": float(lat.mean()),
            "p95_latency_s": float(np.percentile(lat, 95))}
    _report(out, "bench_report.json", cfg, body)
    return body


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "explain": cmd_explain, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="btranspose", description="Pose models with bottleneck and encoder attention.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default="out", help="output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        sys.stdout.write(format_config(cfg))
        body = COMMANDS[args.command](cfg, Path(args.out))
        print(json.dumps(body, indent=1))
        return EXIT_OK
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # map known failures to their category code
        for kind, code in _CATEGORIES:
            if isinstance(exc, kind):
                print(f"error: {exc}", file=sys.stderr)
                return code
        traceback.print_exc()
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
