"""Self-distillation pretraining of the backbone with an EMA teacher and output centering."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import functional as F
from .checkpoint import FLAG_BACKBONE_ONLY, Checkpoint, encode
from .encoder import flatten_grid
from .model import BTranspose, ModelSpec
from .nn import Linear, Module, Parameter
from .optim import Adam
from .tensor import Tensor, mean, no_grad, sqrt, tsum

SCOPES = {"groups": ("backbone.",), "groups+encoder": ("backbone.", "projection.", "encoder.")}


@dataclass(frozen=True)
class DinoConfig:
    n_prototypes: int = 256
    hidden: int = 128
    bottleneck: int = 64
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    centering: bool = True
    lr: float = 1e-3
    batch_size: int = 16
    scope: str = "groups"
    crop_scale: tuple[float, float] = (0.4, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)  # relative to the image aspect
    flip_prob: float = 0.5
    jitter: float = 0.4

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {sorted(SCOPES)}, got {self.scope!r}")


# -- views ----------------------------------------------------------------------

def sample_crop(rng: np.random.Generator, size: tuple[int, int], scale=(0.4, 1.0),
                ratio=(3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """Random (top, left, height, width) covering a ``scale`` fraction of the area, inside the image."""
    h, w = size
    area = rng.uniform(*scale) * h * w
    aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1]))) * w / h
    ch = int(round(math.sqrt(area / aspect)))
    cw = int(round(math.sqrt(area * aspect)))
    ch, cw = min(max(ch, 1), h), min(max(cw, 1), w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return top, left, ch, cw


def resized_crop(image: np.ndarray, box: tuple[int, int, int, int], out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of the crop box to ``out_size`` (pixel centres aligned at the box corners)."""
    top, left, ch, cw = box
    oh, ow = out_size
    if (ch, cw) == (oh, ow):
        return image[:, top:top + ch, left:left + cw].copy()
    sy = (ch - 1) / (oh - 1) if oh > 1 else 0.0
    sx = (cw - 1) / (ow - 1) if ow > 1 else 0.0
    return np.stack([ndimage.affine_transform(c, np.diag([sy, sx]), offset=(top, left), output_shape=out_size,
                                              order=1, mode="nearest") for c in image]).astype(image.dtype)


def _one_view(image: np.ndarray, rng: np.random.Generator, out_size, cfg: DinoConfig) -> np.ndarray:
    box = sample_crop(rng, image.shape[1:], cfg.crop_scale, cfg.crop_ratio)
    view = resized_crop(image, box, out_size)
    if rng.random() < cfg.flip_prob:
        view = view[:, :, ::-1]
    if cfg.jitter > 0:
        b = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
        c = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
        view = view * b
        view = (view - view.mean()) * c + view.mean()
    return np.clip(view, 0.0, 1.0).astype(image.dtype)


def augment_views(image: np.ndarray, seed, out_size: tuple[int, int] | None = None,
                  cfg: DinoConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two independent crop/flip/jitter views of a C x H x W image, resized to ``out_size``."""
    cfg = cfg or DinoConfig()
    out_size = tuple(out_size or image.shape[1:])
    rng = np.random.default_rng(seed)
    return _one_view(image, rng, out_size, cfg), _one_view(image, rng, out_size, cfg)


def identity_views() -> DinoConfig:
    """Augmentation settings under which both views equal the input."""
    return DinoConfig(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_prob=0.0, jitter=0.0)


# -- networks -------------------------------------------------------------------

def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / sqrt(tsum(x * x, axis=-1, keepdims=True) + eps)


class DinoHead(Module):
    """Three-layer GELU MLP to a bottleneck, l2-normalised, then a weight-normalised projection to K prototypes."""

    def __init__(self, in_dim: int, rng: np.random.Generator, hidden: int = 128, bottleneck: int = 64,
                 n_prototypes: int = 256):
        super().__init__()
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, bottleneck, rng)
        self.prototypes = Parameter(rng.normal(0.0, 1.0, (n_prototypes, bottleneck)))

    def forward(self, x: Tensor) -> Tensor:
        x = F.gelu(self.fc1(x))
        x = F.gelu(self.fc2(x))
        x = l2_normalize(self.fc3(x))
        return F.linear(x, l2_normalize(self.prototypes))


class DinoNet(Module):
    """Backbone (optionally with projection and encoder), global average pool, DINO head."""

    def __init__(self, spec: ModelSpec, cfg: DinoConfig, seed: int = 0):
        super().__init__()
        base = BTranspose(spec, seed=seed)
        self.spec = spec
        self.backbone = base.backbone
        if cfg.scope == "groups+encoder":
            self.projection = base.projection
            self.encoder = base.encoder
            dim = spec.encoder.d_model
        else:
            dim = base.backbone.out_channels
        self.head = DinoHead(dim, np.random.default_rng([seed, 1]), cfg.hidden, cfg.bottleneck, cfg.n_prototypes)

    def features(self, x: Tensor) -> Tensor:
        feat = self.backbone(x)
        if hasattr(self, "encoder"):
            return mean(self.encoder(self.projection(feat)), axis=1)
        return mean(flatten_grid(feat), axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))


# -- loss and updates -----------------------------------------------------------

def teacher_probs(teacher_logits: np.ndarray, center: np.ndarray, tau: float) -> np.ndarray:
    z = (np.asarray(teacher_logits) - center) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dino_loss(student_logits: Tensor, teacher_logits: np.ndarray, center: np.ndarray,
              tau_student: float = 0.1, tau_teacher: float = 0.04) -> Tensor:
    """Batch mean of H(p_t, p_s); the teacher side is a constant."""
    p_t = teacher_probs(teacher_logits, center, tau_teacher).astype(student_logits.dtype)
    log_p_s = F.log_softmax(student_logits * (1.0 / tau_student), axis=-1)
    return mean(tsum(log_p_s * (-p_t), axis=-1))


def ema_update(teacher: Module, student: Module, m: float) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s, parameter by parameter."""
    tp = dict(teacher.named_parameters())
    sp = dict(student.named_parameters())
    if tp.keys() != sp.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, t in tp.items():
        s = sp[name]
        if t.shape != s.shape:
            raise ValueError(f"shape drift in {name}: teacher {t.shape}, student {s.shape}")
        t.data[...] = m * t.data + (1.0 - m) * s.data


def center_update(center: np.ndarray, teacher_outputs: np.ndarray, momentum: float = 0.9) -> np.ndarray:
    batch = np.asarray(teacher_outputs)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ValueError(f"expected a nonempty B x K batch, got shape {batch.shape}")
    return momentum * center + (1.0 - momentum) * batch.mean(axis=0)


@dataclass
class DinoState:
    student: DinoNet
    teacher: DinoNet
    center: np.ndarray
    cfg: DinoConfig
    step: int = 0


def init_state(spec: ModelSpec, cfg: DinoConfig | None = None, seed: int = 0) -> DinoState:
    cfg = cfg or DinoConfig()
    student = DinoNet(spec, cfg, seed)
    teacher = DinoNet(spec, cfg, seed)
    teacher.load_state_dict(student.state_dict())
    for p in teacher.parameters():
        p.requires_grad = False
    return DinoState(student, teacher, np.zeros(cfg.n_prototypes, dtype=np.float64), cfg)


@dataclass
class PretrainResult:
    state: DinoState
    trace: list[dict] = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        """Teacher weights inside the pretraining scope, flagged as backbone-only."""
        prefixes = SCOPES[self.state.cfg.scope]
        tensors = {k: v.copy() for k, v in self.state.teacher.state_dict().items() if k.startswith(prefixes)}
        return Checkpoint(self.state.student.spec.descriptor(), self.state.step, FLAG_BACKBONE_ONLY, tensors)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(encode(self.checkpoint()))
        return path


def _batch_views(images: np.ndarray, idx: np.ndarray, seeds, out_size, cfg: DinoConfig):
    pairs = [augment_views(images[i], s, out_size, cfg) for i, s in zip(idx, seeds)]
    return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])


def pretrain(spec: ModelSpec, images: np.ndarray, steps: int, seed: int = 0, cfg: DinoConfig | None = None,
             log=None) -> PretrainResult:
    """Run the self-distillation loop over ``images`` (N x 3 x H x W) for ``steps`` updates.

    Each step draws a batch, makes two views per image, feeds both views to
    student and teacher, applies the cross-view loss, takes an Adam step on
    the student, then updates the teacher (EMA) and the center.  The trace
    records loss and the batch standard deviation of teacher outputs.
    """
    cfg = cfg or DinoConfig()
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("pretraining needs a nonempty image set")
    state = init_state(spec, cfg, seed)
    student, teacher = state.student, state.teacher
    opt = Adam(student.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([seed, 2])
    out_size = tuple(spec.input_size)
    result = PretrainResult(state)
    t0 = time.perf_counter()
    for step in range(steps):
        idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        seeds = [(seed, step, int(i)) for i in idx]
        va, vb = _batch_views(images, idx, seeds, out_size, cfg)
        views = np.concatenate([va, vb])
        with no_grad():
            t_out = teacher(Tensor(views)).data
        s_out = student(Tensor(views))
        b = len(idx)
        center = state.center if cfg.centering else np.zeros_like(state.center)
        # cross-view pairs: teacher(a) supervises student(b) and vice versa
        t_swapped = np.concatenate([t_out[b:], t_out[:b]])
        loss = dino_loss(s_out, t_swapped, center, cfg.tau_student, cfg.tau_teacher)
        value = float(loss.item())
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite DINO loss at step {step}; lower the learning rate")
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(teacher, student, cfg.ema_momentum)
        if cfg.centering:
            state.center = center_update(state.center, t_out, cfg.center_momentum)
        state.step = step + 1
        rec = {"step": step, "loss": value,
               "teacher_std": float(teacher_probs(t_out, center, cfg.tau_teacher).std(axis=0).mean()),
               "logit_std": float(t_out.std(axis=0).mean()), "wall": time.perf_counter() - t0}
        result.trace.append(rec)
        if log is not None:
            log(rec)
    return result
