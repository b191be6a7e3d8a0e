"""Heatmap regression losses: masked L2 and entropic optimal transport (Sinkhorn)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .functional import separable_logsumexp
from .tensor import Tensor, exp, getitem, log, maximum, reshape, tsum


class AllInvisibleWarning(UserWarning):
    """Every keypoint channel in the batch was masked out; the loss is zero."""


def _visible_channels(pred: Tensor, target, mask) -> tuple[np.ndarray, np.ndarray]:
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} shapes differ")
    if mask is None:
        mask = np.ones(pred.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match (N, K) = {pred.shape[:2]}")
    return target, mask


def heatmap_mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over all cells of visible channels.

    ``pred`` and ``target`` are N x K x H x W; ``mask`` is N x K (True =
    visible).  Masked channels drop out of both the sum and the cell count.
    """
    target, mask = _visible_channels(pred, target, mask)
    n_visible = int(mask.sum())
    if n_visible == 0:
        warnings.warn("all keypoints invisible; heatmap loss is 0", AllInvisibleWarning, stacklevel=2)
        return tsum(pred) * 0.0
    weight = mask[:, :, None, None].astype(pred.dtype)
    diff = pred - target.astype(pred.dtype)
    return tsum(diff * diff * weight) * (1.0 / (n_visible * pred.shape[2] * pred.shape[3]))


@dataclass(frozen=True)
class SinkhornParams:
    epsilon: float = 0.05
    n_iters: int = 3
    floor: float = 1e-8

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")


def grid_costs(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column parts of the squared cell-centre distance, divided by the squared grid diagonal."""
    diag2 = max((height - 1) ** 2 + (width - 1) ** 2, 1)
    r = np.arange(height, dtype=np.float64)
    c = np.arange(width, dtype=np.float64)
    return (r[:, None] - r[None, :]) ** 2 / diag2, (c[:, None] - c[None, :]) ** 2 / diag2


def grid_cost_matrix(height: int, width: int) -> np.ndarray:
    """Dense (H*W) x (H*W) cost, row-major cell order."""
    cy, cx = grid_costs(height, width)
    return (cy[:, None, :, None] + cx[None, :, None, :]).reshape(height * width, height * width)


def log_distribution(maps: Tensor, floor: float = 1e-8) -> Tensor:
    """Floor each (..., H, W) map at ``floor``, normalize it to sum 1 and take the log."""
    p = maximum(maps, floor)
    return log(p / tsum(p, axis=(-2, -1), keepdims=True))


def sinkhorn_potentials(log_a: Tensor, log_b: Tensor, params: SinkhornParams) -> tuple[Tensor, Tensor]:
    """Log-domain Sinkhorn iterations on the grid cost.

    Returns dual potentials divided by epsilon, ``(f, g)``, such that the plan is
    ``exp(f[p] + g[q] - C[p, q] / epsilon)``.  Each iteration updates ``f`` to
    match the first marginal, then ``g`` to match the second.
    """
    h, w = log_a.shape[-2:]
    cy, cx = grid_costs(h, w)
    cy, cx = cy / params.epsilon, cx / params.epsilon
    g = Tensor(np.zeros(log_b.shape, dtype=log_b.dtype))
    f = g
    for _ in range(params.n_iters):
        f = log_a - separable_logsumexp(g, cy, cx)
        g = log_b - separable_logsumexp(f, cy, cx)
    return f, g


def transport_cost(f: Tensor, g: Tensor, epsilon: float) -> Tensor:
    """``<plan, C>`` for each leading index, without forming the plan."""
    h, w = f.shape[-2:]
    cy, cx = grid_costs(h, w)
    ly, lx = cy / epsilon, cx / epsilon
    terms = []
    with np.errstate(divide="ignore"):
        if h > 1:
            terms.append(exp(f + separable_logsumexp(g, ly - np.log(cy), lx)))
        if w > 1:
            terms.append(exp(f + separable_logsumexp(g, ly, lx - np.log(cx))))
    if not terms:
        return tsum(f, axis=(-2, -1)) * 0.0
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return tsum(total, axis=(-2, -1))


def transport_plan(f: np.ndarray, g: np.ndarray, epsilon: float) -> np.ndarray:
    """Dense plan (H*W) x (H*W) for a single pair of potentials (inspection on small grids)."""
    h, w = f.shape
    cost = grid_cost_matrix(h, w)
    return np.exp(f.reshape(-1)[:, None] + g.reshape(-1)[None, :] - cost / epsilon)


def sinkhorn_loss(pred: Tensor, target, mask=None, params: SinkhornParams | None = None) -> Tensor:
    """Entropic transport cost between predicted and target heatmaps.

    Each visible channel of ``pred`` and ``target`` (N x K x H x W) is turned
    into a distribution, ``params.n_iters`` Sinkhorn iterations are run and
    ``<plan, cost>`` is summed over channels and averaged over the batch.
    """
    params = params or SinkhornParams()
    target, mask = _visible_channels(pred, target, mask)
    n, k, h, w = pred.shape
    idx = np.flatnonzero(mask.reshape(-1))
    if idx.size == 0:
        warnings.warn("all keypoints invisible; sinkhorn loss is 0", AllInvisibleWarning, stacklevel=2)
        return tsum(pred) * 0.0
    p = getitem(reshape(pred, (n * k, h, w)), idx)
    t = Tensor(target.reshape(n * k, h, w)[idx].astype(pred.dtype))
    f, g = sinkhorn_potentials(log_distribution(p, params.floor), log_distribution(t, params.floor), params)
    cost = transport_cost(f, g, params.epsilon)
    if not np.all(np.isfinite(cost.data)):
        raise FloatingPointError(
            f"non-finite Sinkhorn cost with epsilon={params.epsilon}; the Gibbs kernel underflowed, "
            "try a larger epsilon")
    return tsum(cost) * (1.0 / n)
