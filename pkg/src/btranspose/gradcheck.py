"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_probed: int
    tol: float
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is numerically zero from
    dominating the maximum through round-off alone.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _probe(fn, flat, i, f0, h, tol, kink_floor, skip_kinks):
    orig = flat[i]
    for step in ((h, h / 10, h / 100) if skip_kinks else (h,)):
        f = {}
        for k in ((-2, -1, 1, 2) if skip_kinks else (-1, 1)):
            flat[i] = orig + k * step
            f[k] = float(fn().data)
        flat[i] = orig
        d1 = (f[1] - f[-1]) / (2 * step)
        if not skip_kinks:
            return d1
        d2 = (f[2] - f[-2]) / (4 * step)
        bend = 2 * (f[1] - 2 * f0 + f[-1]) / step - (f[2] - 2 * f0 + f[-2]) / (2 * step)
        limit = tol * max(abs(d1), abs(d2), kink_floor)
        if abs(d1 - d2) <= limit and abs(bend) <= limit:
            return d1
    return None


def finite_diff_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], tol: float = 1e-4, h: float = 1e-5,
                      max_probes: int | None = None, rng: np.random.Generator | None = None,
                      floor: float = 1e-7, scale_floor: float = 1e-3,
                      skip_kinks: bool = False) -> GradCheckReport:
    """Compare ``backward`` gradients of the scalar ``fn()`` against central differences.

    ``inputs`` are tensors with ``requires_grad`` set whose ``.data`` the
    closure reads.  When ``max_probes`` is given, at most that many randomly
    chosen elements per input are perturbed.  A failing check is reported, not
    raised.

    The relative-error denominator is floored at
    ``max(floor, scale_floor * G)`` with G the largest numeric gradient over
    every probe, so entries far below the gradient scale are not judged on
    difference round-off (~eps * |f| / h).

    With ``skip_kinks`` each probe is also differenced at step 2h.  On a
    smooth path the central estimates at h and 2h agree to O(h^2), and twice
    the one-sided slope gap at h matches the gap at 2h to O(h^3).  A kink in
    the stencil breaks at least one of the two; the probe is then retried at
    h/10 and h/100 and, if still kinked, replaced by another element.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    loss = fn()
    loss.backward()
    f0 = float(loss.data)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)

    gscale = max((float(np.abs(g).max()) for g in analytic if g.size), default=0.0)
    kink_floor = max(floor, scale_floor * gscale)
    a_all, n_all = [], []
    skipped = 0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        want = flat.size if max_probes is None else min(max_probes, flat.size)
        order = rng.permutation(flat.size) if max_probes is not None else np.arange(flat.size)
        taken = 0
        for i in order:
            if taken == want:
                break
            d1 = _probe(fn, flat, i, f0, h, tol, kink_floor, skip_kinks)
            if d1 is None:
                skipped += 1
                continue
            a_all.append(float(gflat[i]))
            n_all.append(d1)
            taken += 1
    a = np.array(a_all)
    n = np.array(n_all)
    if not len(a):
        return GradCheckReport(0.0, 0.0, 0, tol, skipped)
    eff = max(floor, scale_floor * float(np.abs(n).max()))
    return GradCheckReport(max_rel_err=float(relative_error(a, n, eff).max()),
                           max_abs_err=float(np.abs(a - n).max()), n_probed=len(a), tol=tol, n_skipped=skipped)
