"""Dependency areas: attention rows queried at a predicted keypoint, and their colour overlays."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import AttentionRecord
from .synth import KEYPOINT_NAMES, SKELETON, write_ppm

# intensity stops of the overlay colour ramp: blue, cyan, yellow, orange, red
RAMP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
RAMP_COLORS = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.5, 0.0], [1.0, 0.0, 0.0]])
MAX_ALPHA = 0.5
STAR_RADIUS = 6.0
SKELETON_COLOR = (0.2, 1.0, 0.2)


class ExplainError(ValueError):
    pass


@dataclass
class DependencyMap:
    grid: np.ndarray  # H x W, sums to 1
    source: str  # "mhsa" or "encoder"
    index: int  # MHSA block or encoder layer
    keypoint: int
    token: int


def keypoint_to_token(xy, grid: tuple[int, int] = (32, 24), input_size: tuple[int, int] = (256, 192)) -> int:
    """Token index (row-major) of the attention-grid cell containing input pixel ``xy``, clamped to the grid."""
    gh, gw = grid
    sy, sx = input_size[0] / gh, input_size[1] / gw
    col = int(np.clip(np.floor(xy[0] / sx), 0, gw - 1))
    row = int(np.clip(np.floor(xy[1] / sy), 0, gh - 1))
    return row * gw + col


def token_to_cell(token: int, grid: tuple[int, int] = (32, 24)) -> tuple[int, int]:
    return divmod(int(token), grid[1])


def dependency_map(record: AttentionRecord, source: str, token: int, head: int | None = None,
                   index: int = -1, sample: int = 0, keypoint: int = -1) -> DependencyMap:
    """Attention row of ``token`` from the chosen MHSA block or encoder layer, reshaped to the grid.

    ``head=None`` averages the heads; an integer selects one.  ``index``
    picks the block/layer (default: the last one).
    """
    if source == "mhsa":
        if not record.mhsa:
            raise ExplainError("attention record holds no MHSA maps (was retention enabled?)")
        stack = record.mhsa
    elif source == "encoder":
        if record.encoder is None or len(record.encoder) == 0:
            raise ExplainError("attention record holds no encoder maps (was retention enabled?)")
        stack = record.encoder
    else:
        raise ExplainError(f"unknown source {source!r}; use 'mhsa' or 'encoder'")
    n_items = len(stack)
    if not -n_items <= index < n_items:
        raise ExplainError(f"{source} index {index} out of range for {n_items} maps")
    att = np.asarray(stack[index])[sample]  # heads x L x L
    gh, gw = record.grid
    if not 0 <= token < gh * gw:
        raise ExplainError(f"token {token} outside the {gh}x{gw} grid")
    if head is None:
        row = att[:, token, :].mean(axis=0)
    else:
        if not 0 <= head < att.shape[0]:
            raise ExplainError(f"head {head} out of range for {att.shape[0]} heads")
        row = att[head, token, :]
    return DependencyMap(row.reshape(gh, gw).astype(np.float64), source, index % n_items, keypoint, token)


def upsample_bilinear(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array to ``size``."""
    h, w = grid.shape
    oh, ow = size

    def coords(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = coords(oh, h)
    c0, c1, fc = coords(ow, w)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bot = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def color_ramp(intensity: np.ndarray) -> np.ndarray:
    """Map intensities in [0, 1] to RGB (H x W x 3) by piecewise-linear interpolation of the ramp."""
    t = np.clip(intensity, 0.0, 1.0)
    return np.stack([np.interp(t, RAMP_STOPS, RAMP_COLORS[:, c]) for c in range(3)], axis=-1)


def _star_polygon(cx: float, cy: float, r: float) -> np.ndarray:
    ang = -np.pi / 2 + np.arange(10) * np.pi / 5
    rad = np.where(np.arange(10) % 2 == 0, r, 0.4 * r)
    return np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)


def _inside(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    # even-odd rule
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xi)
    return inside


def draw_star(rgb: np.ndarray, xy, radius: float = STAR_RADIUS, color=(1.0, 1.0, 1.0)) -> None:
    h, w, _ = rgb.shape
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    rgb[_inside(px, py, _star_polygon(float(xy[0]), float(xy[1]), radius))] = color


def draw_segment(rgb: np.ndarray, a, b, color=SKELETON_COLOR) -> None:
    h, w, _ = rgb.shape
    n = int(np.ceil(np.hypot(b[0] - a[0], b[1] - a[1]))) * 2 + 1
    t = np.linspace(0.0, 1.0, n)
    xs = np.rint(a[0] + (b[0] - a[0]) * t).astype(int)
    ys = np.rint(a[1] + (b[1] - a[1]) * t).astype(int)
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    rgb[ys[ok], xs[ok]] = color


def draw_skeleton(rgb: np.ndarray, keypoints: np.ndarray) -> None:
    for a, b in SKELETON:
        if keypoints[a, 2] > 0 and keypoints[b, 2] > 0:
            draw_segment(rgb, keypoints[a, :2], keypoints[b, :2])


def overlay(image: np.ndarray, grid: np.ndarray | None, keypoint=None, skeleton: np.ndarray | None = None,
            stars=(), star_radius: float = 3.0) -> np.ndarray:
    """Compose the overlay as H x W x 3 uint8.

    The map is upsampled to the image, scaled by its maximum, coloured by the
    ramp and blended over the grayscale image with alpha = 0.5 * intensity.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[1:]
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    if grid is not None:
        up = upsample_bilinear(np.asarray(grid, dtype=np.float64), (h, w))
        peak = up.max()
        intensity = up / peak if peak > 0 else np.zeros_like(up)
        alpha = (MAX_ALPHA * intensity)[:, :, None]
        rgb = (1 - alpha) * rgb + alpha * color_ramp(intensity)
    if skeleton is not None:
        draw_skeleton(rgb, np.asarray(skeleton))
    for xy in stars:
        draw_star(rgb, xy, star_radius)
    if keypoint is not None:
        draw_star(rgb, keypoint)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def render_overlay(image: np.ndarray, dmap: DependencyMap | np.ndarray | None, keypoint, path,
                   skeleton: np.ndarray | None = None) -> Path:
    """Render the overlay and write it as a binary PPM."""
    grid = dmap.grid if isinstance(dmap, DependencyMap) else dmap
    arr = overlay(image, grid, keypoint, skeleton)
    path = Path(path)
    try:
        write_ppm(path, arr)
    except OSError as exc:
        raise ExplainError(f"cannot write overlay to {path}: {exc}") from exc
    return path


def keypoint_index(name: str) -> int:
    try:
        return KEYPOINT_NAMES.index(name)
    except ValueError:
        raise ExplainError(f"unknown keypoint {name!r}; valid names: {', '.join(KEYPOINT_NAMES)}") from None


def overlay_name(image_id, keypoint: int, source: str) -> str:
    return f"{image_id}_{KEYPOINT_NAMES[keypoint]}_{source}.ppm"


def explain_image(image: np.ndarray, record: AttentionRecord, prediction: np.ndarray, keypoints: list[int],
                  out_dir, image_id, head: int | None = None, sample: int = 0) -> list[Path]:
    """Write MHSA and encoder overlays for each requested keypoint plus one skeleton panel.

    ``prediction`` is K x (x, y, score) in the image's pixel frame.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k in keypoints:
        xy = prediction[k, :2]
        token = keypoint_to_token(xy, record.grid, record.input_size)
        for source in ("mhsa", "encoder"):
            dmap = dependency_map(record, source, token, head=head, sample=sample, keypoint=k)
            files.append(render_overlay(image, dmap, xy, out / overlay_name(image_id, k, source)))
    skel = np.concatenate([prediction[:, :2], np.ones((len(prediction), 1))], axis=1)
    panel = overlay(image, None, None, skel, stars=prediction[:, :2])
    path = out / f"{image_id}_skeleton.ppm"
    write_ppm(path, panel)
    files.append(path)
    return files
