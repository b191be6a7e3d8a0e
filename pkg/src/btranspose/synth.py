"""Synthetic single-person pose data: stick figures, Gaussian targets, augmentation and file I/O.

Coordinates follow the pixel-centre convention: pixel ``(row, col)`` sits at
``(x, y) = (col, row)``.  Keypoints use the 17-joint COCO ordering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
N_KEYPOINTS = len(KEYPOINT_NAMES)
FLIP_PERM = (0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15)
SKELETON = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6),
    (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
)
IMAGE_SIZE = (256, 192)  # height, width


@dataclass
class PoseSample:
    image: np.ndarray  # 3 x H x W, float32 in [0, 1]
    keypoints: np.ndarray  # 17 x 3 (x, y, v)
    area: float

    @property
    def labeled(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0


@dataclass(frozen=True)
class FigureConfig:
    """Ranges (pixels / radians) for the stick-figure sampler."""

    torso: tuple[float, float] = (56.0, 70.0)
    neck: tuple[float, float] = (16.0, 21.0)
    head_radius: tuple[float, float] = (12.0, 15.0)
    shoulder_half: tuple[float, float] = (19.0, 25.0)
    hip_half: tuple[float, float] = (12.0, 16.0)
    upper_arm: tuple[float, float] = (32.0, 40.0)
    forearm: tuple[float, float] = (28.0, 36.0)
    thigh: tuple[float, float] = (42.0, 52.0)
    shin: tuple[float, float] = (40.0, 50.0)
    lean: tuple[float, float] = (-0.25, 0.25)
    head_tilt: tuple[float, float] = (-0.2, 0.2)
    yaw: tuple[float, float] = (-0.6, 0.6)
    arm: tuple[float, float] = (-0.2, 2.4)
    elbow: tuple[float, float] = (-0.3, 1.9)
    leg: tuple[float, float] = (-0.25, 0.7)
    knee: tuple[float, float] = (-1.2, 0.1)
    margin: float = 6.0
    limb_width: float = 7.0
    background_contrast: float = 0.25

    def limb_ranges(self) -> dict[str, tuple[float, float]]:
        return {"upper_arm": self.upper_arm, "forearm": self.forearm, "thigh": self.thigh, "shin": self.shin}


LIMB_JOINTS = {
    "upper_arm": ((5, 7), (6, 8)),
    "forearm": ((7, 9), (8, 10)),
    "thigh": ((11, 13), (12, 14)),
    "shin": ((13, 15), (14, 16)),
}


@dataclass
class Pose:
    """Kinematic parameters of one figure; left/right pairs are ``(left, right)``."""

    lengths: dict[str, float]
    lean: float = 0.0
    head_tilt: float = 0.0
    yaw: float = 0.0
    arm: tuple[float, float] = (0.3, 0.3)
    elbow: tuple[float, float] = (0.2, 0.2)
    leg: tuple[float, float] = (0.1, 0.1)
    knee: tuple[float, float] = (0.0, 0.0)
    arm_behind: tuple[bool, bool] = (False, False)
    offset: tuple[float, float] = (0.0, 0.0)


def neutral_pose(cfg: FigureConfig | None = None) -> Pose:
    """Symmetric upright pose with every length at the middle of its range."""
    cfg = cfg or FigureConfig()
    names = ("torso", "neck", "head_radius", "shoulder_half", "hip_half", "upper_arm", "forearm", "thigh", "shin")
    return Pose(lengths={n: sum(getattr(cfg, n)) / 2 for n in names})


def sample_pose(rng: np.random.Generator, cfg: FigureConfig) -> Pose:
    def u(r):
        return float(rng.uniform(*r))

    names = ("torso", "neck", "head_radius", "shoulder_half", "hip_half", "upper_arm", "forearm", "thigh", "shin")
    lengths = {n: u(getattr(cfg, n)) for n in names}
    return Pose(
        lengths=lengths, lean=u(cfg.lean), head_tilt=u(cfg.head_tilt), yaw=u(cfg.yaw),
        arm=(u(cfg.arm), u(cfg.arm)), elbow=(u(cfg.elbow), u(cfg.elbow)),
        leg=(u(cfg.leg), u(cfg.leg)), knee=(u(cfg.knee), u(cfg.knee)),
        arm_behind=(bool(rng.random() < 0.3), bool(rng.random() < 0.3)),
        offset=(u((-8.0, 8.0)), u((-8.0, 8.0))),
    )


def pose_keypoints(pose: Pose, pelvis: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """17 x 2 joint positions of ``pose`` with the pelvis at ``pelvis``."""
    L = pose.lengths
    down = np.array([math.sin(pose.lean), math.cos(pose.lean)])
    right = np.array([math.cos(pose.lean), -math.sin(pose.lean)])  # image-right, the figure's left

    def limb_dir(angle: float, side: int) -> np.ndarray:
        return math.cos(angle) * down + side * math.sin(angle) * right

    kp = np.zeros((N_KEYPOINTS, 2))
    p = np.asarray(pelvis, dtype=float)
    neck = p - L["torso"] * down
    head_dir = math.cos(pose.head_tilt) * down + math.sin(pose.head_tilt) * right
    head = neck - L["neck"] * head_dir
    hr = L["head_radius"]
    shift = pose.yaw * hr * 0.6
    kp[0] = head + shift * right + 0.25 * hr * head_dir
    for k, side in ((1, 1), (2, -1)):
        kp[k] = head + (side * 0.4 * hr + shift) * right - 0.15 * hr * head_dir
    for k, side in ((3, 1), (4, -1)):
        kp[k] = head + (side * 0.95 * hr + 0.4 * shift) * right
    for i, side in enumerate((1, -1)):
        sh = neck + side * L["shoulder_half"] * right
        elbow = sh + L["upper_arm"] * limb_dir(pose.arm[i], side)
        wrist = elbow + L["forearm"] * limb_dir(pose.arm[i] + pose.elbow[i], side)
        hip = p + side * L["hip_half"] * right
        knee = hip + L["thigh"] * limb_dir(pose.leg[i], side)
        ankle = knee + L["shin"] * limb_dir(pose.leg[i] + pose.knee[i], side)
        kp[5 + i], kp[7 + i], kp[9 + i] = sh, elbow, wrist
        kp[11 + i], kp[13 + i], kp[15 + i] = hip, knee, ankle
    return kp


def _fits(kp: np.ndarray, pad: float, size=IMAGE_SIZE) -> bool:
    h, w = size
    lo, hi = kp.min(axis=0) - pad, kp.max(axis=0) + pad
    return lo[0] >= 0 and lo[1] >= 0 and hi[0] <= w - 1 and hi[1] <= h - 1


def place_pose(pose: Pose, cfg: FigureConfig, size=IMAGE_SIZE) -> np.ndarray:
    """Keypoints with the figure's box centred in the image (plus the pose offset)."""
    h, w = size
    kp = pose_keypoints(pose)
    lo, hi = kp.min(axis=0), kp.max(axis=0)
    centre = np.array([(w - 1) / 2 + pose.offset[0], (h - 1) / 2 + pose.offset[1]])
    return kp + (centre - (lo + hi) / 2)


# -- rendering ----------------------------------------------------------------

LIMB_COLORS = {
    "left_arm": (0.95, 0.25, 0.25), "right_arm": (0.25, 0.35, 0.95),
    "left_leg": (0.95, 0.7, 0.15), "right_leg": (0.15, 0.8, 0.75),
    "torso": (0.55, 0.55, 0.6), "head": (0.92, 0.76, 0.62),
}


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _paint(img: np.ndarray, coverage: np.ndarray, color) -> None:
    c = np.asarray(color, dtype=img.dtype).reshape(3, 1, 1)
    img *= 1.0 - coverage
    img += coverage * c


def _capsule(img, px, py, a, b, width, color):
    _paint(img, np.clip(width / 2 - _segment_distance(px, py, a, b) + 0.5, 0.0, 1.0), color)


def _disc(img, px, py, centre, radius, color):
    _paint(img, np.clip(radius - np.hypot(px - centre[0], py - centre[1]) + 0.5, 0.0, 1.0), color)


def _polygon_mask(px, py, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        (x1, y1), (x2, y2) = poly[i], poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xint)
    return inside


def _torso_polygon(kp: np.ndarray) -> np.ndarray:
    return np.array([kp[5], kp[6], kp[12], kp[11]])


def _point_in_polygon(pt: np.ndarray, poly: np.ndarray) -> bool:
    return bool(_polygon_mask(np.array([pt[0]]), np.array([pt[1]]), poly)[0])


def render(kp: np.ndarray, pose: Pose, rng: np.random.Generator, cfg: FigureConfig, size=IMAGE_SIZE) -> np.ndarray:
    h, w = size
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    coarse = rng.uniform(0.5 - cfg.background_contrast, 0.5 + cfg.background_contrast, size=(3, 5, 4))
    img = ndimage.zoom(coarse, (1, h / 5, w / 4), order=1)[:, :h, :w]
    img = np.clip(img + rng.normal(0.0, 0.03, size=img.shape), 0.0, 1.0)
    lw = cfg.limb_width

    def arm(i):
        side = "left_arm" if i == 0 else "right_arm"
        _capsule(img, px, py, kp[5 + i], kp[7 + i], lw, LIMB_COLORS[side])
        _capsule(img, px, py, kp[7 + i], kp[9 + i], lw * 0.85, LIMB_COLORS[side])
        _disc(img, px, py, kp[7 + i], lw * 0.45, (0.15, 0.15, 0.15))
        _disc(img, px, py, kp[9 + i], lw * 0.55, (0.95, 0.95, 0.95))

    for i in (0, 1):
        if pose.arm_behind[i]:
            arm(i)
    for i, side in ((0, "left_leg"), (1, "right_leg")):
        _capsule(img, px, py, kp[11 + i], kp[13 + i], lw * 1.2, LIMB_COLORS[side])
        _capsule(img, px, py, kp[13 + i], kp[15 + i], lw, LIMB_COLORS[side])
        _disc(img, px, py, kp[13 + i], lw * 0.5, (0.15, 0.15, 0.15))
        _disc(img, px, py, kp[15 + i], lw * 0.6, (0.95, 0.95, 0.95))
    torso = _torso_polygon(kp)
    _paint(img, _polygon_mask(px, py, torso).astype(img.dtype), LIMB_COLORS["torso"])
    for a, b in ((5, 6), (11, 12)):
        _capsule(img, px, py, kp[a], kp[b], 3.0, (0.3, 0.3, 0.35))
    neck = (kp[5] + kp[6]) / 2
    head = (kp[3] + kp[4]) / 2
    _capsule(img, px, py, neck, head, lw, LIMB_COLORS["head"])
    _disc(img, px, py, head, pose.lengths["head_radius"], LIMB_COLORS["head"])
    for k, color in ((1, (0.05, 0.05, 0.05)), (2, (0.05, 0.05, 0.05)), (0, (0.8, 0.15, 0.15))):
        _disc(img, px, py, kp[k], 2.2, color)
    for k in (3, 4):
        _disc(img, px, py, kp[k], 2.5, (0.6, 0.4, 0.3))
    for i in (0, 1):
        if not pose.arm_behind[i]:
            arm(i)
    return img.astype(np.float32)


def _visibility(kp: np.ndarray, pose: Pose, size=IMAGE_SIZE) -> np.ndarray:
    v = np.full(N_KEYPOINTS, 2.0)
    torso = _torso_polygon(kp)
    for i in (0, 1):
        if pose.arm_behind[i]:
            for k in (7 + i, 9 + i):
                if _point_in_polygon(kp[k], torso):
                    v[k] = 1.0
    # the ear on the side the head turns away from
    if pose.yaw > 0.35:
        v[4] = 1.0
    elif pose.yaw < -0.35:
        v[3] = 1.0
    h, w = size
    outside = (kp[:, 0] < 0) | (kp[:, 1] < 0) | (kp[:, 0] > w - 1) | (kp[:, 1] > h - 1)
    v[outside] = 0.0
    return v


def bbox_area(kp: np.ndarray, pad: float = 8.0, size=IMAGE_SIZE) -> float:
    h, w = size
    lo = np.maximum(kp.min(axis=0) - pad, 0.0)
    hi = np.minimum(kp.max(axis=0) + pad, [w - 1, h - 1])
    return float(np.prod(hi - lo))


def generate_sample(seed, cfg: FigureConfig | None = None, pose: Pose | None = None) -> PoseSample:
    """Deterministic stick-figure sample for ``seed``.

    Poses whose box does not fit inside the image margin are redrawn from the
    same generator, so the result depends on the seed alone.  Passing ``pose``
    renders that pose instead of sampling one.
    """
    cfg = cfg or FigureConfig()
    rng = np.random.default_rng(seed)
    if pose is None:
        for _ in range(1000):
            pose = sample_pose(rng, cfg)
            kp = place_pose(pose, cfg)
            if _fits(kp, cfg.margin):
                break
        else:  # pragma: no cover - ranges make this unreachable
            raise RuntimeError("could not place a figure inside the image")
    else:
        kp = place_pose(pose, cfg)
    image = render(kp, pose, rng, cfg)
    v = _visibility(kp, pose)
    keypoints = np.concatenate([kp, v[:, None]], axis=1)
    return PoseSample(image=image, keypoints=keypoints, area=bbox_area(kp))


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(n: int, seed: int, cfg: FigureConfig | None = None) -> list[PoseSample]:
    return [generate_sample(sample_seed(seed, i), cfg) for i in range(n)]


# -- targets ------------------------------------------------------------------

def make_target_heatmaps(sample: PoseSample, sigma: float = 2.0, size: tuple[int, int] = (64, 48),
                         stride: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized Gaussian per labeled keypoint (peak 1 at ``(x, y) / stride``) and the label mask."""
    h, w = size
    rows = np.arange(h, dtype=np.float32)[:, None]
    cols = np.arange(w, dtype=np.float32)[None, :]
    maps = np.zeros((len(sample.keypoints), h, w), dtype=np.float32)
    mask = sample.keypoints[:, 2] > 0
    for k, (x, y, v) in enumerate(sample.keypoints):
        if v <= 0:
            continue
        cx, cy = x / stride, y / stride
        maps[k] = np.exp(-((cols - cx) ** 2 + (rows - cy) ** 2) / (2 * sigma ** 2))
    return maps, mask


# -- augmentation -------------------------------------------------------------

def augment_params(seed, max_rotation: float = 45.0, max_scale: float = 0.35,
                   flip_prob: float = 0.5) -> tuple[float, float, bool]:
    rng = np.random.default_rng(seed)
    angle = float(rng.uniform(-max_rotation, max_rotation))
    scale = float(rng.uniform(1.0 - max_scale, 1.0 + max_scale))
    flip = bool(rng.random() < flip_prob)
    return angle, scale, flip


def affine_matrix(angle_deg: float, scale: float, flip: bool, size=IMAGE_SIZE) -> np.ndarray:
    """2x3 matrix mapping source (x, y) to augmented (x, y): flip, then rotate/scale about the centre."""
    h, w = size
    cx, cy = (w - 1) / 2, (h - 1) / 2
    a = math.radians(angle_deg)
    rot = scale * np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    flip_m = np.array([[-1.0, 0.0], [0.0, 1.0]]) if flip else np.eye(2)
    lin = rot @ flip_m
    c = np.array([cx, cy])
    return np.concatenate([lin, (c - lin @ c)[:, None]], axis=1)


def warp_image(image: np.ndarray, matrix: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Apply a forward (x, y) affine map to a C x H x W image with bilinear sampling."""
    lin, t = matrix[:, :2], matrix[:, 2]
    inv = np.linalg.inv(lin)
    # scipy works in (row, col) = (y, x) order and wants the output->input map
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    inv_rc = swap @ inv @ swap
    offset_rc = -(inv_rc @ (swap @ t))
    return np.stack([ndimage.affine_transform(ch, inv_rc, offset=offset_rc, order=1, mode="constant", cval=fill)
                     for ch in image]).astype(image.dtype)


def transform_keypoints(keypoints: np.ndarray, matrix: np.ndarray, flip: bool, size=IMAGE_SIZE) -> np.ndarray:
    h, w = size
    out = keypoints.copy()
    out[:, :2] = keypoints[:, :2] @ matrix[:, :2].T + matrix[:, 2]
    if flip:
        out = out[list(FLIP_PERM)]
    xs, ys = out[:, 0], out[:, 1]
    outside = (xs < 0) | (ys < 0) | (xs > w - 1) | (ys > h - 1)
    out[outside, 2] = 0.0
    return out


def augment(sample: PoseSample, seed, max_rotation: float = 45.0, max_scale: float = 0.35,
            flip_prob: float = 0.5, params: tuple[float, float, bool] | None = None,
            return_matrix: bool = False):
    """Random rotation/scale/flip applied jointly to image and keypoints.

    Flipping swaps left/right keypoint indices; keypoints leaving the image are
    marked unlabeled (v = 0).
    """
    angle, scale, flip = params if params is not None else augment_params(seed, max_rotation, max_scale, flip_prob)
    size = sample.image.shape[1:]
    m = affine_matrix(angle, scale, flip, size)
    if angle == 0.0 and scale == 1.0 and not flip:
        out = PoseSample(sample.image.copy(), sample.keypoints.copy(), sample.area)
    else:
        out = PoseSample(warp_image(sample.image, m), transform_keypoints(sample.keypoints, m, flip, size),
                         sample.area * scale * scale)
    return (out, m) if return_matrix else out


# -- files --------------------------------------------------------------------

class AnnotationError(ValueError):
    """Base class for annotation file problems."""


class AnnotationFormatError(AnnotationError):
    pass


class MissingFieldError(AnnotationError):
    pass


class KeypointLengthError(AnnotationError):
    pass


@dataclass
class AnnotationRecord:
    image_id: int
    file_name: str
    width: int
    height: int
    keypoints: np.ndarray  # 17 x 3
    area: float


def write_ppm(path, image: np.ndarray) -> None:
    """Write a binary P6 file from a 3 x H x W float image in [0, 1] or an H x W x 3 uint8 array."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.transpose(arr, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a 3 x H x W float32 image in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return (np.transpose(raw, (2, 0, 1)).astype(np.float32) / maxval)


def write_annotations(samples, path, file_names=None, image_ids=None) -> None:
    images, anns = [], []
    for i, s in enumerate(samples):
        image_id = int(image_ids[i]) if image_ids is not None else i
        name = file_names[i] if file_names is not None else f"{image_id:06d}.ppm"
        h, w = s.image.shape[1:] if s.image is not None else IMAGE_SIZE
        images.append({"id": image_id, "width": int(w), "height": int(h), "file_name": name})
        anns.append({"id": image_id, "image_id": image_id, "category_id": 1,
                     "keypoints": [float(v) for v in np.asarray(s.keypoints, dtype=np.float64).reshape(-1)],
                     "num_keypoints": int((s.keypoints[:, 2] > 0).sum()), "area": float(s.area)})
    doc = {"images": images, "annotations": anns,
           "categories": [{"id": 1, "name": "person", "keypoints": list(KEYPOINT_NAMES),
                           "skeleton": [[a + 1, b + 1] for a, b in SKELETON]}]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise MissingFieldError(f"{where}: missing field {key!r}")
    return obj[key]


def read_annotations(path) -> list[AnnotationRecord]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise AnnotationFormatError(f"{path}: top level must be an object")
    images = {}
    for i, im in enumerate(_require(doc, "images", str(path))):
        where = f"images[{i}]"
        images[_require(im, "id", where)] = (_require(im, "file_name", where), int(_require(im, "width", where)),
                                             int(_require(im, "height", where)))
    records = []
    for i, ann in enumerate(_require(doc, "annotations", str(path))):
        where = f"annotations[{i}]"
        image_id = _require(ann, "image_id", where)
        kps = _require(ann, "keypoints", where)
        area = _require(ann, "area", where)
        if not isinstance(kps, list) or len(kps) != 3 * N_KEYPOINTS:
            n = len(kps) if isinstance(kps, list) else "non-list"
            raise KeypointLengthError(f"{where}: keypoints must hold {3 * N_KEYPOINTS} numbers, got {n}")
        if image_id not in images:
            raise MissingFieldError(f"{where}: image_id {image_id} has no entry in images")
        name, w, h = images[image_id]
        records.append(AnnotationRecord(int(image_id), name, w, h,
                                        np.asarray(kps, dtype=np.float64).reshape(N_KEYPOINTS, 3), float(area)))
    return records


def write_dataset(out_dir, n: int, seed: int, cfg: FigureConfig | None = None, workers: int = 1) -> Path:
    """Write ``n`` samples as PPM images plus ``annotations.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    seeds = [sample_seed(seed, i) for i in range(n)]
    if workers > 1 and n > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda s: generate_sample(s, cfg), seeds))
    else:
        samples = [generate_sample(s, cfg) for s in seeds]
    names = [f"images/{i:06d}.ppm" for i in range(n)]
    for s, name in zip(samples, names):
        write_ppm(out / name, s.image)
    write_annotations(samples, out / "annotations.json", file_names=names)
    return out


def load_dataset(root) -> tuple[list[PoseSample], list[AnnotationRecord]]:
    root = Path(root)
    records = read_annotations(root / "annotations.json")
    samples = [PoseSample(read_ppm(root / r.file_name), r.keypoints.copy(), r.area) for r in records]
    return samples, records


def samples_to_arrays(samples, sigma: float = 2.0, heatmap_size=(64, 48)):
    """Stack samples into (images, targets, masks) arrays."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    pairs = [make_target_heatmaps(s, sigma, heatmap_size, stride=s.image.shape[1] // heatmap_size[0]) for s in samples]
    return images, np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def downscale_sample(sample: PoseSample, factor: int) -> PoseSample:
    """Block-average the image by an integer factor; keypoints and area scale with it."""
    if factor == 1:
        return sample
    c, h, w = sample.image.shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} is not divisible by {factor}")
    image = sample.image.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    kp = sample.keypoints.copy()
    kp[:, :2] /= factor
    return PoseSample(image=image.astype(np.float32), keypoints=kp, area=sample.area / factor**2)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p

