"""Architecture names, model specs and the assembled pose network."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import functional as F
from .backbone import Backbone, BlockGroupSpec
from .encoder import EncoderConfig, Projection, TransformerEncoder, unflatten_grid
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .tensor import ShapeError, Tensor

DEFAULT_WIDTHS = (64, 96, 128, 256)
LARGE_WIDTHS = (64, 128, 256, 512)
BLOCKS_PER_GROUP = (3, 4, 6, 3)

NAME_GRAMMAR = "C{2|3}A{1|2}({4|8}) followed by any of -Dino, -N6, -Large (e.g. C3A1(4)-Dino-N6)"
_NAME_RE = re.compile(r"^C([23])A([12])\(([48])\)((?:-(?:Dino|N6|Large))*)$")


class ModelNameError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    n_conv_groups: int = 3
    n_mhsa_groups: int = 1
    mhsa_heads: int = 4
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    blocks_per_group: tuple[int, ...] = BLOCKS_PER_GROUP
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_keypoints: int = 17
    input_size: tuple[int, int] = (256, 192)
    stem_channels: int = 64
    head_channels: int = 256
    init: str = "random"
    large: bool = False

    def __post_init__(self):
        if self.n_conv_groups + self.n_mhsa_groups not in (3, 4):
            raise ValueError("conv + MHSA group count must be 3 or 4")
        if len(self.widths) < self.n_groups or len(self.blocks_per_group) < self.n_groups:
            raise ValueError(f"need at least {self.n_groups} widths and block counts")
        h, w = self.input_size
        if h % 8 or w % 8:
            raise ValueError(f"input size {self.input_size} must be divisible by 8")

    @property
    def n_groups(self) -> int:
        return self.n_conv_groups + self.n_mhsa_groups

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return self.input_size[0] // 4, self.input_size[1] // 4

    @property
    def grid(self) -> tuple[int, int]:
        return self.input_size[0] // 8, self.input_size[1] // 8

    @property
    def name(self) -> str:
        s = f"C{self.n_conv_groups}A{self.n_mhsa_groups}({self.mhsa_heads})"
        if self.init == "pretrained":
            s += "-Dino"
        if self.encoder.n_layers == 6:
            s += "-N6"
        if self.large:
            s += "-Large"
        return s

    def groups(self) -> list[BlockGroupSpec]:
        out = []
        for g in range(self.n_groups):
            kind = "conv" if g < self.n_conv_groups else "mhsa"
            out.append(BlockGroupSpec(kind=kind, width=self.widths[g], n_blocks=self.blocks_per_group[g],
                                      stride=2 if g == 1 else 1,
                                      heads=self.mhsa_heads if kind == "mhsa" else 0))
        return out

    # -- descriptor: name plus non-default overrides, stored in checkpoints ----
    def descriptor(self) -> str:
        base = parse_name(self.name)
        parts = [self.name]
        for key, value in self._override_items():
            if value != _field_value(base, key):
                parts.append(f"{key}={_format(value)}")
        return "|".join(parts)

    def _override_items(self):
        enc = self.encoder
        return [("widths", self.widths), ("blocks", self.blocks_per_group), ("d_model", enc.d_model),
                ("d_ffn", enc.d_ffn), ("layers", enc.n_layers), ("enc_heads", enc.n_heads),
                ("input", self.input_size), ("stem", self.stem_channels), ("head", self.head_channels),
                ("keypoints", self.n_keypoints)]

    @classmethod
    def from_descriptor(cls, text: str) -> "ModelSpec":
        name, *overrides = text.split("|")
        spec = parse_name(name)
        enc = {}
        top = {}
        for item in overrides:
            key, _, raw = item.partition("=")
            vals = tuple(int(v) for v in raw.split(","))
            if key == "widths":
                top["widths"] = vals
            elif key == "blocks":
                top["blocks_per_group"] = vals
            elif key == "input":
                top["input_size"] = vals
            elif key in ("stem", "head", "keypoints"):
                top[{"stem": "stem_channels", "head": "head_channels", "keypoints": "n_keypoints"}[key]] = vals[0]
            elif key in ("d_model", "d_ffn", "layers", "enc_heads"):
                enc[{"layers": "n_layers", "enc_heads": "n_heads"}.get(key, key)] = vals[0]
            else:
                raise ModelNameError(f"unknown descriptor override {key!r}")
        if enc:
            top["encoder"] = replace(spec.encoder, **enc)
        return replace(spec, **top)


def _field_value(spec: ModelSpec, key: str):
    return dict(spec._override_items())[key]


def _format(value) -> str:
    return ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)


def parse_name(name: str) -> ModelSpec:
    """Build the spec for an architecture name such as ``C3A1(4)-Dino-N6``."""
    m = _NAME_RE.match(name.strip())
    if not m:
        raise ModelNameError(f"malformed model name {name!r}; expected {NAME_GRAMMAR}")
    n_conv, n_mhsa, heads, suffix = int(m.group(1)), int(m.group(2)), int(m.group(3)), m.group(4)
    tags = [t for t in suffix.split("-") if t]
    if len(set(tags)) != len(tags):
        raise ModelNameError(f"repeated suffix in {name!r}; expected {NAME_GRAMMAR}")
    large = "Large" in tags
    return ModelSpec(
        n_conv_groups=n_conv,
        n_mhsa_groups=n_mhsa,
        mhsa_heads=heads,
        widths=LARGE_WIDTHS if large else DEFAULT_WIDTHS,
        encoder=EncoderConfig(n_layers=6 if "N6" in tags else 4),
        init="pretrained" if "Dino" in tags else "random",
        large=large,
    )


def tiny_spec(name: str = "C3A1(4)", input_size: tuple[int, int] = (32, 24), widths=(4, 6, 8, 16),
              blocks=(1, 1, 1, 1), d_model: int = 16, d_ffn: int = 32, n_layers: int = 1,
              enc_heads: int = 8) -> ModelSpec:
    """A small configuration with the full architecture layout, for checks and desk runs."""
    spec = parse_name(name)
    return replace(spec, widths=tuple(widths), blocks_per_group=tuple(blocks), input_size=tuple(input_size),
                   stem_channels=widths[0], head_channels=d_model,
                   encoder=EncoderConfig(d_model=d_model, d_ffn=d_ffn, n_layers=n_layers, n_heads=enc_heads))


@dataclass
class AttentionRecord:
    """Attention maps retained by one forward pass.

    ``mhsa`` holds one (N, heads, L, L) array per MHSA block in network order;
    ``encoder`` is (n_layers, N, heads, L, L).  ``grid`` is the (H, W) of the
    attention token grid and ``input_size`` the image size it came from.
    """

    mhsa: list[np.ndarray]
    encoder: np.ndarray | None
    grid: tuple[int, int]
    input_size: tuple[int, int]


class Head(Module):
    """Deconvolution (x2 upsampling) with BN/ReLU, then a 1x1 conv to one map per keypoint."""

    def __init__(self, cin: int, channels: int, n_keypoints: int, rng: np.random.Generator):
        super().__init__()
        self.deconv = ConvTranspose2d(cin, channels, 4, rng, stride=2, padding=1)
        self.bn = BatchNorm2d(channels)
        self.final = Conv2d(channels, n_keypoints, 1, rng, bias=True, init_std=0.001)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        y = F.relu(self.bn(self.deconv(x)))
        if trace is not None:
            trace.append(("deconv", y.shape))
        y = self.final(y)
        if trace is not None:
            trace.append(("final", y.shape))
        return y


class BTranspose(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(spec.groups(), spec.stem_channels, spec.input_size, rng)
        grid = self.backbone.out_grid
        self.projection = Projection(self.backbone.out_channels, spec.encoder.d_model, rng)
        self.encoder = TransformerEncoder(spec.encoder, grid[0] * grid[1], rng)
        self.head = Head(spec.encoder.d_model, spec.head_channels, spec.n_keypoints, rng)

    def set_retain(self, flag: bool) -> None:
        for layer in self.backbone.mhsa_layers():
            layer.retain = flag
            if not flag:
                layer.attention = None
        self.encoder.set_retain(flag)

    def forward(self, images: Tensor, trace: list | None = None) -> tuple[Tensor, AttentionRecord]:
        expected = (3,) + tuple(self.spec.input_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"model expects N x {expected[0]} x {expected[1]} x {expected[2]}, got {images.shape}")
        if trace is not None:
            trace.append(("input", images.shape))
        feat = self.backbone(images, trace)
        seq = self.encoder(self.projection(feat, trace))
        if trace is not None:
            trace.append(("encoder", seq.shape))
        grid_feat = unflatten_grid(seq, self.backbone.out_grid)
        if trace is not None:
            trace.append(("reshape", grid_feat.shape))
        heatmaps = self.head(grid_feat, trace)
        record = AttentionRecord(
            mhsa=[m.attention for m in self.backbone.mhsa_layers() if m.attention is not None],
            encoder=self.encoder.attention(),
            grid=self.backbone.out_grid,
            input_size=tuple(self.spec.input_size),
        )
        return heatmaps, record


def build_model(spec_or_name, seed: int = 0) -> BTranspose:
    spec = spec_or_name if isinstance(spec_or_name, ModelSpec) else ModelSpec.from_descriptor(spec_or_name)
    return BTranspose(spec, seed=seed)


def count_params(model: Module) -> int:
    """Total number of learnable scalars (running statistics excluded)."""
    return int(sum(p.size for p in model.parameters()))
