"""Two-stream feature extraction.

The appearance stream is a plain convolutional stack.  The part stream
runs a small backbone to a shared map F, then a staged recursion: T_P
stages refine a part-affinity map (each stage re-reads F alongside the
previous stage's output), and T_C confidence stages refine the part map
seeded by (F, final affinity map).  Both streams end on the same
spatial grid so they can be fused location by location.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tsrio
from .errors import ConfigurationError, DataIOError
from .tensor import Tensor, add_scalar, concat_channels, conv2d, relu

FEATURE_KINDS = ("appearance", "paf", "confidence", "backbone")


@dataclass(frozen=True)
class ConvSpec:
    """One convolution layer: output channels, square kernel, stride, padding."""

    out_channels: int
    kernel: int
    stride: int
    padding: int


def conv_out_extent(extent: int, spec: ConvSpec) -> int:
    return (extent + 2 * spec.padding - spec.kernel) // spec.stride + 1


DEFAULT_APPEARANCE = (
    ConvSpec(8, 3, 2, 1),
    ConvSpec(16, 3, 2, 1),
    ConvSpec(16, 3, 2, 1),
    ConvSpec(16, 3, 1, 1),
)
DEFAULT_BACKBONE = (
    ConvSpec(16, 3, 2, 1),
    ConvSpec(16, 3, 2, 1),
    ConvSpec(16, 3, 2, 1),
)


@dataclass(frozen=True)
class StreamConfig:
    """Architecture of both streams.

    `tap_layers` are 0-based indices into `appearance_layers`; the
    outputs of those layers (post-activation) are exposed for the
    layer-wise similarity loss.  Stage convolutions use `stage_kernel`
    with stride 1 and same-padding, so stages preserve spatial size.
    """

    input_shape: tuple[int, int, int] = (3, 64, 32)
    appearance_layers: tuple[ConvSpec, ...] = DEFAULT_APPEARANCE
    backbone_layers: tuple[ConvSpec, ...] = DEFAULT_BACKBONE
    t_p: int = 2
    t_c: int = 1
    paf_channels: int = 8
    conf_channels: int = 8
    stage_kernel: int = 3
    tap_layers: tuple[int, ...] = (1, 2)

    def validate(self) -> None:
        if len(self.input_shape) != 3 or any(e < 1 for e in self.input_shape):
            raise ConfigurationError(f"bad input shape {self.input_shape}")
        if not self.appearance_layers or not self.backbone_layers:
            raise ConfigurationError("both streams need at least one layer")
        if self.t_p < 1 or self.t_c < 1:
            raise ConfigurationError(
                f"staged recursion needs t_p >= 1 and t_c >= 1, "
                f"got t_p={self.t_p}, t_c={self.t_c}"
            )
        if self.paf_channels < 1 or self.conf_channels < 1:
            raise ConfigurationError("stage channel counts must be positive")
        if self.stage_kernel < 1 or self.stage_kernel % 2 == 0:
            raise ConfigurationError(
                f"stage kernel must be odd so stages preserve spatial size, "
                f"got {self.stage_kernel}"
            )
        for i in self.tap_layers:
            if not 0 <= i < len(self.appearance_layers):
                raise ConfigurationError(
                    f"tap layer {i} out of range for "
                    f"{len(self.appearance_layers)} appearance layers"
                )
        a_spatial = self.appearance_spatial()
        b_spatial = self.backbone_spatial()
        if min(a_spatial) < 1 or min(b_spatial) < 1:
            raise ConfigurationError(
                f"a stream collapses below 1x1: appearance {a_spatial}, "
                f"backbone {b_spatial}"
            )
        if a_spatial != b_spatial:
            raise ConfigurationError(
                f"appearance grid {a_spatial} != part grid {b_spatial}; "
                f"per-location fusion needs equal extents"
            )

    def appearance_spatial(self) -> tuple[int, int]:
        h, w = self.input_shape[1], self.input_shape[2]
        for spec in self.appearance_layers:
            h, w = conv_out_extent(h, spec), conv_out_extent(w, spec)
        return h, w

    def backbone_spatial(self) -> tuple[int, int]:
        # Stages are same-padded stride-1, so the backbone fixes the grid.
        h, w = self.input_shape[1], self.input_shape[2]
        for spec in self.backbone_layers:
            h, w = conv_out_extent(h, spec), conv_out_extent(w, spec)
        return h, w

    def appearance_channels(self) -> int:
        return self.appearance_layers[-1].out_channels

    def tap_channels(self) -> dict[int, int]:
        return {i: self.appearance_layers[i].out_channels for i in self.tap_layers}


@dataclass
class FeatureMap:
    """A CxHxW activation tagged with which stream produced it."""

    tensor: Tensor
    kind: str = "appearance"

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ConfigurationError(f"unknown feature kind {self.kind!r}")
        if self.tensor.array.ndim != 3:
            raise ConfigurationError(
                f"feature maps are CxHxW, got shape {self.tensor.shape}"
            )


@dataclass
class LayerTap:
    layer_index: int
    feature: FeatureMap


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _stage_param_names(prefix: str, count: int):
    for t in range(count):
        for c in range(2):
            yield f"{prefix}.{t}.conv{c}"


def init_stream_params(config: StreamConfig, seed: int) -> dict[str, Tensor]:
    """Draw all stream parameters in a fixed order from one seeded generator.

    Weights are uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] with
    fan_in = C_in * k * k.  Biases start at zero: at this depth a
    random bias is input-independent and larger than the shrinking
    conv response, so it would swamp the image signal and leave all
    descriptors nearly identical after normalization.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add_conv(name: str, c_in: int, c_out: int, k: int) -> None:
        fan_in = c_in * k * k
        params[f"{name}.weight"] = _uniform_param(rng, (c_out, c_in, k, k), fan_in)
        params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    c = config.input_shape[0]
    for i, spec in enumerate(config.appearance_layers):
        add_conv(f"appearance.{i}", c, spec.out_channels, spec.kernel)
        c = spec.out_channels

    c = config.input_shape[0]
    for i, spec in enumerate(config.backbone_layers):
        add_conv(f"backbone.{i}", c, spec.out_channels, spec.kernel)
        c = spec.out_channels
    f_channels = c

    k = config.stage_kernel
    for t in range(config.t_p):
        c_in = f_channels if t == 0 else f_channels + config.paf_channels
        add_conv(f"paf.{t}.conv0", c_in, config.paf_channels, k)
        add_conv(f"paf.{t}.conv1", config.paf_channels, config.paf_channels, k)
    for t in range(config.t_c):
        c_in = f_channels + config.paf_channels
        if t > 0:
            c_in += config.conf_channels
        add_conv(f"conf.{t}.conv0", c_in, config.conf_channels, k)
        add_conv(f"conf.{t}.conv1", config.conf_channels, config.conf_channels, k)
    return params


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _check_image(image: Tensor, config: StreamConfig) -> None:
    if image.shape != tuple(config.input_shape):
        raise ConfigurationError(
            f"image shape {image.shape} does not match "
            f"configured input {tuple(config.input_shape)}"
        )


def _conv_block(x: Tensor, params: dict, name: str, spec: ConvSpec) -> Tensor:
    return relu(
        conv2d(
            x,
            params[f"{name}.weight"],
            params[f"{name}.bias"],
            stride=spec.stride,
            padding=spec.padding,
        )
    )


def _stage(x: Tensor, params: dict, name: str, kernel: int) -> Tensor:
    pad = kernel // 2
    y = conv2d(x, params[f"{name}.conv0.weight"], params[f"{name}.conv0.bias"], 1, pad)
    y = relu(y)
    return conv2d(y, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"], 1, pad)


def appearance_forward(
    image: Tensor, config: StreamConfig, params: dict
) -> tuple[FeatureMap, list[LayerTap]]:
    """Run the appearance stack, collecting taps at the configured layers.

    The final layer is linear (no activation) so the output map is
    signed and roughly zero-mean; a rectified final map would give
    every descriptor a large shared component and squeeze all
    descriptors into a narrow cone after normalization.
    """
    _check_image(image, config)
    taps: list[LayerTap] = []
    x = image
    last = len(config.appearance_layers) - 1
    for i, spec in enumerate(config.appearance_layers):
        name = f"appearance.{i}"
        if i == last:
            x = conv2d(
                x,
                params[f"{name}.weight"],
                params[f"{name}.bias"],
                stride=spec.stride,
                padding=spec.padding,
            )
        else:
            x = _conv_block(x, params, name, spec)
        if i in config.tap_layers:
            taps.append(LayerTap(i, FeatureMap(x, "appearance")))
    return FeatureMap(x, "appearance"), taps


def part_forward(image: Tensor, config: StreamConfig, params: dict) -> FeatureMap:
    """Backbone to F, then the affinity and confidence stage recursions."""
    _check_image(image, config)
    if config.t_p < 1 or config.t_c < 1:
        raise ConfigurationError("part stream needs t_p >= 1 and t_c >= 1")
    x = image
    for i, spec in enumerate(config.backbone_layers):
        x = _conv_block(x, params, f"backbone.{i}", spec)
    f_map = x

    k = config.stage_kernel
    paf = _stage(f_map, params, "paf.0", k)
    for t in range(1, config.t_p):
        paf = _stage(concat_channels([f_map, paf]), params, f"paf.{t}", k)

    conf = _stage(concat_channels([f_map, paf]), params, "conf.0", k)
    for t in range(1, config.t_c):
        conf = _stage(concat_channels([f_map, paf, conf]), params, f"conf.{t}", k)
    return FeatureMap(conf, "confidence")


INPUT_SHIFT = -0.5


def two_stream_forward(
    image: Tensor, config: StreamConfig, params: dict
) -> tuple[FeatureMap, FeatureMap, list[LayerTap]]:
    """Run both streams on one image; outputs share their spatial grid.

    Pixels arrive in [0, 1]; both streams see them shifted to [-0.5, 0.5].
    Without the shift the shared positive mean drives near-identical
    activations for every image and the embedding starts almost degenerate.
    """
    centered = add_scalar(image, INPUT_SHIFT)
    a, taps = appearance_forward(centered, config, params)
    p = part_forward(centered, config, params)
    if a.tensor.shape[1:] != p.tensor.shape[1:]:
        raise ConfigurationError(
            f"stream grids diverged: appearance {a.tensor.shape[1:]} "
            f"vs part {p.tensor.shape[1:]}"
        )
    return a, p, taps


# ---------------------------------------------------------------------------
# parameter serialization
# ---------------------------------------------------------------------------

PARAMS_INDEX = "params.idx"


def save_params(out_dir, params: dict[str, Tensor]) -> None:
    """Write each parameter as a tensor file plus a text index of shapes."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create weights directory {out}: {exc}") from exc
    lines = []
    for name in sorted(params):
        t = params[name]
        fname = name + ".tsr"
        tsrio.write_tensor(out / fname, t.array)
        shape = "x".join(str(e) for e in t.shape)
        lines.append(f"{name}\t{shape}\t{fname}")
    try:
        (out / PARAMS_INDEX).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {out / PARAMS_INDEX}: {exc}") from exc


def load_params(weights_dir) -> dict[str, Tensor]:
    """Read a parameter directory back into gradient-tracking tensors."""
    root = Path(weights_dir)
    index = root / PARAMS_INDEX
    if not index.is_file():
        raise DataIOError(f"missing parameter index {index}")
    params: dict[str, Tensor] = {}
    for line_no, line in enumerate(
        index.read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataIOError(f"{index}:{line_no}: expected 3 tab-separated fields")
        name, shape_text, fname = parts
        expected = tuple(int(e) for e in shape_text.split("x"))
        array = tsrio.read_tensor(root / fname)
        if array.shape != expected:
            raise DataIOError(
                f"{index}:{line_no}: {name} has shape {array.shape}, "
                f"index says {expected}"
            )
        params[name] = Tensor(array, requires_grad=True)
    return params
