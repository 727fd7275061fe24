"""Run configuration.

Config files are flat UTF-8 `key = value` lines with `#` comments.
Every key has a default, so an empty file is a valid config; unknown
keys are rejected.  `serialize_config` emits a canonical form whose
SHA-256 participates in every report's config hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError, DataIOError
from .losses import LayerwiseSpec, TripletSpec
from .streams import ConvSpec, StreamConfig

POOLING_MODES = ("exact", "compact")


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    input_channels: int = 3
    input_height: int = 64
    input_width: int = 32
    appearance_layers: str = "8:3:2:1,16:3:2:1,16:3:2:1,16:3:1:1"
    backbone_layers: str = "16:3:2:1,16:3:2:1,16:3:2:1"
    t_p: int = 2
    t_c: int = 1
    paf_channels: int = 8
    conf_channels: int = 8
    stage_kernel: int = 3
    tap_layers: str = "1,2"
    pooling: str = "exact"
    sketch_dim: int = 512
    sketch_seed: int = -1  # -1 means: reuse `seed`
    margin: float = 0.3
    lambda_id: float = 0.0
    layerwise: bool = False
    tap_proj_dim: int = 64
    tap_weight: float = 0.5
    learning_rate: float = 0.00001
    steps: int = 500
    batch_p: int = 8
    batch_k: int = 4
    manifest_path: str = ""
    out_dir: str = ""

    # ------------------------------------------------------------------
    # derived views
    # ------------------------------------------------------------------

    def resolved_sketch_seed(self) -> int:
        return self.seed if self.sketch_seed < 0 else self.sketch_seed

    def parsed_tap_layers(self) -> tuple[int, ...]:
        text = self.tap_layers.strip()
        if not text:
            return ()
        try:
            return tuple(int(e.strip()) for e in text.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"bad tap_layers {self.tap_layers!r}: {exc}")

    def stream_config(self) -> StreamConfig:
        return StreamConfig(
            input_shape=(self.input_channels, self.input_height, self.input_width),
            appearance_layers=_parse_conv_specs("appearance_layers", self.appearance_layers),
            backbone_layers=_parse_conv_specs("backbone_layers", self.backbone_layers),
            t_p=self.t_p,
            t_c=self.t_c,
            paf_channels=self.paf_channels,
            conf_channels=self.conf_channels,
            stage_kernel=self.stage_kernel,
            tap_layers=self.parsed_tap_layers(),
        )

    def triplet_spec(self) -> TripletSpec:
        return TripletSpec(margin=self.margin)

    def layerwise_spec(self) -> LayerwiseSpec:
        if not self.layerwise:
            return LayerwiseSpec((), (), ())
        taps = self.parsed_tap_layers()
        return LayerwiseSpec(
            tap_layers=taps,
            proj_dims=tuple(self.tap_proj_dim for _ in taps),
            weights=tuple(self.tap_weight for _ in taps),
        )

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        if self.pooling not in POOLING_MODES:
            raise ConfigurationError(
                f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}"
            )
        if not _is_power_of_two(self.sketch_dim):
            raise ConfigurationError(
                f"sketch_dim must be a power of two, got {self.sketch_dim}"
            )
        if self.margin < 0:
            raise ConfigurationError(f"margin must be >= 0, got {self.margin}")
        if self.lambda_id < 0:
            raise ConfigurationError(f"lambda_id must be >= 0, got {self.lambda_id}")
        if self.tap_weight < 0:
            raise ConfigurationError(f"tap_weight must be >= 0, got {self.tap_weight}")
        if self.learning_rate < 0:
            raise ConfigurationError(
                f"learning_rate must be >= 0, got {self.learning_rate}"
            )
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.batch_p < 2 or self.batch_k < 2:
            raise ConfigurationError(
                f"batch-hard mining needs batch_p >= 2 and batch_k >= 2, "
                f"got p={self.batch_p}, k={self.batch_k}"
            )
        if self.layerwise and not self.parsed_tap_layers():
            raise ConfigurationError("layerwise mode is on but tap_layers is empty")
        self.stream_config().validate()
        self.layerwise_spec().validate()


def _parse_conv_specs(key: str, text: str) -> tuple[ConvSpec, ...]:
    specs = []
    for part in text.split(","):
        nums = part.strip().split(":")
        if len(nums) != 4:
            raise ConfigurationError(
                f"{key}: each layer is out:kernel:stride:pad, got {part.strip()!r}"
            )
        try:
            out_c, kernel, stride, pad = (int(n) for n in nums)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: {exc}")
        specs.append(ConvSpec(out_c, kernel, stride, pad))
    return tuple(specs)


# ---------------------------------------------------------------------------
# parse / serialize
# ---------------------------------------------------------------------------

_BOOL_VALUES = {"true": True, "on": True, "1": True, "false": False, "off": False, "0": False}


def _coerce(name: str, kind: type, raw: str):
    if kind is bool:
        val = _BOOL_VALUES.get(raw.strip().lower())
        if val is None:
            raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
        return val
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigurationError(f"{name}: {exc}")


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines into a RunConfig (unknown keys rejected)."""
    by_name = {f.name: f.type for f in fields(RunConfig)}
    kinds = {
        "int": int,
        "float": float,
        "str": str,
        "bool": bool,
    }
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {line_no}: expected key = value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in by_name:
            raise ConfigurationError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {line_no}: duplicate key {key!r}")
        kind = kinds[by_name[key]] if isinstance(by_name[key], str) else by_name[key]
        values[key] = _coerce(key, kind, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form: every field, declaration order, repr values."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "on" if value else "off"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    return replace(cfg, **overrides)
