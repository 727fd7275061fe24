"""Full model: two streams, fusion, and optional heads.

A model bundles the stream parameters, the frozen sketch tables, and
the active pooling mode.  Weights directories are self-describing:
they hold the parameter tensors, the sketch sidecar, and the resolved
config, so evaluation needs no separate config file.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, config_digest, load_config, serialize_config
from .errors import ConfigurationError, DataIOError
from .pooling import (
    PooledDescriptor,
    SketchParams,
    bilinear_pool_exact,
    compact_bilinear_pool,
    l2_normalize,
    load_sketch_params,
    save_sketch_params,
)
from .streams import (
    LayerTap,
    StreamConfig,
    init_stream_params,
    load_params,
    save_params,
    two_stream_forward,
)
from .tensor import Tensor, add, matvec

SKETCH_FILE = "sketch.skp"
CONFIG_FILE = "config.cfg"
DIGEST_FILE = "config.digest"

_TAP_SALT = 101
_CLASSIFIER_SALT = 102


@dataclass
class Model:
    run_config: RunConfig
    stream_config: StreamConfig
    params: dict[str, Tensor]
    sketch: SketchParams
    pooling: str

    def descriptor_dim(self) -> int:
        c_a = self.stream_config.appearance_channels()
        c_p = self.stream_config.conf_channels
        return c_a * c_p if self.pooling == "exact" else self.sketch.output_dim

    def forward(
        self, image: Tensor, pooling: str | None = None
    ) -> tuple[PooledDescriptor, list[LayerTap]]:
        """Image to normalized descriptor plus the configured layer taps."""
        mode = pooling or self.pooling
        a, p, taps = two_stream_forward(image, self.stream_config, self.params)
        if mode == "exact":
            desc = bilinear_pool_exact(a, p)
        elif mode == "compact":
            desc = compact_bilinear_pool(a, p, self.sketch)
        else:
            raise ConfigurationError(f"unknown pooling mode {mode!r}")
        return l2_normalize(desc), taps

    def descriptor(self, image_array: np.ndarray) -> np.ndarray:
        """Plain (untracked) forward pass returning the unit descriptor."""
        desc, _ = self.forward(Tensor(image_array))
        return desc.vector.array.copy()

    def classify(self, descriptor: Tensor) -> Tensor:
        w = self.params.get("classifier.weight")
        b = self.params.get("classifier.bias")
        if w is None or b is None:
            raise ConfigurationError(
                "model has no identity classifier (built with lambda_id = 0)"
            )
        return add(matvec(w, descriptor), b)


def build_model(cfg: RunConfig, num_classes: int | None = None) -> Model:
    """Initialize a model from config; all draws derive from cfg.seed."""
    cfg.validate()
    stream_config = cfg.stream_config()
    params = init_stream_params(stream_config, cfg.seed)

    spec = cfg.layerwise_spec()
    if spec.tap_layers:
        rng = np.random.default_rng([cfg.seed, _TAP_SALT])
        tap_channels = stream_config.tap_channels()
        for layer, proj_dim in zip(spec.tap_layers, spec.proj_dims):
            c = tap_channels[layer]
            bound = 1.0 / np.sqrt(c)
            params[f"tap.{layer}.weight"] = Tensor(
                rng.uniform(-bound, bound, size=(proj_dim, c)), requires_grad=True
            )
            params[f"tap.{layer}.bias"] = Tensor(
                np.zeros(proj_dim), requires_grad=True
            )

    sketch = SketchParams.generate(
        (stream_config.appearance_channels(), stream_config.conf_channels),
        cfg.sketch_dim,
        cfg.resolved_sketch_seed(),
    )
    model = Model(cfg, stream_config, params, sketch, cfg.pooling)

    if cfg.lambda_id > 0:
        if num_classes is None or num_classes < 2:
            raise ConfigurationError(
                f"lambda_id > 0 needs at least 2 identity classes, "
                f"got {num_classes}"
            )
        rng = np.random.default_rng([cfg.seed, _CLASSIFIER_SALT])
        dim = model.descriptor_dim()
        bound = 1.0 / np.sqrt(dim)
        params["classifier.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(num_classes, dim)), requires_grad=True
        )
        params["classifier.bias"] = Tensor(
            np.zeros(num_classes), requires_grad=True
        )
    return model


def save_model(model: Model, weights_dir) -> None:
    """Write parameters, sketch sidecar, resolved config, and its digest."""
    out = Path(weights_dir)
    save_params(out, model.params)
    save_sketch_params(out / SKETCH_FILE, model.sketch)
    (out / CONFIG_FILE).write_text(
        serialize_config(model.run_config), encoding="utf-8"
    )
    (out / DIGEST_FILE).write_text(
        config_digest(model.run_config) + "\n", encoding="utf-8"
    )


def load_model(weights_dir, pooling: str | None = None) -> Model:
    """Rebuild a model from a weights directory; `pooling` overrides config."""
    root = Path(weights_dir)
    cfg_path = root / CONFIG_FILE
    if not cfg_path.is_file():
        raise DataIOError(f"weights directory {root} has no {CONFIG_FILE}")
    cfg = load_config(cfg_path)
    mode = pooling or cfg.pooling
    if mode not in ("exact", "compact"):
        raise ConfigurationError(f"unknown pooling mode {mode!r}")
    params = load_params(root)
    sketch = load_sketch_params(root / SKETCH_FILE)
    return Model(cfg, cfg.stream_config(), params, sketch, mode)


def model_digest(model: Model) -> str:
    """SHA-256 over the resolved config, pooling mode, weights, and sketch."""
    h = hashlib.sha256()
    h.update(serialize_config(model.run_config).encode("utf-8"))
    h.update(model.pooling.encode("utf-8"))
    for name in sorted(model.params):
        h.update(name.encode("utf-8"))
        h.update(model.params[name].array.tobytes())
    for table in (model.sketch.h_a, model.sketch.s_a, model.sketch.h_p, model.sketch.s_p):
        h.update(np.asarray(table, dtype="<i8").tobytes())
    return h.hexdigest()
