"""Training loop: PK batches, batch-hard triplets, Adam updates.

Every step samples a PK batch, runs the full forward on one shared
tape, mines hardest positives/negatives on the detached descriptors,
and applies one Adam update.  Loss rows land in a CSV (step, total,
triplet, identity, one column per tap); weights plus the resolved
config land in a self-describing directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datasynth import Manifest, load_image, sample_pk_batch
from .errors import ConfigurationError, NumericError
from .losses import (
    LayerwiseSpec,
    combine_losses,
    cross_entropy,
    mine_batch_hard,
    project_tap,
    triplet_loss,
)
from .model import Model, build_model, save_model
from .tensor import Tape, Tensor, add, backward, scale

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOSS_CSV = "loss.csv"
WEIGHTS_DIR = "weights"

_BATCH_SALT = 5


@dataclass
class TrainResult:
    steps: int
    first_loss: float
    final_loss: float
    weights_dir: Path
    loss_csv: Path
    loss_rows: list[dict]


def identity_class_map(manifest: Manifest) -> dict[tuple[int, int], int]:
    """Stable class index per train identity, keyed by (action_id, pid)."""
    return {key: i for i, key in enumerate(sorted(manifest.train_groups()))}


def _mean_scalars(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(terms))


class _Adam:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.lr = lr
        self.m = {n: np.zeros_like(t.array) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.array) for n, t in params.items()}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1**self.t
        bc2 = 1.0 - ADAM_BETA2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            params[name].array -= self.lr * update


def run_training(
    cfg: RunConfig,
    manifest: Manifest,
    manifest_dir,
    out_dir,
    freeze_prefixes: tuple[str, ...] = (),
) -> TrainResult:
    """Train a fresh model; returns the written paths and loss summary."""
    cfg.validate()
    num_classes = None
    class_map: dict[tuple[int, int], int] = {}
    if cfg.lambda_id > 0:
        class_map = identity_class_map(manifest)
        num_classes = len(class_map)
    model = build_model(cfg, num_classes)

    for name, tensor in model.params.items():
        if any(name.startswith(p) for p in freeze_prefixes):
            tensor.requires_grad = False
    trainable = {n: t for n, t in model.params.items() if t.requires_grad}
    if not trainable:
        raise ConfigurationError("freeze prefixes left no trainable parameters")

    spec: LayerwiseSpec = cfg.layerwise_spec()
    triplet = cfg.triplet_spec()
    adam = _Adam(trainable, cfg.learning_rate)
    batch_rng = np.random.default_rng([cfg.seed, _BATCH_SALT])
    name_of = {id(t): n for n, t in model.params.items()}
    cache: dict[int, np.ndarray] = {}

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["step", "total", "triplet", "identity"]
    header += [f"tap_{layer}" for layer in spec.tap_layers]
    rows: list[dict] = []
    csv_lines = [",".join(header)]

    for step in range(1, cfg.steps + 1):
        batch = sample_pk_batch(manifest, cfg.batch_p, cfg.batch_k, batch_rng)
        with Tape() as tape:
            descs: list[Tensor] = []
            tap_maps: list[dict] = []
            labels: list[tuple[int, int]] = []
            for sample in batch.samples:
                if sample.sample_id not in cache:
                    cache[sample.sample_id] = load_image(manifest_dir, sample)
                desc, taps = model.forward(Tensor(cache[sample.sample_id]))
                descs.append(desc.vector)
                tap_maps.append({t.layer_index: t for t in taps})
                labels.append((sample.action_id, sample.pid))

            stacked = np.stack([d.array for d in descs])
            triples = mine_batch_hard(stacked, labels)

            triplet_mean = _mean_scalars(
                [triplet_loss(descs[a], descs[p], descs[n], triplet) for a, p, n in triples]
            )
            if cfg.lambda_id > 0:
                identity_mean = _mean_scalars(
                    [
                        cross_entropy(model.classify(descs[i]), class_map[labels[i]])
                        for i in range(len(descs))
                    ]
                )
            else:
                identity_mean = Tensor(0.0)

            tap_means: list[Tensor] = []
            for layer in spec.tap_layers:
                projected = [
                    project_tap(tap_maps[i][layer], model.params, layer)
                    for i in range(len(descs))
                ]
                tap_means.append(
                    _mean_scalars(
                        [
                            triplet_loss(projected[a], projected[p], projected[n], triplet)
                            for a, p, n in triples
                        ]
                    )
                )

            total = combine_losses(
                triplet_mean, identity_mean, tap_means, cfg.lambda_id, spec.weights
            )

        total_val = total.item()
        if not math.isfinite(total_val):
            raise NumericError(f"non-finite loss {total_val} at step {step}")

        grad_map = backward(total, tape)
        grads = {
            name_of[id(t)]: g for t, g in grad_map.items() if id(t) in name_of
        }
        adam.step(model.params, grads)

        row = {
            "step": step,
            "total": total_val,
            "triplet": triplet_mean.item(),
            "identity": identity_mean.item(),
        }
        values = [str(step), repr(total_val), repr(row["triplet"]), repr(row["identity"])]
        for layer, term in zip(spec.tap_layers, tap_means):
            row[f"tap_{layer}"] = term.item()
            values.append(repr(row[f"tap_{layer}"]))
        rows.append(row)
        csv_lines.append(",".join(values))

    csv_path = out / LOSS_CSV
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    weights_dir = out / WEIGHTS_DIR
    save_model(model, weights_dir)
    return TrainResult(
        steps=cfg.steps,
        first_loss=rows[0]["total"],
        final_loss=rows[-1]["total"],
        weights_dir=weights_dir,
        loss_csv=csv_path,
        loss_rows=rows,
    )
