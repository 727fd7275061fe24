"""Training objectives.

Triplet hinge on L2 distances, softmax cross-entropy over identity
labels, and per-tap layer-wise similarity losses (pool, project,
normalize, triplet).  `total_loss` combines them with fixed weights
into a LossReport whose `total` is reproducible bit-exactly from its
parts by `combine_losses`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError
from .pooling import l2_normalize_vector
from .streams import LayerTap
from .tensor import (
    Tensor,
    add,
    add_scalar,
    matvec,
    mul,
    record_op,
    relu,
    scale,
    spatial_avg_pool,
    sqrt,
    sub,
    sum_all,
)


@dataclass(frozen=True)
class TripletSpec:
    """Hinge margin for the triplet loss; the distance is always L2."""

    margin: float = 0.3

    def validate(self) -> None:
        if self.margin < 0:
            raise ConfigurationError(f"margin must be >= 0, got {self.margin}")


@dataclass(frozen=True)
class LayerwiseSpec:
    """Per-tap projection sizes and loss weights, keyed by tap layer index."""

    tap_layers: tuple[int, ...] = ()
    proj_dims: tuple[int, ...] = ()
    weights: tuple[float, ...] = ()

    def validate(self) -> None:
        if not (len(self.tap_layers) == len(self.proj_dims) == len(self.weights)):
            raise ConfigurationError(
                f"layer-wise spec needs one projection and one weight per tap: "
                f"{len(self.tap_layers)} taps, {len(self.proj_dims)} projections, "
                f"{len(self.weights)} weights"
            )
        if any(d < 1 for d in self.proj_dims):
            raise ConfigurationError("projection dims must be positive")
        if any(w < 0 for w in self.weights):
            raise ConfigurationError("tap weights must be >= 0")


@dataclass
class LossReport:
    """Scalar loss tensors for one instance or one batch."""

    total: Tensor
    triplet_final: Tensor
    identity: Tensor
    layerwise: list[Tensor]


def euclidean_distance(u: Tensor, v: Tensor) -> Tensor:
    if u.shape != v.shape:
        raise UsageError(f"distance needs equal shapes, got {u.shape} and {v.shape}")
    diff = sub(u, v)
    return sqrt(sum_all(mul(diff, diff)))


def triplet_loss(fa: Tensor, fp: Tensor, fn: Tensor, spec: TripletSpec) -> Tensor:
    """max(d(anchor, positive) - d(anchor, negative) + margin, 0)."""
    if not (fa.shape == fp.shape == fn.shape):
        raise UsageError(
            f"triplet needs equal shapes, got {fa.shape}, {fp.shape}, {fn.shape}"
        )
    spec.validate()
    d_ap = euclidean_distance(fa, fp)
    d_an = euclidean_distance(fa, fn)
    return relu(add_scalar(sub(d_ap, d_an), spec.margin))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of the true class.

    Computed as logsumexp(logits) - logits[label] with max subtraction,
    so large logits stay finite.
    """
    if logits.array.ndim != 1:
        raise UsageError(f"cross_entropy needs a logit vector, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= label < k:
        raise UsageError(f"label {label} out of range for {k} classes")
    z = logits.array
    m = z.max()
    exps = np.exp(z - m)
    lse = m + np.log(exps.sum())
    softmax = exps / exps.sum()

    def _bw(g):
        grad = softmax.copy()
        grad[label] -= 1.0
        return (grad * g.reshape(-1)[0],)

    return record_op((logits,), np.asarray(lse - z[label]), _bw)


def project_tap(tap: LayerTap, params: dict, layer_index: int) -> Tensor:
    w = params.get(f"tap.{layer_index}.weight")
    b = params.get(f"tap.{layer_index}.bias")
    if w is None or b is None:
        raise UsageError(f"missing projection parameters for tap layer {layer_index}")
    pooled = spatial_avg_pool(tap.feature.tensor)
    return l2_normalize_vector(add(matvec(w, pooled), b))


def layerwise_similarity_loss(
    taps_a: list[LayerTap],
    taps_p: list[LayerTap],
    taps_n: list[LayerTap],
    spec: LayerwiseSpec,
    triplet: TripletSpec,
    params: dict,
) -> list[Tensor]:
    """One triplet loss per tapped layer on pooled, projected features."""
    spec.validate()
    idx_a = [t.layer_index for t in taps_a]
    idx_p = [t.layer_index for t in taps_p]
    idx_n = [t.layer_index for t in taps_n]
    if not (idx_a == idx_p == idx_n):
        raise UsageError(
            f"tap sets disagree across roles: {idx_a}, {idx_p}, {idx_n}"
        )
    by_layer_a = {t.layer_index: t for t in taps_a}
    by_layer_p = {t.layer_index: t for t in taps_p}
    by_layer_n = {t.layer_index: t for t in taps_n}
    out: list[Tensor] = []
    for layer in spec.tap_layers:
        if layer not in by_layer_a:
            raise UsageError(f"tap layer {layer} not present in forward taps {idx_a}")
        fa = project_tap(by_layer_a[layer], params, layer)
        fp = project_tap(by_layer_p[layer], params, layer)
        fn = project_tap(by_layer_n[layer], params, layer)
        out.append(triplet_loss(fa, fp, fn, triplet))
    return out


def combine_losses(
    triplet_final: Tensor,
    identity: Tensor,
    layerwise: list[Tensor],
    lambda_id: float,
    weights: tuple[float, ...],
) -> Tensor:
    """Weighted sum with a fixed left-to-right fold order.

    Keeping the fold order fixed makes `total` bit-reproducible from
    the report's parts.
    """
    if len(weights) != len(layerwise):
        raise UsageError(
            f"{len(layerwise)} layer-wise losses but {len(weights)} weights"
        )
    total = add(triplet_final, scale(identity, lambda_id))
    for w, term in zip(weights, layerwise):
        total = add(total, scale(term, w))
    return total


def total_loss(
    final_a,
    final_p,
    final_n,
    logits_a: Tensor | None,
    label_a: int | None,
    taps_a: list[LayerTap],
    taps_p: list[LayerTap],
    taps_n: list[LayerTap],
    triplet: TripletSpec,
    layerwise_spec: LayerwiseSpec,
    lambda_id: float,
    params: dict,
) -> LossReport:
    """Combined objective for one (anchor, positive, negative) instance.

    Descriptor arguments may be PooledDescriptors or bare vectors.
    When `lambda_id` is 0 the identity term is skipped (logits may be
    None) and recorded as literal zero.
    """
    if lambda_id < 0:
        raise ConfigurationError(f"lambda_id must be >= 0, got {lambda_id}")
    va = final_a.vector if hasattr(final_a, "vector") else final_a
    vp = final_p.vector if hasattr(final_p, "vector") else final_p
    vn = final_n.vector if hasattr(final_n, "vector") else final_n
    triplet_final = triplet_loss(va, vp, vn, triplet)

    if lambda_id > 0:
        if logits_a is None or label_a is None:
            raise UsageError("lambda_id > 0 requires logits and a label")
        identity = cross_entropy(logits_a, label_a)
    else:
        identity = Tensor(0.0)

    layer_terms = layerwise_similarity_loss(
        taps_a, taps_p, taps_n, layerwise_spec, triplet, params
    )
    total = combine_losses(
        triplet_final, identity, layer_terms, lambda_id, layerwise_spec.weights
    )
    return LossReport(total, triplet_final, identity, layer_terms)


# ---------------------------------------------------------------------------
# batch-hard mining
# ---------------------------------------------------------------------------


def pairwise_distances(descriptors: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance matrix for an N x D array."""
    diff = descriptors[:, None, :] - descriptors[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def mine_batch_hard(
    descriptors: np.ndarray, labels: list
) -> list[tuple[int, int, int]]:
    """Hardest positive and hardest negative per anchor.

    `labels` are hashable identity keys (scoped however the caller
    scopes them).  Anchors lacking a positive or a negative are
    skipped; ties resolve to the lowest index, so mining is
    deterministic.  Returns (anchor, positive, negative) index triples.
    """
    n = len(labels)
    if descriptors.shape[0] != n:
        raise UsageError(
            f"{descriptors.shape[0]} descriptors but {n} labels"
        )
    dists = pairwise_distances(np.asarray(descriptors, dtype=np.float64))
    triples: list[tuple[int, int, int]] = []
    for i in range(n):
        same = np.asarray([labels[j] == labels[i] for j in range(n)])
        pos_mask = same.copy()
        pos_mask[i] = False
        neg_mask = ~same
        if not pos_mask.any() or not neg_mask.any():
            continue
        pos_d = np.where(pos_mask, dists[i], -np.inf)
        neg_d = np.where(neg_mask, dists[i], np.inf)
        triples.append((i, int(pos_d.argmax()), int(neg_d.argmin())))
    if not triples:
        raise UsageError(
            "no minable triplets: batch needs >= 2 identities with >= 2 samples"
        )
    return triples
