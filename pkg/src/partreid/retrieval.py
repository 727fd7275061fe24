"""Query/gallery retrieval evaluation.

Queries are matched only against gallery samples of their own action.
Rankings sort by ascending Euclidean distance with ties broken by
ascending sample id, so evaluation is a total order and bit-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasynth import Manifest, Sample, load_image
from .errors import DataIOError, EvaluationError, UsageError


@dataclass
class RankingResult:
    query_id: int
    ordered_gallery: list[int]
    relevance: list[bool]


@dataclass
class EvalReport:
    per_query: list[tuple[int, int, float, int]]  # (query_id, action_id, AP, first_match_rank)
    map_score: float
    rank_k: dict[int, float]
    config_hash: str = ""

    @property
    def num_queries(self) -> int:
        return len(self.per_query)


RANK_K_VALUES = (1, 5)


def extract_descriptors(
    manifest: Manifest,
    manifest_dir,
    model,
    roles: tuple[str, ...] = ("query", "gallery"),
) -> dict[int, np.ndarray]:
    """Compute one unit descriptor per sample in the chosen roles.

    `model` must expose descriptor(image_array) -> 1-D unit vector; a
    bare callable with that contract also works.
    """
    fn = getattr(model, "descriptor", model)
    out: dict[int, np.ndarray] = {}
    for sample in manifest.records:
        if sample.role not in roles:
            continue
        try:
            image = load_image(manifest_dir, sample)
        except DataIOError as exc:
            raise DataIOError(f"descriptor extraction failed: {exc}") from exc
        out[sample.sample_id] = np.asarray(fn(image), dtype=np.float64)
    return out


def rank_gallery(
    query_desc: np.ndarray,
    query: Sample,
    gallery: list[Sample],
    descriptors: dict[int, np.ndarray],
) -> RankingResult:
    """Order one action's gallery by distance to the query descriptor."""
    if not gallery:
        raise EvaluationError(
            f"query {query.sample_id}: action {query.action_id} has no gallery samples"
        )
    ids = np.asarray([g.sample_id for g in gallery], dtype=np.int64)
    mat = np.stack([descriptors[g.sample_id] for g in gallery])
    diff = mat - np.asarray(query_desc, dtype=np.float64)[None, :]
    dists = np.sqrt((diff * diff).sum(axis=1))
    order = np.lexsort((ids, dists))
    ordered = [int(ids[i]) for i in order]
    pid_of = {g.sample_id: g.pid for g in gallery}
    relevance = [pid_of[sid] == query.pid for sid in ordered]
    return RankingResult(query.sample_id, ordered, relevance)


def average_precision(relevance: list[bool]) -> float:
    """Mean of precision-at-hit over all relevant positions."""
    total_relevant = sum(bool(r) for r in relevance)
    if total_relevant == 0:
        raise UsageError("average_precision needs at least one relevant item")
    hits = 0
    acc = 0.0
    for rank, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            acc += hits / rank
    return acc / total_relevant


def first_match_rank(relevance: list[bool]) -> int:
    for rank, rel in enumerate(relevance, start=1):
        if rel:
            return rank
    raise UsageError("no relevant item in ranking")


def evaluate(
    manifest: Manifest,
    manifest_dir,
    model,
    config_hash: str = "",
) -> EvalReport:
    """Rank every query against its action's gallery; aggregate AP and rank-k."""
    descriptors = extract_descriptors(manifest, manifest_dir, model)
    return evaluate_descriptors(manifest, descriptors, config_hash)


def evaluate_descriptors(
    manifest: Manifest,
    descriptors: dict[int, np.ndarray],
    config_hash: str = "",
) -> EvalReport:
    """Evaluation core on precomputed descriptors (testable in isolation)."""
    queries = manifest.with_role("query")
    if not queries:
        raise EvaluationError("manifest has no query samples")
    by_action: dict[int, list[Sample]] = {}
    for s in manifest.records:
        if s.role == "gallery":
            by_action.setdefault(s.action_id, []).append(s)

    per_query: list[tuple[int, int, float, int]] = []
    for q in queries:
        gallery = by_action.get(q.action_id, [])
        if not gallery:
            raise EvaluationError(
                f"query {q.sample_id}: action {q.action_id} has no gallery"
            )
        ranking = rank_gallery(descriptors[q.sample_id], q, gallery, descriptors)
        ap = average_precision(ranking.relevance)
        fmr = first_match_rank(ranking.relevance)
        per_query.append((q.sample_id, q.action_id, ap, fmr))

    n = len(per_query)
    map_score = sum(row[2] for row in per_query) / n
    rank_k = {
        k: sum(1 for row in per_query if row[3] <= k) / n for k in RANK_K_VALUES
    }
    return EvalReport(per_query, map_score, rank_k, config_hash)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def write_report_json(report: EvalReport, path) -> None:
    payload = {
        "mAP": report.map_score,
        "rank_k": {str(k): v for k, v in sorted(report.rank_k.items())},
        "num_queries": report.num_queries,
        "config_hash": report.config_hash,
        "per_query": [
            {
                "query_id": qid,
                "action_id": aid,
                "ap": ap,
                "first_match_rank": fmr,
            }
            for qid, aid, ap, fmr in report.per_query
        ],
    }
    try:
        Path(path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise DataIOError(f"cannot write report {path}: {exc}") from exc


def write_report_csv(report: EvalReport, path) -> None:
    lines = ["query_id,action_id,ap,first_match_rank"]
    for qid, aid, ap, fmr in report.per_query:
        lines.append(f"{qid},{aid},{ap!r},{fmr}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write report {path}: {exc}") from exc
