"""Evaluation protocols over descriptors and scored pairs.

All metrics are pure functions of their inputs with deterministic tie
handling: FPR95 (false-positive rate at the threshold reaching 95% true
positives), average precision, and the three descriptor tasks (verification,
matching, retrieval) reported as mean average precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DESCRIPTOR_MAGIC = b"RALD"


class DescriptorFileError(ValueError):
    """Raised for unreadable descriptor files."""


@dataclass
class EvalReport:
    metric: str
    value: float
    threshold: float | None = None
    counts: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def summary(self) -> str:
        if self.metric == "fpr95":
            return f"FPR95 (%): {100.0 * self.value:.2f}"
        return f"{self.metric}: {self.value:.4f}"


def _check_scored(scores: np.ndarray, labels: np.ndarray) -> None:
    if len(scores) != len(labels):
        raise ValueError(f"scores ({len(scores)}) and labels ({len(labels)}) differ")
    if not labels.any() or labels.all():
        raise ValueError("need at least one match and one non-match")


def fpr95(scores, labels):
    """False-positive rate at >= 95% true-positive rate.

    The threshold is the largest score t with at least 95% of matches scoring
    >= t; returns (fraction of non-matches scoring >= t, t).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    _check_scored(scores, labels)
    match_scores = np.sort(scores[labels])[::-1]
    needed = int(np.ceil(0.95 * len(match_scores)))
    threshold = match_scores[needed - 1]
    fpr = float(np.mean(scores[~labels] >= threshold))
    return fpr, float(threshold)


def average_precision(scores, labels) -> float:
    """Mean of precision at the rank of each positive (no interpolation).

    Sorting is by descending score; ties keep their original input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if len(scores) != len(labels):
        raise ValueError(f"scores ({len(scores)}) and labels ({len(labels)}) differ")
    if not labels.any():
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.arange(1, len(hits) + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].mean())


# ---------------------------------------------------------------------------
# descriptor tasks


def _unit_rows(m: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((m.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise ValueError(f"zero-norm descriptor row in {what}")
    return m / norms[:, None]


def cosine_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two equally shaped descriptor batches."""
    if a.shape != b.shape:
        raise ValueError(f"descriptor batches differ: {a.shape} vs {b.shape}")
    ua = _unit_rows(a, "first batch")
    ub = _unit_rows(b, "second batch")
    return (ua * ub).sum(axis=1)


def verification_map(sets) -> EvalReport:
    """mAP over verification sets of (descriptors_a, descriptors_b, labels)."""
    aps = []
    for a, b, labels in sets:
        scores = cosine_scores(a, b)
        aps.append(average_precision(scores, labels))
    return EvalReport("verification_map", float(np.mean(aps)),
                      counts={"sets": len(aps)}, details={"ap_per_set": aps})


@dataclass
class MatchingAssignment:
    chosen: np.ndarray         # (N,) target index per reference item
    confidence: np.ndarray     # (N,) similarity of the chosen match
    correct: np.ndarray        # (N,) bool, chosen index equals own index


def match_descriptors(ref: np.ndarray, target: np.ndarray) -> MatchingAssignment:
    """Greedy nearest match of each reference row into the target set
    (cosine, ties to the smallest index); correct when it lands on its own row."""
    if ref.shape != target.shape:
        raise ValueError(f"matching needs equal collections: {ref.shape} vs {target.shape}")
    sims = _unit_rows(ref, "reference") @ _unit_rows(target, "target").T
    chosen = sims.argmax(axis=1)
    idx = np.arange(len(ref))
    return MatchingAssignment(chosen, sims[idx, chosen], chosen == idx)


def matching_map(ref: np.ndarray, targets) -> EvalReport:
    """mAP over target collections of the correctness sequence ranked by
    match confidence."""
    aps = []
    for target in targets:
        m = match_descriptors(ref, target)
        if not m.correct.any():
            aps.append(0.0)
        else:
            aps.append(average_precision(m.confidence, m.correct))
    return EvalReport("matching_map", float(np.mean(aps)),
                      counts={"collections": len(aps)}, details={"ap_per_set": aps})


def retrieval_map(queries: np.ndarray, query_labels, pool: np.ndarray,
                  pool_labels) -> EvalReport:
    """mAP over queries; per query the pool is ranked by cosine similarity and
    positives are the pool items sharing the query's label."""
    query_labels = np.asarray(query_labels)
    pool_labels = np.asarray(pool_labels)
    if len(queries) != len(query_labels):
        raise ValueError("one label per query required")
    if len(pool) != len(pool_labels):
        raise ValueError("one label per pool item required")
    sims = _unit_rows(queries, "queries") @ _unit_rows(pool, "pool").T
    aps = []
    for i in range(len(queries)):
        positives = pool_labels == query_labels[i]
        if not positives.any():
            raise ValueError(f"query {i} has no positives in the pool")
        aps.append(average_precision(sims[i], positives))
    return EvalReport("retrieval_map", float(np.mean(aps)),
                      counts={"queries": len(aps)}, details={"ap_per_query": aps})


def brown_fpr95(descriptors: np.ndarray, first, second, is_match) -> EvalReport:
    """Patch-verification FPR95 from per-pair cosine scores."""
    scores = cosine_scores(descriptors[np.asarray(first)],
                           descriptors[np.asarray(second)])
    is_match = np.asarray(is_match, dtype=bool)
    value, threshold = fpr95(scores, is_match)
    return EvalReport("fpr95", value, threshold=threshold,
                      counts={"matches": int(is_match.sum()),
                              "non_matches": int((~is_match).sum())})


# ---------------------------------------------------------------------------
# descriptor files: magic "RALD", u32 count, u32 dim, float32 LE row-major


def export_descriptors(batch: np.ndarray, path: str) -> None:
    if batch.ndim != 2:
        raise ValueError(f"descriptor batch must be (N,d), got {batch.shape}")
    with open(path, "wb") as f:
        f.write(DESCRIPTOR_MAGIC)
        f.write(struct.pack("<II", batch.shape[0], batch.shape[1]))
        f.write(np.ascontiguousarray(batch, dtype="<f4").tobytes())


def import_descriptors(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DESCRIPTOR_MAGIC:
        raise DescriptorFileError(f"{path}: bad magic, not a descriptor file")
    if len(blob) < 12:
        raise DescriptorFileError(f"{path}: truncated header")
    count, dim = struct.unpack("<II", blob[4:12])
    need = 12 + 4 * count * dim
    if len(blob) != need:
        raise DescriptorFileError(f"{path}: expected {need} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=12)
    return data.reshape(count, dim).copy()
