"""Retrieval and classification metrics: similarity matrices, recall@K,
mean average precision, and accuracy. All rank statistics use fixed,
documented tie-breaking so results are deterministic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Modality
from .validation import ValidationError, check_finite, check_unit_rows, require


@dataclass(frozen=True)
class SimilarityMatrix:
    """Rows index queries, columns index the gallery; under aligned sample
    ids the diagonal is the ground-truth match."""

    values: np.ndarray
    row_modality: Modality
    col_modality: Modality
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValidationError(f"SimilarityMatrix: expected square matrix, got {self.values.shape}")
        if len(self.sample_ids) != self.values.shape[0]:
            raise ValidationError("SimilarityMatrix: sample_ids must match matrix size")
        check_finite(self.values, "SimilarityMatrix.values")

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _embedding_block(embeddings, name: str) -> tuple[np.ndarray, list[str], Modality | None]:
    """Accept a list of PooledEmbedding or a plain (N, d) array."""
    if hasattr(embeddings, "ndim"):
        arr = np.asarray(embeddings, dtype=np.float64)
        return arr, [str(i) for i in range(arr.shape[0])], None
    vectors, ids = [], []
    modality = None
    for emb in embeddings:
        vectors.append(emb.numpy())
        ids.append(emb.sample_id)
        modality = emb.modality
    require(len(vectors) >= 1, f"{name}: empty embedding list")
    return np.stack(vectors).astype(np.float64), ids, modality


def build_similarity(queries, gallery) -> SimilarityMatrix:
    """Cosine similarities between unit-norm query and gallery embeddings.

    Queries and gallery must be aligned by sample id: entry (i, i) is the
    ground-truth pair.
    """
    q, q_ids, q_mod = _embedding_block(queries, "queries")
    g, g_ids, g_mod = _embedding_block(gallery, "gallery")
    if q.shape != g.shape:
        raise ValidationError(f"build_similarity: query block {q.shape} vs gallery block {g.shape}")
    if q_ids != g_ids:
        raise ValidationError("build_similarity: query/gallery sample ids are misaligned")
    check_unit_rows(q, "queries")
    check_unit_rows(g, "gallery")
    return SimilarityMatrix(
        values=q @ g.T,
        row_modality=q_mod or Modality.AUDIO,
        col_modality=g_mod or Modality.VISUAL,
        sample_ids=tuple(q_ids),
    )


def _truth_rank(row: np.ndarray, truth: int) -> int:
    """1-based rank of the truth column; similarity ties break by column
    index ascending (a tied earlier column outranks a tied later one)."""
    better = int(np.sum(row > row[truth]))
    tied_earlier = int(np.sum(row[:truth] == row[truth]))
    return 1 + better + tied_earlier


def recall_at_k(sim: SimilarityMatrix | np.ndarray, k: int) -> float:
    """Fraction of rows whose ground-truth column ranks within the top K."""
    values = sim.values if isinstance(sim, SimilarityMatrix) else np.asarray(sim, dtype=np.float64)
    n = values.shape[0]
    require(1 <= k <= n, f"recall_at_k: K={k} outside [1, {n}]")
    hits = sum(1 for i in range(n) if _truth_rank(values[i], i) <= k)
    return hits / n


def mean_average_precision(scores, labels) -> float:
    """Macro-averaged per-class average precision.

    Each class ranks all N samples by its score (ties break by sample index
    ascending); classes with zero positives are excluded from the mean.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 2:
        raise ValidationError(f"mean_average_precision: scores {s.shape} vs labels {y.shape}")
    aps = []
    n = s.shape[0]
    for c in range(s.shape[1]):
        positives = int(y[:, c].sum())
        if positives == 0:
            continue
        order = np.lexsort((np.arange(n), -s[:, c]))
        ranked = y[order, c]
        tp = np.cumsum(ranked)
        precision = tp / np.arange(1, n + 1)
        aps.append(float(precision[ranked.astype(bool)].sum() / positives))
    if not aps:
        raise ValidationError("mean_average_precision: no class has a positive label")
    return float(np.mean(aps))


def accuracy(predictions, labels) -> float:
    """Fraction of exact matches between aligned prediction/label vectors."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape or pred.ndim != 1:
        raise ValidationError(f"accuracy: predictions {pred.shape} vs labels {lab.shape}")
    require(pred.size >= 1, "accuracy: empty inputs")
    return float(np.mean(pred == lab))


def format_table(headers: Sequence[str], rows: Sequence[Sequence], sep: str = "\t") -> str:
    """Delimiter-separated text table with a header row."""
    lines = [sep.join(str(h) for h in headers)]
    for row in rows:
        lines.append(sep.join(_format_cell(c) for c in row))
    return "\n".join(lines) + "\n"


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
