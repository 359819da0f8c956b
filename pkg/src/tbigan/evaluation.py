"""Embedding evaluation: distance-weighted k-NN, retrieval mAP, exports.

Distances are Euclidean, computed exactly (scipy cdist, no dot-product
shortcut) so that a query coinciding with a database point really has
distance zero. Rankings break ties by database index via stable sorts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .errors import ContractError
from .models import Encoder

logger = logging.getLogger(__name__)

_QUERY_CHUNK = 512
_zero_relevant_queries = 0


@dataclass
class EmbeddingSet:
    """Encoder outputs for one split, aligned with labels."""

    vectors: np.ndarray
    labels: np.ndarray
    source: str
    m: int
    deterministic: bool = True

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.m:
            raise ContractError(f"vectors have shape {self.vectors.shape}, expected (N, {self.m})")
        if self.labels.shape != (self.vectors.shape[0],):
            raise ContractError("labels misaligned with vectors")
        if self.vectors.size and not np.all(np.isfinite(self.vectors)):
            raise ContractError("embedding vectors contain non-finite entries")

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class EvalReport:
    """Classification accuracy and retrieval mAP at one (model, m, n) cell."""

    accuracy: float
    map: float
    per_class_ap: list
    per_class_queries: list
    k: int
    m: int
    n_per_class: int
    model_tag: str
    dataset: str = ""

    def __post_init__(self):
        counts = np.asarray(self.per_class_queries, dtype=np.float64)
        aps = np.asarray(self.per_class_ap, dtype=np.float64)
        if counts.sum() > 0:
            weighted = float(np.nansum(np.where(counts > 0, aps, 0.0) * counts) / counts.sum())
            if abs(weighted - self.map) > 1e-9:
                raise ContractError(f"map {self.map} != query-weighted per-class mean {weighted}")

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "map": self.map,
            "per_class_ap": list(self.per_class_ap),
            "per_class_queries": list(self.per_class_queries),
            "k": self.k,
            "m": self.m,
            "n_per_class": self.n_per_class,
            "model_tag": self.model_tag,
            "dataset": self.dataset,
        }

    @staticmethod
    def from_dict(data: dict) -> "EvalReport":
        return EvalReport(**data)


def encode_images(encoder: Encoder, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Deterministic-mode encoder codes (z = mu) for a stack of images."""
    encoder.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = torch.as_tensor(images[start : start + batch_size])
            chunks.append(encoder(batch, deterministic=True).z.numpy())
    if not chunks:
        return np.empty((0, encoder.config.latent_dim), dtype=np.float32)
    return np.concatenate(chunks)


def embed(
    encoder: Encoder,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 256,
    source: str = "unspecified",
) -> EmbeddingSet:
    """Embed a split with the deterministic encoder; batch size does not
    affect the result (running batchnorm statistics are used)."""
    vectors = encode_images(encoder, images, batch_size=batch_size)
    return EmbeddingSet(
        vectors=vectors,
        labels=np.asarray(labels, dtype=np.int64),
        source=source,
        m=encoder.config.latent_dim,
        deterministic=True,
    )


def _check_pair(db: EmbeddingSet, queries: EmbeddingSet) -> None:
    if len(db) == 0 or len(queries) == 0:
        raise ContractError("db and queries must be nonempty")
    if db.m != queries.m:
        raise ContractError(f"dimension mismatch: db m={db.m}, queries m={queries.m}")


def knn_classify(db: EmbeddingSet, queries: EmbeddingSet, k: int = 9, weights: str = "inverse") -> np.ndarray:
    """Distance-weighted k-NN class predictions for each query.

    Neighbors vote with weight 1/d ("inverse", the default) or 1
    ("uniform"); a zero-distance neighbor decides the query outright under
    inverse weighting. Score ties go to the smallest class id, distance
    ties to the smallest database index.
    """
    _check_pair(db, queries)
    if not 1 <= k <= len(db):
        raise ContractError(f"k={k} out of range for db of size {len(db)}")
    if weights not in ("inverse", "uniform"):
        raise ContractError(f"unknown weight scheme {weights!r}")
    db_vec = np.asarray(db.vectors, dtype=np.float64)
    db_labels = np.asarray(db.labels)
    class_count = int(db_labels.max()) + 1
    predictions = np.empty(len(queries), dtype=np.int64)
    q_vec = np.asarray(queries.vectors, dtype=np.float64)
    for start in range(0, len(queries), _QUERY_CHUNK):
        chunk = q_vec[start : start + _QUERY_CHUNK]
        dist = cdist(chunk, db_vec)
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        for row in range(chunk.shape[0]):
            nearest = order[row]
            d = dist[row, nearest]
            if weights == "inverse" and d[0] == 0.0:
                predictions[start + row] = db_labels[nearest[0]]
                continue
            w = 1.0 / d if weights == "inverse" else np.ones_like(d)
            scores = np.bincount(db_labels[nearest], weights=w, minlength=class_count)
            predictions[start + row] = int(np.argmax(scores))
    return predictions


def average_precision(relevance: Sequence[int]) -> float:
    """AP of a binary relevance sequence ordered by ascending distance.

    Computed over the full ranking length. A query with no relevant item
    contributes 0 and bumps the zero-relevant counter.
    """
    global _zero_relevant_queries
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.size == 0 or not np.all((rel == 0) | (rel == 1)):
        raise ContractError("relevance must be a nonempty binary sequence")
    total = rel.sum()
    if total == 0:
        if _zero_relevant_queries == 0:
            logger.warning("query with zero relevant database items; AP defined as 0")
        _zero_relevant_queries += 1
        return 0.0
    precision = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((precision * rel).sum() / total)


def zero_relevant_count() -> int:
    return _zero_relevant_queries


def reset_zero_relevant_count() -> None:
    global _zero_relevant_queries
    _zero_relevant_queries = 0


def retrieval_map(db: EmbeddingSet, queries: EmbeddingSet) -> tuple[float, np.ndarray]:
    """Mean average precision over all queries, plus per-class mean AP.

    Each query ranks the whole database by distance (ties by index);
    relevance is same-class membership. per_class_ap[c] is NaN for classes
    without queries.
    """
    _check_pair(db, queries)
    db_vec = np.asarray(db.vectors, dtype=np.float64)
    db_labels = np.asarray(db.labels)
    q_vec = np.asarray(queries.vectors, dtype=np.float64)
    class_count = int(max(db_labels.max(), queries.labels.max())) + 1
    ap_sum = np.zeros(class_count)
    ap_count = np.zeros(class_count, dtype=np.int64)
    for start in range(0, len(queries), _QUERY_CHUNK):
        chunk = q_vec[start : start + _QUERY_CHUNK]
        dist = cdist(chunk, db_vec)
        order = np.argsort(dist, axis=1, kind="stable")
        for row in range(chunk.shape[0]):
            label = int(queries.labels[start + row])
            ap = average_precision(db_labels[order[row]] == label)
            ap_sum[label] += ap
            ap_count[label] += 1
    per_class = np.where(ap_count > 0, ap_sum / np.maximum(ap_count, 1), np.nan)
    overall = float(ap_sum.sum() / ap_count.sum())
    return overall, per_class


def evaluate_embeddings(
    db: EmbeddingSet,
    queries: EmbeddingSet,
    k: int = 9,
    n_per_class: int = 0,
    model_tag: str = "",
    dataset: str = "",
    weights: str = "inverse",
) -> EvalReport:
    """Run classification and retrieval against a database and package the result."""
    predictions = knn_classify(db, queries, k=k, weights=weights)
    accuracy = float(np.mean(predictions == queries.labels))
    overall_map, per_class_ap = retrieval_map(db, queries)
    counts = np.bincount(queries.labels, minlength=len(per_class_ap))
    return EvalReport(
        accuracy=accuracy,
        map=overall_map,
        per_class_ap=[None if np.isnan(v) else float(v) for v in per_class_ap],
        per_class_queries=[int(c) for c in counts],
        k=k,
        m=db.m,
        n_per_class=n_per_class,
        model_tag=model_tag,
        dataset=dataset,
    )


def retrieval_grid(
    db_images: np.ndarray,
    db: EmbeddingSet,
    query_images: np.ndarray,
    queries: EmbeddingSet,
    top: int = 5,
    pad: int = 2,
) -> np.ndarray:
    """Montage with one row per query: the query then its ``top`` nearest
    database images, separated by white padding. Returns uint8 HxWx3."""
    _check_pair(db, queries)
    if top > len(db):
        raise ContractError(f"top={top} exceeds db size {len(db)}")
    if len(db_images) != len(db) or len(query_images) != len(queries):
        raise ContractError("images misaligned with embeddings")
    dist = cdist(np.asarray(queries.vectors, dtype=np.float64), np.asarray(db.vectors, dtype=np.float64))
    order = np.argsort(dist, axis=1, kind="stable")[:, :top]

    def to_rgb(image: np.ndarray) -> np.ndarray:
        array = (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8)
        if array.shape[0] == 1:
            array = np.repeat(array, 3, axis=0)
        return np.transpose(array, (1, 2, 0))

    h, w = query_images.shape[2], query_images.shape[3]
    rows = len(queries)
    cols = top + 1
    grid = np.full((rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad, 3), 255, dtype=np.uint8)
    for r in range(rows):
        tiles = [to_rgb(query_images[r])] + [to_rgb(db_images[j]) for j in order[r]]
        y = pad + r * (h + pad)
        for c, tile in enumerate(tiles):
            x = pad + c * (w + pad)
            grid[y : y + h, x : x + w] = tile
    return grid


def save_image_grid(grid: np.ndarray, path: Union[str, Path]) -> None:
    from PIL import Image

    Image.fromarray(grid).save(path)


def export_embeddings(embeddings: EmbeddingSet, path: Union[str, Path]) -> None:
    """Write a columnar text file: a header line with the dimension and
    count, then one row per vector (m floats at 9 significant digits plus
    the integer label, tab-separated). Suitable input for external t-SNE
    tools."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"# dim={embeddings.m} count={len(embeddings)}\n")
        for vector, label in zip(embeddings.vectors, embeddings.labels):
            fields = [f"{value:.9g}" for value in vector] + [str(int(label))]
            fh.write("\t".join(fields) + "\n")


def read_embeddings(path: Union[str, Path]) -> EmbeddingSet:
    """Inverse of export_embeddings."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        try:
            parts = dict(item.split("=") for item in header.lstrip("# ").split())
            m, count = int(parts["dim"]), int(parts["count"])
        except Exception as exc:
            raise ContractError(f"bad embeddings header {header!r} in {path}") from exc
        vectors = np.empty((count, m), dtype=np.float64)
        labels = np.empty(count, dtype=np.int64)
        for i in range(count):
            fields = fh.readline().split()
            if len(fields) != m + 1:
                raise ContractError(f"row {i} of {path} has {len(fields)} fields, expected {m + 1}")
            vectors[i] = [float(v) for v in fields[:m]]
            labels[i] = int(fields[m])
    return EmbeddingSet(vectors=vectors, labels=labels, source="imported", m=m, deterministic=True)


def render_reports_table(reports: Sequence[EvalReport], metric: str, axis: str) -> str:
    """Aligned text table: one row per model, one column per axis value.

    ``metric`` is 'accuracy' or 'map'; ``axis`` is 'm' (feature size) or
    'n' (labels per class), mirroring the benchmark table layouts.
    """
    if metric not in ("accuracy", "map"):
        raise ContractError(f"unknown metric {metric!r}")
    if axis not in ("m", "n"):
        raise ContractError(f"unknown axis {axis!r}")
    key = (lambda r: r.m) if axis == "m" else (lambda r: r.n_per_class)
    values = sorted({key(r) for r in reports})
    models = sorted({r.model_tag for r in reports})
    cells: dict[tuple[str, int], str] = {}
    for r in reports:
        cells[(r.model_tag, key(r))] = f"{getattr(r, metric):.4f}"
    header = ["model"] + [f"{axis}={v}" for v in values]
    rows = [[model] + [cells.get((model, v), "-") for v in values] for model in models]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in [header] + rows]
    title = {"accuracy": "classification accuracy", "map": "retrieval mAP"}[metric]
    by = {"m": "feature vector size", "n": "labeled examples per class"}[axis]
    return f"{title} by {by}\n" + "\n".join(lines) + "\n"
