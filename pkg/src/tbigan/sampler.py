"""Triplet construction from the labeled subset and unsupervised batching.

Random sampling is the default; hard-negative mining is opt-in and works
against a snapshot of encoder codes refreshed by the caller (the trainer
recomputes it once per epoch rather than per step).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Union

import numpy as np

from .datasets import DatasetSplit, LabeledIndex
from .errors import ContractError


@dataclass
class TripletBatch:
    """Aligned (anchor, positive, negative) image triples.

    anchor and positive share a class, negative comes from a different
    one, and the anchor is never paired with itself as positive.
    """

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_class: np.ndarray
    negative_class: np.ndarray
    source_indices: tuple[np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        if not (self.anchor.shape == self.positive.shape == self.negative.shape):
            raise ContractError("triplet image arrays must share a shape")
        if np.any(self.anchor_class == self.negative_class):
            raise ContractError("negative shares a class with its anchor")
        a_idx, p_idx, _ = self.source_indices
        if np.any(a_idx == p_idx):
            raise ContractError("anchor and positive are the same example")

    def __len__(self) -> int:
        return self.anchor.shape[0]


@dataclass
class LabeledCodes:
    """Encoder codes for every labeled example, ordered by train index."""

    indices: np.ndarray
    labels: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        if not (len(self.indices) == len(self.labels) == len(self.codes)):
            raise ContractError("labeled code arrays misaligned")


EncoderSnapshot = Union[LabeledCodes, Callable[[np.ndarray], np.ndarray]]


def _labeled_view(index: LabeledIndex, split: DatasetSplit):
    flat = index.flattened()
    labels = split.train_labels[flat]
    class_ids = np.unique(labels)
    if len(class_ids) < 2:
        raise ContractError("triplet sampling needs labeled examples from at least 2 classes")
    by_class = {int(c): np.flatnonzero(labels == c) for c in class_ids}
    return flat, labels, by_class


def _draw_anchor_positive_negative(flat, labels, by_class, batch, rng):
    # Anchors are uniform over labeled examples whose class has a second
    # member (singleton-class anchors are resampled, which is equivalent
    # to excluding them from the pool).
    pools = [pos for pos in by_class.values() if len(pos) >= 2]
    if not pools:
        raise ContractError("no class has >= 2 labeled examples")
    eligible = np.concatenate(pools)
    anchor_pos = rng.choice(eligible, size=batch, replace=True)
    positive_pos = np.empty(batch, dtype=np.int64)
    negative_pos = np.empty(batch, dtype=np.int64)
    for i, a in enumerate(anchor_pos):
        same = by_class[int(labels[a])]
        j = rng.integers(len(same) - 1)
        if same[j] == a:  # skip the anchor's own slot
            j = len(same) - 1
        positive_pos[i] = same[j]
    return anchor_pos, positive_pos, negative_pos


def sample_triplet_batch(
    index: LabeledIndex, split: DatasetSplit, batch: int, rng: np.random.Generator
) -> TripletBatch:
    """Draw ``batch`` random triplets from the labeled subset.

    Anchors are uniform over the labeled examples; the positive is uniform
    over the anchor's class excluding the anchor itself; the negative is
    uniform over all labeled examples of other classes.
    """
    flat, labels, by_class = _labeled_view(index, split)
    anchor_pos, positive_pos, negative_pos = _draw_anchor_positive_negative(flat, labels, by_class, batch, rng)
    others_by_class = {c: np.flatnonzero(labels != c) for c in by_class}
    for i, a in enumerate(anchor_pos):
        others = others_by_class[int(labels[a])]
        negative_pos[i] = others[rng.integers(len(others))]
    return _gather_triplets(split, flat, labels, anchor_pos, positive_pos, negative_pos)


def compute_labeled_codes(
    embed_fn: Callable[[np.ndarray], np.ndarray], split: DatasetSplit, index: LabeledIndex
) -> LabeledCodes:
    """Embed every labeled train example with a deterministic encoder snapshot."""
    flat = index.flattened()
    codes = np.asarray(embed_fn(split.train_images[flat]))
    return LabeledCodes(indices=flat, labels=split.train_labels[flat], codes=codes)


def sample_hard_negative_batch(
    index: LabeledIndex,
    split: DatasetSplit,
    batch: int,
    encoder_snapshot: EncoderSnapshot,
    rng: np.random.Generator,
) -> TripletBatch:
    """Draw triplets whose negative is the nearest other-class labeled example.

    Distances are L2 in the snapshot's code space; ties go to the lowest
    train index. Anchors and positives follow the random scheme.
    """
    snapshot = (
        encoder_snapshot
        if isinstance(encoder_snapshot, LabeledCodes)
        else compute_labeled_codes(encoder_snapshot, split, index)
    )
    flat, labels, by_class = _labeled_view(index, split)
    if len(snapshot.indices) != len(flat) or np.any(snapshot.indices != flat):
        raise ContractError("encoder snapshot does not cover the labeled index")
    codes = np.asarray(snapshot.codes, dtype=np.float64)

    anchor_pos, positive_pos, negative_pos = _draw_anchor_positive_negative(flat, labels, by_class, batch, rng)
    for i, a in enumerate(anchor_pos):
        dist = np.linalg.norm(codes - codes[a], axis=1)
        dist[labels == labels[a]] = np.inf
        negative_pos[i] = np.lexsort((flat, dist))[0]
    return _gather_triplets(split, flat, labels, anchor_pos, positive_pos, negative_pos)


def _gather_triplets(split, flat, labels, anchor_pos, positive_pos, negative_pos) -> TripletBatch:
    a_idx, p_idx, n_idx = flat[anchor_pos], flat[positive_pos], flat[negative_pos]
    return TripletBatch(
        anchor=split.train_images[a_idx],
        positive=split.train_images[p_idx],
        negative=split.train_images[n_idx],
        anchor_class=labels[anchor_pos],
        negative_class=labels[negative_pos],
        source_indices=(a_idx, p_idx, n_idx),
    )


def unsupervised_batches(
    split: DatasetSplit, batch_size: int, rng: np.random.Generator
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield one epoch of (images, train_indices) batches.

    Each epoch is a fresh seeded permutation of the train set; every index
    appears exactly once per epoch and the final batch may be short.
    """
    n = split.train_size
    if batch_size < 1 or batch_size > n:
        raise ContractError(f"batch_size {batch_size} out of range for train size {n}")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = order[start : start + batch_size]
        yield split.train_images[chunk], chunk
