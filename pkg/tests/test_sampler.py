import numpy as np
import pytest

from tbigan.datasets import DatasetSplit, LabeledIndex, select_labeled_subset, synthetic_shapes
from tbigan.errors import ContractError
from tbigan.sampler import (
    LabeledCodes,
    compute_labeled_codes,
    sample_hard_negative_batch,
    sample_triplet_batch,
    unsupervised_batches,
)


def make_toy_split(labels, values):
    """Split whose train images are constant-valued; value doubles as a code."""
    labels = np.asarray(labels, dtype=np.int64)
    values = np.asarray(values, dtype=np.float32)
    images = np.broadcast_to(values[:, None, None, None], (len(values), 1, 8, 8)).copy()
    empty_x = np.zeros((0, 1, 8, 8), dtype=np.float32)
    empty_y = np.zeros(0, dtype=np.int64)
    return DatasetSplit(images, labels, empty_x, empty_y, empty_x, empty_y, int(labels.max()) + 1, (1, 8, 8))


def index_over_all(split):
    classes = {int(c): np.flatnonzero(split.train_labels == c) for c in np.unique(split.train_labels)}
    n = min(len(v) for v in classes.values())
    return LabeledIndex(per_class_indices={c: v[:n] for c, v in classes.items()}, n_per_class=n, seed=0)


class TestRandomTriplets:
    def test_class_constraints_hold(self, tiny_split, tiny_index):
        batch = sample_triplet_batch(tiny_index, tiny_split, 64, np.random.default_rng(0))
        assert len(batch) == 64
        a_idx, p_idx, n_idx = batch.source_indices
        assert np.all(tiny_split.train_labels[a_idx] == tiny_split.train_labels[p_idx])
        assert np.all(tiny_split.train_labels[a_idx] != tiny_split.train_labels[n_idx])
        assert np.all(a_idx != p_idx)
        labeled = set(tiny_index.flattened())
        assert set(a_idx) <= labeled and set(p_idx) <= labeled and set(n_idx) <= labeled

    def test_two_by_two_forces_the_other_example(self):
        split = make_toy_split([0, 0, 1, 1], [0.1, 0.2, 0.3, 0.4])
        index = index_over_all(split)
        batch = sample_triplet_batch(index, split, 32, np.random.default_rng(1))
        a_idx, p_idx, _ = batch.source_indices
        partner = {0: 1, 1: 0, 2: 3, 3: 2}
        assert all(p == partner[a] for a, p in zip(a_idx, p_idx))

    def test_fixed_seed_reproduces_batch(self, tiny_split, tiny_index):
        a = sample_triplet_batch(tiny_index, tiny_split, 16, np.random.default_rng(5))
        b = sample_triplet_batch(tiny_index, tiny_split, 16, np.random.default_rng(5))
        for left, right in zip(a.source_indices, b.source_indices):
            np.testing.assert_array_equal(left, right)
        np.testing.assert_array_equal(a.anchor, b.anchor)

    def test_anchor_class_frequencies_uniform(self):
        split = synthetic_shapes(3, 20, 16, seed=3)
        index = select_labeled_subset(split, 10, seed=0)
        rng = np.random.default_rng(7)
        counts = np.zeros(3)
        draws = 10_000
        for _ in range(draws // 100):
            batch = sample_triplet_batch(index, split, 100, rng)
            counts += np.bincount(batch.anchor_class, minlength=3)
        freq = counts / draws
        sigma = np.sqrt((1 / 3) * (2 / 3) / draws)
        assert np.all(np.abs(freq - 1 / 3) < 3 * sigma)

    def test_single_label_per_class_rejected(self):
        split = make_toy_split([0, 1], [0.1, 0.9])
        index = index_over_all(split)  # one example per class: nothing can anchor
        with pytest.raises(ContractError):
            sample_triplet_batch(index, split, 4, np.random.default_rng(0))


class TestHardNegatives:
    def test_nearest_other_class_on_toy_codes(self):
        split = make_toy_split([0, 0, 1, 1], [0.0, 0.2, 0.3, 0.5])
        index = index_over_all(split)
        codes = np.array([[0.0], [0.2], [0.3], [5.0]])
        snapshot = LabeledCodes(indices=np.arange(4), labels=split.train_labels, codes=codes)
        batch = sample_hard_negative_batch(index, split, 64, snapshot, np.random.default_rng(2))
        expected_negative = {0: 2, 1: 2, 2: 1, 3: 1}  # nearest other-class code
        a_idx, _, n_idx = batch.source_indices
        assert all(n == expected_negative[a] for a, n in zip(a_idx, n_idx))

    def test_distance_ties_break_to_lowest_index(self):
        split = make_toy_split([0, 1, 1, 0], [0.0, 0.5, 0.5, 0.9])
        index = index_over_all(split)
        codes = np.array([[0.0], [1.0], [1.0], [9.0]])
        snapshot = LabeledCodes(indices=np.arange(4), labels=split.train_labels, codes=codes)
        batch = sample_hard_negative_batch(index, split, 32, snapshot, np.random.default_rng(3))
        a_idx, _, n_idx = batch.source_indices
        for a, n in zip(a_idx, n_idx):
            if a == 0:  # both class-1 codes sit at distance 1.0
                assert n == 1

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(4)
        labels = np.repeat(np.arange(4), 15)
        split = make_toy_split(labels, rng.uniform(0, 1, size=len(labels)))
        index = index_over_all(split)
        codes = rng.normal(size=(len(labels), 6))
        snapshot = LabeledCodes(indices=np.arange(len(labels)), labels=labels, codes=codes)
        batch = sample_hard_negative_batch(index, split, 128, snapshot, np.random.default_rng(5))
        a_idx, _, n_idx = batch.source_indices
        for a, n in zip(a_idx, n_idx):
            best, best_d = None, np.inf
            for j in range(len(labels)):  # exhaustive O(K) scan per anchor
                if labels[j] == labels[a]:
                    continue
                d = np.sqrt(np.sum((codes[a] - codes[j]) ** 2))
                if d < best_d:
                    best, best_d = j, d
            assert n == best

    def test_invariants_still_hold(self, tiny_split, tiny_index):
        embed_fn = lambda imgs: imgs.reshape(len(imgs), -1)[:, :4].astype(np.float64)
        batch = sample_hard_negative_batch(tiny_index, tiny_split, 32, embed_fn, np.random.default_rng(6))
        assert np.all(batch.anchor_class != batch.negative_class)

    def test_hard_negatives_closer_in_expectation(self, tiny_split, tiny_index):
        embed_fn = lambda imgs: imgs.reshape(len(imgs), -1).astype(np.float64)
        snapshot = compute_labeled_codes(embed_fn, tiny_split, tiny_index)
        flat = {idx: row for row, idx in enumerate(snapshot.indices)}

        def mean_negative_distance(sample_fn, seed):
            rng = np.random.default_rng(seed)
            total = 0.0
            for _ in range(10):
                batch = sample_fn(rng)
                a_idx, _, n_idx = batch.source_indices
                rows_a = np.array([flat[i] for i in a_idx])
                rows_n = np.array([flat[i] for i in n_idx])
                total += np.linalg.norm(snapshot.codes[rows_a] - snapshot.codes[rows_n], axis=1).sum()
            return total / 1000

        hard = mean_negative_distance(
            lambda rng: sample_hard_negative_batch(tiny_index, tiny_split, 100, snapshot, rng), 8
        )
        random = mean_negative_distance(lambda rng: sample_triplet_batch(tiny_index, tiny_split, 100, rng), 8)
        assert hard < random


class TestUnsupervisedBatches:
    def test_epoch_covers_every_index_once(self, tiny_split):
        seen = []
        for images, indices in unsupervised_batches(tiny_split, 16, np.random.default_rng(0)):
            assert len(images) == len(indices)
            seen.extend(indices)
        assert sorted(seen) == list(range(tiny_split.train_size))

    def test_fixed_seed_fixes_epoch_order(self, tiny_split):
        a = [idx for _, batch in unsupervised_batches(tiny_split, 16, np.random.default_rng(3)) for idx in batch]
        b = [idx for _, batch in unsupervised_batches(tiny_split, 16, np.random.default_rng(3)) for idx in batch]
        assert a == b

    def test_full_size_batch(self, tiny_split):
        batches = list(unsupervised_batches(tiny_split, tiny_split.train_size, np.random.default_rng(0)))
        assert len(batches) == 1
        assert len(batches[0][1]) == tiny_split.train_size

    def test_oversized_batch_rejected(self, tiny_split):
        with pytest.raises(ContractError):
            list(unsupervised_batches(tiny_split, tiny_split.train_size + 1, np.random.default_rng(0)))
