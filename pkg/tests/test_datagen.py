import struct

import numpy as np
import pytest

from fedwsq import datagen
from fedwsq.errors import ConfigError, FormatError


class TestSynth:
    def test_separable_blobs(self):
        data = datagen.synth_classification(2, 6, 50, 10.0, 0)
        # centroid classifier on well-separated blobs is perfect
        means = np.stack([data.features[data.labels == c].mean(axis=0) for c in range(2)])
        d = ((data.features[:, None, :] - means[None]) ** 2).sum(axis=2)
        assert np.array_equal(np.argmin(d, axis=1), data.labels)

    def test_empty_class(self):
        with pytest.raises(ConfigError):
            datagen.synth_classification(3, 4, 0, 1.0, 0)

    def test_deterministic(self):
        a = datagen.synth_classification(4, 5, 20, 2.0, 7)
        b = datagen.synth_classification(4, 5, 20, 2.0, 7)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)


class TestDirichletPartition:
    def test_exact_cover(self):
        data = datagen.synth_classification(5, 3, 40, 2.0, 1)
        part = datagen.dirichlet_partition(data.labels, 10, 0.5, 3)
        all_idx = np.concatenate(part.client_shards)
        assert all_idx.size == len(data)
        assert np.unique(all_idx).size == all_idx.size

    def test_single_client(self):
        labels = np.array([0, 1, 0, 1, 2])
        part = datagen.dirichlet_partition(labels, 1, 0.3, 0)
        assert np.array_equal(part.client_shards[0], np.arange(5))

    def test_large_alpha_is_near_uniform(self):
        data = datagen.synth_classification(4, 3, 200, 2.0, 2)
        part = datagen.dirichlet_partition(data.labels, 4, 1e6, 0)
        global_hist = np.bincount(data.labels, minlength=4) / len(data)
        for shard in part.client_shards:
            hist = np.bincount(data.labels[shard], minlength=4) / shard.size
            assert np.max(np.abs(hist - global_hist)) < 0.05

    def test_entropy_monotone_in_alpha(self):
        data = datagen.synth_classification(10, 3, 200, 2.0, 5)
        for seed in (0, 1, 2):
            ents = []
            for alpha in (0.1, 0.6, 10.0):
                part = datagen.dirichlet_partition(data.labels, 100, alpha, seed)
                ents.append(datagen.mean_client_entropy(data.labels, part, 10))
            assert ents[0] < ents[1] < ents[2]

    def test_too_many_clients(self):
        with pytest.raises(ConfigError):
            datagen.dirichlet_partition(np.array([0, 1]), 3, 0.5, 0)

    def test_bad_alpha(self):
        with pytest.raises(ConfigError):
            datagen.dirichlet_partition(np.zeros(10, dtype=int), 2, 0.0, 0)


class TestIidPartition:
    def test_low_tv_distance(self):
        data = datagen.synth_classification(5, 3, 500, 2.0, 3)
        part = datagen.iid_partition(len(data), 10, 0)
        global_hist = np.bincount(data.labels, minlength=5) / len(data)
        for shard in part.client_shards:
            assert shard.size >= 200
            hist = np.bincount(data.labels[shard], minlength=5) / shard.size
            assert 0.5 * np.abs(hist - global_hist).sum() < 0.1


def write_idx_pair(tmp_path, n=2, rows=3, cols=3, bad_magic=False, truncate=False, n_labels=None):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    magic = 0x00000777 if bad_magic else datagen.IDX_IMAGES_MAGIC
    pixels = bytes(range(n * rows * cols))
    data = struct.pack(">IIII", magic, n, rows, cols) + pixels
    if truncate:
        data = data[:-4]
    img.write_bytes(data)
    m = n_labels if n_labels is not None else n
    lab.write_bytes(struct.pack(">II", datagen.IDX_LABELS_MAGIC, m) + bytes(range(m)))
    return str(img), str(lab)


class TestLoadIdx:
    def test_two_images(self, tmp_path):
        img, lab = write_idx_pair(tmp_path)
        data = datagen.load_idx(img, lab)
        assert len(data) == 2
        assert data.features.shape == (2, 9)
        assert data.features.max() <= 1.0
        assert np.array_equal(data.labels, [0, 1])

    def test_bad_magic(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, bad_magic=True)
        with pytest.raises(FormatError, match="magic"):
            datagen.load_idx(img, lab)

    def test_truncated(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, truncate=True)
        with pytest.raises(FormatError, match="truncated"):
            datagen.load_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, n_labels=3)
        with pytest.raises(FormatError, match="count"):
            datagen.load_idx(img, lab)


class TestSplitHoldout:
    def test_counts_and_shared_task(self):
        data = datagen.synth_classification(4, 5, 30, 2.0, 0)
        train, test = datagen.split_holdout(data, 10)
        assert len(train) == 80 and len(test) == 40
        for c in range(4):
            assert (train.labels == c).sum() == 20
            assert (test.labels == c).sum() == 10
        # halves are disjoint rows of the same dataset
        joint = np.vstack([train.features, test.features])
        assert np.unique(joint, axis=0).shape[0] == len(data)

    def test_class_means_agree_across_split(self):
        data = datagen.synth_classification(3, 8, 400, 4.0, 1)
        train, test = datagen.split_holdout(data, 100)
        for c in range(3):
            mu_train = train.features[train.labels == c].mean(axis=0)
            mu_test = test.features[test.labels == c].mean(axis=0)
            assert np.linalg.norm(mu_train - mu_test) < 0.5

    def test_too_few_samples(self):
        data = datagen.synth_classification(2, 3, 5, 2.0, 0)
        with pytest.raises(ConfigError):
            datagen.split_holdout(data, 5)
