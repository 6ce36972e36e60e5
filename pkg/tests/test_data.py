import struct

import numpy as np
import pytest

from hetscale.data import (DatasetConfig, channel_stats, epoch_order, load_dataset, read_cifar_batch,
                           read_idx, synthetic_blobs, train_batches, write_idx)


def _write_mnist_like(root, n_train=12, n_eval=6, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    write_idx(root / "train-images-idx3-ubyte", rng.integers(0, 256, (n_train, 28, 28)))
    write_idx(root / "train-labels-idx1-ubyte", rng.integers(0, classes, n_train))
    write_idx(root / "t10k-images-idx3-ubyte", rng.integers(0, 256, (n_eval, 28, 28)))
    write_idx(root / "t10k-labels-idx1-ubyte", rng.integers(0, classes, n_eval))


class TestIdx:
    def test_header_layout(self, tmp_path):
        arr = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
        write_idx(tmp_path / "x", arr)
        raw = (tmp_path / "x").read_bytes()
        assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 28, 28)
        np.testing.assert_array_equal(read_idx(tmp_path / "x"), arr)

    def test_bad_magic_and_length(self, tmp_path):
        (tmp_path / "m").write_bytes(struct.pack(">II", 0x802, 1) + b"\x00")
        with pytest.raises(ValueError, match="magic"):
            read_idx(tmp_path / "m")
        (tmp_path / "t").write_bytes(struct.pack(">II", 0x801, 5) + b"\x00" * 4)
        with pytest.raises(ValueError):
            read_idx(tmp_path / "t")

    def test_load_directory(self, tmp_path):
        _write_mnist_like(tmp_path)
        ds = load_dataset(DatasetConfig(name="idx", path=str(tmp_path)))
        assert ds.train.images.shape == (12, 1, 28, 28) and ds.eval.images.shape == (6, 1, 28, 28)
        assert ds.train.images.dtype == np.float32

    def test_label_out_of_range(self, tmp_path):
        _write_mnist_like(tmp_path, classes=10)
        with pytest.raises(ValueError, match="labels"):
            load_dataset(DatasetConfig(name="idx", path=str(tmp_path), num_classes=3))


class TestCifar:
    def test_records(self, tmp_path):
        rng = np.random.default_rng(0)
        rec = rng.integers(0, 256, size=(4, 3073)).astype(np.uint8)
        rec[:, 0] = [3, 1, 4, 1]
        (tmp_path / "b.bin").write_bytes(rec.tobytes())
        images, labels = read_cifar_batch(tmp_path / "b.bin")
        assert images.shape == (4, 3, 32, 32)
        np.testing.assert_array_equal(labels, [3, 1, 4, 1])
        np.testing.assert_array_equal(images[2].reshape(-1), rec[2, 1:])

    def test_partial_record_rejected(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"\x00" * (3073 * 2 + 5))
        with pytest.raises(ValueError, match="3073"):
            read_cifar_batch(tmp_path / "b.bin")

    def test_load_directory(self, tmp_path):
        rec = np.zeros((5, 3073), dtype=np.uint8)
        rec[:, 1:] = np.arange(3072) % 251
        for name in ("data_batch_1.bin", "data_batch_2.bin", "test_batch.bin"):
            (tmp_path / name).write_bytes(rec.tobytes())
        ds = load_dataset(DatasetConfig(name="cifar", path=str(tmp_path), image_size=32, channels=3))
        assert len(ds.train) == 10 and len(ds.eval) == 5


class TestSynthetic:
    def test_bitwise_deterministic(self):
        a = load_dataset(DatasetConfig(seed=7, num_train=64, num_eval=32))
        b = load_dataset(DatasetConfig(seed=7, num_train=64, num_eval=32))
        np.testing.assert_array_equal(a.train.images, b.train.images)
        np.testing.assert_array_equal(a.eval.labels, b.eval.labels)
        c = load_dataset(DatasetConfig(seed=8, num_train=64, num_eval=32))
        assert not np.array_equal(a.train.images, c.train.images)

    def test_train_and_eval_differ(self):
        tr = synthetic_blobs(16, 10, 14, 1, seed=0, offset=0)[0]
        ev = synthetic_blobs(16, 10, 14, 1, seed=0, offset=1)[0]
        assert not np.array_equal(tr, ev)

    def test_classes_are_separable_by_prototype(self):
        """Nearest class-mean classification on clean samples beats chance by far."""
        x, y = synthetic_blobs(600, 10, 14, 1, seed=0, noise=0.0)
        flat = x.reshape(len(x), -1)
        means = np.stack([flat[y == k].mean(0) for k in range(10)])
        pred = np.argmin(((flat[:, None] - means[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == y) > 0.5

    def test_normalization_from_train_split(self):
        ds = load_dataset(DatasetConfig(num_train=256, num_eval=64, image_size=14))
        mean, std = channel_stats(ds.train.images)
        np.testing.assert_allclose(mean, 0.0, atol=1e-5)
        np.testing.assert_allclose(std, 1.0, atol=1e-4)


class TestBatching:
    def test_shuffle_is_a_function_of_seed_and_epoch(self):
        assert np.array_equal(epoch_order(50, 1, 3), epoch_order(50, 1, 3))
        assert not np.array_equal(epoch_order(50, 1, 3), epoch_order(50, 1, 4))
        assert sorted(epoch_order(50, 1, 3)) == list(range(50))

    def test_batches_cover_epoch_and_drop_tail(self):
        ds = load_dataset(DatasetConfig(num_train=70, num_eval=10))
        batches = list(train_batches(ds.train, 16, seed=0, epoch=0))
        assert len(batches) == 4 and all(b[0].shape[0] == 16 for b in batches)

    def test_flip_mirrors_width_axis(self):
        ds = load_dataset(DatasetConfig(num_train=64, num_eval=8))
        plain = list(train_batches(ds.train, 64, 0, 0))[0][0]
        flipped = list(train_batches(ds.train, 64, 0, 0, hflip=True))[0][0]
        changed = [k for k in range(64) if not np.array_equal(plain[k], flipped[k])]
        assert 0 < len(changed) < 64
        for k in changed:
            np.testing.assert_array_equal(flipped[k], plain[k][..., ::-1])

    def test_config_errors(self):
        with pytest.raises(ValueError):
            DatasetConfig(name="imagenet")
        with pytest.raises(ValueError):
            DatasetConfig(name="idx")
        with pytest.raises(FileNotFoundError):
            load_dataset(DatasetConfig(name="idx", path="/nonexistent/dir"))
