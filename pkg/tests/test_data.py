import pickle

import numpy as np
import pytest
import torch

from siamlab.data import (
    ImageDataset,
    channel_stats,
    image_hashes,
    load_image_dataset,
    render_synthetic_image,
    synthetic_dataset,
)
from siamlab.errors import IngestionError, InputError, IntegrityError


@pytest.fixture(scope="module")
def synthetic():
    return synthetic_dataset(10, 500, 32, 0)


def _ridge_probe_accuracy(train, test, lam=10.0):
    # one-vs-all ridge regression on raw pixels, solved in closed form
    X = train.images.reshape(len(train), -1).double().numpy()
    Xt = test.images.reshape(len(test), -1).double().numpy()
    mu = X.mean(0)
    X, Xt = X - mu, Xt - mu
    Y = np.eye(train.n_classes)[train.labels.numpy()]
    W = np.linalg.solve(X.T @ X + lam * np.eye(X.shape[1]), X.T @ (Y - Y.mean(0)))
    return float(((Xt @ W).argmax(1) == test.labels.numpy()).mean())


class TestSynthetic:
    def test_sizes_and_balance(self, synthetic):
        train, test = synthetic
        assert len(train) == 4000 and len(test) == 1000
        assert train.images.shape[1:] == (3, 32, 32)
        np.testing.assert_array_equal(torch.bincount(train.labels).numpy(), np.full(10, 400))
        np.testing.assert_array_equal(torch.bincount(test.labels).numpy(), np.full(10, 100))
        assert float(train.images.min()) >= 0.0 and float(train.images.max()) <= 1.0

    def test_deterministic(self, synthetic):
        train, test = synthetic_dataset(10, 500, 32, 0)
        assert train.images.numpy().tobytes() == synthetic[0].images.numpy().tobytes()
        assert torch.equal(test.labels, synthetic[1].labels)

    def test_seed_changes_images(self):
        a, _ = synthetic_dataset(2, 5, 16, 0)
        b, _ = synthetic_dataset(2, 5, 16, 1)
        assert not torch.equal(a.images, b.images)

    def test_splits_disjoint(self, synthetic):
        train, test = synthetic
        assert not image_hashes(train) & image_hashes(test)

    def test_raw_pixel_probe_in_band(self, synthetic):
        acc = _ridge_probe_accuracy(*synthetic)
        assert 0.1 < acc < 0.9

    def test_normalization_constants_from_train(self, synthetic):
        train, test = synthetic
        mean, std = channel_stats(train.images)
        assert train.mean == test.mean == mean
        z = train.normalize(train.images)
        np.testing.assert_allclose(z.mean(dim=(0, 2, 3)).numpy(), 0.0, atol=1e-4)
        np.testing.assert_allclose(z.std(dim=(0, 2, 3)).numpy(), 1.0, atol=1e-4)

    def test_hue_band_separates_classes(self):
        # labels 0 and 5 share a shape and differ only in hue band
        rng = np.random.default_rng(0)
        a = render_synthetic_image(0, rng, 32)
        b = render_synthetic_image(5, rng, 32)
        assert a.shape == b.shape == (3, 32, 32)

    @pytest.mark.parametrize("kwargs", [{"n_classes": 1}, {"image_size": 8}, {"n_classes": 11}, {"n_per_class": 2}])
    def test_invalid(self, kwargs):
        args = {"n_classes": 10, "n_per_class": 10, "image_size": 16, "seed": 0, **kwargs}
        with pytest.raises(InputError):
            synthetic_dataset(**args)


class TestImageDataset:
    def test_labels_must_be_contiguous(self):
        with pytest.raises(InputError):
            ImageDataset(torch.rand(3, 3, 4, 4), torch.tensor([0, 2, 2]), "train", "x")

    def test_bad_split(self):
        with pytest.raises(InputError):
            ImageDataset(torch.rand(3, 3, 4, 4), None, "val", "x")


def _write_cifar10(root, n=4, seed=0):
    rng = np.random.default_rng(seed)
    base = root / "cifar-10-batches-py"
    base.mkdir(parents=True)
    arrays = {}
    for k, name in enumerate([f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]):
        data = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
        # cycle through the labels so every class occurs in the train batches
        labels = [(k * n + j) % 10 for j in range(n)]
        arrays[name] = (data, labels)
        with open(base / name, "wb") as fh:
            pickle.dump({"data": data, "labels": labels}, fh)
    return arrays


class TestLoaders:
    def test_empty_directory(self, tmp_path):
        with pytest.raises(IngestionError):
            load_image_dataset(tmp_path, "cifar10")

    def test_missing_root(self, tmp_path):
        with pytest.raises(IngestionError):
            load_image_dataset(tmp_path / "nope", "cifar10")

    def test_unknown_name(self, tmp_path):
        with pytest.raises(InputError):
            load_image_dataset(tmp_path, "mnist")

    def test_cifar10_layout(self, tmp_path):
        arrays = _write_cifar10(tmp_path)
        train, test = load_image_dataset(tmp_path, "cifar10", verify=False)
        assert len(train) == 20 and len(test) == 4
        first = arrays["data_batch_1"][0][0].reshape(3, 32, 32)
        np.testing.assert_array_equal((train.images[0] * 255).round().numpy().astype(np.uint8), first)
        again, _ = load_image_dataset(tmp_path, "cifar10", verify=False)
        assert torch.equal(train.images, again.images)

    def test_cifar_checksum_mismatch(self, tmp_path):
        _write_cifar10(tmp_path)
        with pytest.raises(IntegrityError):
            load_image_dataset(tmp_path, "cifar10", verify=True)

    def test_corrupt_pickle_names_file(self, tmp_path):
        _write_cifar10(tmp_path)
        bad = tmp_path / "cifar-10-batches-py" / "data_batch_3"
        bad.write_bytes(bad.read_bytes()[:50])
        with pytest.raises(IngestionError, match="data_batch_3"):
            load_image_dataset(tmp_path, "cifar10", verify=False)

    def test_stl10_column_major(self, tmp_path):
        rng = np.random.default_rng(1)
        base = tmp_path / "stl10_binary"
        base.mkdir()
        imgs = {}
        for split in ("train", "test"):
            x = rng.integers(0, 256, (2, 3, 96, 96), dtype=np.uint8)
            imgs[split] = x
            np.ascontiguousarray(x.transpose(0, 1, 3, 2)).tofile(base / f"{split}_X.bin")
            np.array([1, 2], dtype=np.uint8).tofile(base / f"{split}_y.bin")
        train, test = load_image_dataset(tmp_path, "stl10")
        np.testing.assert_array_equal((train.images * 255).round().numpy().astype(np.uint8), imgs["train"])
        np.testing.assert_array_equal(train.labels.numpy(), [0, 1])

    def test_imagefolder(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(2)
        for split in ("train", "test"):
            for cls in ("cat", "dog"):
                d = tmp_path / split / cls
                d.mkdir(parents=True)
                for i in range(2):
                    Image.fromarray(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(d / f"{i}.png")
        train, test = load_image_dataset(tmp_path, "imagefolder")
        assert train.images.shape == (4, 3, 8, 8)
        np.testing.assert_array_equal(train.labels.numpy(), [0, 0, 1, 1])
        assert "mean=" in train.provenance

    def test_imagefolder_corrupt_image(self, tmp_path):
        for split in ("train", "test"):
            d = tmp_path / split / "a"
            d.mkdir(parents=True)
            (d / "x.png").write_bytes(b"not a png")
        with pytest.raises(IngestionError, match="x.png"):
            load_image_dataset(tmp_path, "imagefolder")
