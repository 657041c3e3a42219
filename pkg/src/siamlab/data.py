"""Datasets: a seeded synthetic shape/hue dataset and loaders for standard layouts.

Images are stored as float32 tensors ``[N, C, H, W]`` in ``[0, 1]``. The
per-channel normalization constants live on the dataset and are applied by
consumers through :meth:`ImageDataset.normalize`.
"""

from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from siamlab.errors import IngestionError, InputError, IntegrityError

SPLITS = ("train", "test")


@dataclass
class ImageDataset:
    images: torch.Tensor
    labels: Optional[torch.Tensor]
    split: str
    provenance: str
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InputError(f"split must be one of {SPLITS}")
        if self.images.ndim != 4:
            raise InputError("images must be an [N, C, H, W] tensor")
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise InputError("labels and images differ in length")
            present = torch.unique(self.labels)
            if len(present) and not torch.equal(present, torch.arange(int(present.max()) + 1)):
                raise InputError("labels must cover a contiguous range starting at 0")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.mean, dtype=x.dtype).reshape(1, -1, 1, 1)
        std = torch.as_tensor(self.std, dtype=x.dtype).reshape(1, -1, 1, 1)
        return (x - mean) / std


def channel_stats(images: torch.Tensor) -> tuple[tuple, tuple]:
    x = images.double()
    mean = x.mean(dim=(0, 2, 3))
    std = x.std(dim=(0, 2, 3))
    return tuple(round(float(v), 6) for v in mean), tuple(round(float(v), 6) for v in std)


def image_hashes(dataset: ImageDataset) -> set[str]:
    return {hashlib.sha1(img.numpy().tobytes()).hexdigest() for img in dataset.images}


# --- synthetic -------------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "cross", "ring")
# two hue bands; each class is one (shape, band) pair
_HUE_BANDS = ((0.95, 0.20), (0.45, 0.20))


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, soft: float) -> np.ndarray:
    # u, v are the pixel grid in the shape's local frame, unit radius
    if shape == "disk":
        d = np.sqrt(u**2 + v**2) - 1.0
    elif shape == "square":
        d = np.maximum(np.abs(u), np.abs(v)) - 0.8
    elif shape == "triangle":
        d = np.maximum.reduce([-v - 0.5, 0.866 * u + 0.5 * v - 0.5, -0.866 * u + 0.5 * v - 0.5]) * 1.4
    elif shape == "cross":
        arm = np.minimum(np.maximum(np.abs(u) - 1.0, np.abs(v) - 0.3), np.maximum(np.abs(u) - 0.3, np.abs(v) - 1.0))
        d = arm
    elif shape == "ring":
        d = np.abs(np.sqrt(u**2 + v**2) - 0.75) - 0.25
    else:
        raise InputError(f"unknown shape {shape!r}")
    return np.clip(0.5 - d / soft, 0.0, 1.0)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    # gray texture: random level plus a few oriented cosine gratings
    yy, xx = np.mgrid[0:size, 0:size] / size
    acc = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(-6.0, 6.0, size=2)
        acc += np.cos(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    level = rng.uniform(0.3, 0.7) + 0.04 * acc
    return np.repeat(level[None], 3, axis=0)


def render_synthetic_image(label: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Draw one ``[3, size, size]`` image of class ``label``."""
    shape = SHAPES[label % len(SHAPES)]
    center, width = _HUE_BANDS[(label // len(SHAPES)) % len(_HUE_BANDS)]
    img = _background(rng, size)
    scale = rng.uniform(0.22, 0.38) * size
    cx, cy = rng.uniform(scale * 0.8, size - scale * 0.8, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u, v = (xx - cx) / scale, (yy - cy) / scale
    mask = _shape_mask(shape, u, v, soft=1.5 / scale)
    hue = (center + rng.uniform(-width / 2, width / 2)) % 1.0
    color = np.asarray(_hsv_to_rgb(hue, rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0)))
    img = img * (1 - mask) + color[:, None, None] * mask
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(n_classes: int = 10, n_per_class: int = 500, image_size: int = 32, seed: int = 0):
    """Balanced procedural dataset, split 80/20 per class into train and test.

    Class identity is the (shape, hue band) pair; position, scale, hue
    within the band, saturation, value, background texture and pixel noise
    vary within a class.
    Returns ``(train, test)``.
    """
    if n_classes < 2:
        raise InputError("n_classes must be >= 2")
    if image_size < 16:
        raise InputError("image_size must be >= 16")
    if n_classes > len(SHAPES) * len(_HUE_BANDS):
        raise InputError(f"at most {len(SHAPES) * len(_HUE_BANDS)} synthetic classes are available")
    if n_per_class < 5:
        raise InputError("n_per_class must be >= 5 for an 80/20 split")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5157,)))
    n_train = int(round(0.8 * n_per_class))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for label in range(n_classes):
        for i in range(n_per_class):
            img = render_synthetic_image(label, rng, image_size)
            (tr_x if i < n_train else te_x).append(img)
            (tr_y if i < n_train else te_y).append(label)
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5158,)))
    order_tr = perm.permutation(len(tr_x))
    order_te = perm.permutation(len(te_x))
    train_x = torch.as_tensor(np.stack(tr_x)[order_tr], dtype=torch.float32)
    test_x = torch.as_tensor(np.stack(te_x)[order_te], dtype=torch.float32)
    mean, std = channel_stats(train_x)
    prov = f"synthetic(n_classes={n_classes}, n_per_class={n_per_class}, image_size={image_size}, seed={seed})"
    train = ImageDataset(train_x, torch.as_tensor(np.asarray(tr_y)[order_tr]), "train", prov, mean, std)
    test = ImageDataset(test_x, torch.as_tensor(np.asarray(te_y)[order_te]), "test", prov, mean, std)
    return train, test


# --- on-disk datasets ------------------------------------------------------

# md5 of the extracted python-pickle batches as published
CIFAR10_MD5 = {
    "data_batch_1": "c99cafc152244af753f735de768cd75f",
    "data_batch_2": "d4bba439e000b95fd0a9bffe97cbabec",
    "data_batch_3": "54ebc095f3ab1f0389bbae665268c751",
    "data_batch_4": "634d18415352ddfa80567beed471001a",
    "data_batch_5": "482c414d41f54cd18b22e5b47cb7c3cb",
    "test_batch": "40351d587109b95175f43aff81a1287e",
}
CIFAR100_MD5 = {
    "train": "16019d7e3df5f24257cddd939b257f8d",
    "test": "f0ef6b0ae62326f3e7ffdfab6717acfc",
}
DATASET_NAMES = ("cifar10", "cifar100", "stl10", "tiny_imagenet", "imagefolder")


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path) -> Path:
    if not path.is_file():
        raise IngestionError(f"missing dataset file: {path}")
    return path


def _unpickle(path: Path) -> dict:
    try:
        with open(_require(path), "rb") as fh:
            return pickle.load(fh, encoding="latin1")
    except (pickle.UnpicklingError, EOFError, ValueError) as exc:
        raise IngestionError(f"corrupt dataset file {path}: {exc}") from exc


def _verify(path: Path, expected: Optional[str]) -> None:
    if expected is not None and _md5(path) != expected:
        raise IntegrityError(f"checksum mismatch for {path}")


def _to_tensor_u8(arr: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(arr, dtype=torch.uint8).float().div_(255.0)


def _load_cifar(root: Path, name: str, verify: bool):
    if name == "cifar10":
        base = root / "cifar-10-batches-py"
        train_files = [f"data_batch_{i}" for i in range(1, 6)]
        test_files, table, key = ["test_batch"], CIFAR10_MD5, "labels"
    else:
        base = root / "cifar-100-python"
        train_files, test_files, table, key = ["train"], ["test"], CIFAR100_MD5, "fine_labels"

    def read(files):
        xs, ys = [], []
        for fname in files:
            path = _require(base / fname)
            if verify:
                _verify(path, table.get(fname))
            entry = _unpickle(path)
            try:
                xs.append(np.asarray(entry["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
                ys.append(np.asarray(entry[key], dtype=np.int64))
            except (KeyError, ValueError) as exc:
                raise IngestionError(f"corrupt dataset file {path}: {exc}") from exc
        return _to_tensor_u8(np.concatenate(xs)), torch.as_tensor(np.concatenate(ys))

    return read(train_files), read(test_files)


def _load_stl10(root: Path):
    base = root / "stl10_binary"

    def read(split):
        xp, yp = _require(base / f"{split}_X.bin"), _require(base / f"{split}_y.bin")
        raw = np.fromfile(xp, dtype=np.uint8)
        if raw.size % (3 * 96 * 96):
            raise IngestionError(f"corrupt dataset file {xp}: size {raw.size} is not a whole number of images")
        # stored column-major per channel
        x = raw.reshape(-1, 3, 96, 96).transpose(0, 1, 3, 2)
        y = np.fromfile(yp, dtype=np.uint8).astype(np.int64) - 1
        if len(y) != len(x):
            raise IngestionError(f"corrupt dataset file {yp}: {len(y)} labels for {len(x)} images")
        return _to_tensor_u8(np.ascontiguousarray(x)), torch.as_tensor(y)

    return read("train"), read("test")


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"corrupt image file {path}: {exc}") from exc


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}


def _stack(images: list[np.ndarray], where: Path) -> torch.Tensor:
    if not images:
        raise IngestionError(f"no images found under {where}")
    if len({im.shape for im in images}) != 1:
        raise IngestionError(f"images under {where} do not share one size")
    return _to_tensor_u8(np.stack(images))


def _load_imagefolder(root: Path):
    classes = sorted(p.name for p in (root / "train").iterdir() if p.is_dir()) if (root / "train").is_dir() else []
    if not classes:
        raise IngestionError(f"no class folders under {root / 'train'}")

    def read(split):
        xs, ys = [], []
        split_dir = root / split
        if not split_dir.is_dir():
            raise IngestionError(f"missing split folder {split_dir}")
        present = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
        if set(present) - set(classes):
            raise InputError(f"class folders of {split_dir} differ from the train split")
        for label, cls in enumerate(classes):
            for f in sorted((split_dir / cls).glob("*")):
                if f.suffix.lower() in _IMAGE_SUFFIXES:
                    xs.append(_read_image(f))
                    ys.append(label)
        return _stack(xs, split_dir), torch.as_tensor(ys, dtype=torch.int64)

    return read("train"), read("test")


def _load_tiny_imagenet(root: Path):
    base = root / "tiny-imagenet-200" if (root / "tiny-imagenet-200").is_dir() else root
    wnids = _require(base / "wnids.txt").read_text().split()
    index = {w: i for i, w in enumerate(wnids)}
    xs, ys = [], []
    for w in wnids:
        for f in sorted((base / "train" / w / "images").glob("*")):
            if f.suffix.lower() in _IMAGE_SUFFIXES:
                xs.append(_read_image(f))
                ys.append(index[w])
    train = (_stack(xs, base / "train"), torch.as_tensor(ys, dtype=torch.int64))
    xs, ys = [], []
    for line in _require(base / "val" / "val_annotations.txt").read_text().splitlines():
        parts = line.split("\t")
        if len(parts) < 2:
            continue
        if parts[1] not in index:
            raise InputError(f"validation label {parts[1]!r} is not in wnids.txt")
        xs.append(_read_image(_require(base / "val" / "images" / parts[0])))
        ys.append(index[parts[1]])
    test = (_stack(xs, base / "val"), torch.as_tensor(ys, dtype=torch.int64))
    return train, test


def load_image_dataset(root_path, name: str, verify: bool = True):
    """Read a dataset stored in its published on-disk layout.

    Supported names: ``cifar10`` / ``cifar100`` (python pickle batches),
    ``stl10`` (binary), ``tiny_imagenet`` and ``imagefolder``
    (``train/<class>/*``, ``test/<class>/*``). Checksums are verified for the
    CIFAR batches when ``verify`` is true. Returns ``(train, test)`` with the
    train-split channel statistics recorded on both.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    if name in ("cifar10", "cifar100"):
        (trx, try_), (tex, tey) = _load_cifar(root, name, verify)
    elif name == "stl10":
        (trx, try_), (tex, tey) = _load_stl10(root)
    elif name == "tiny_imagenet":
        (trx, try_), (tex, tey) = _load_tiny_imagenet(root)
    elif name == "imagefolder":
        (trx, try_), (tex, tey) = _load_imagefolder(root)
    else:
        raise InputError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    if trx.shape[1:] != tex.shape[1:]:
        raise IngestionError("train and test images differ in shape")
    if set(torch.unique(tey).tolist()) - set(torch.unique(try_).tolist()):
        raise InputError("test split contains labels absent from the train split")
    mean, std = channel_stats(trx)
    prov = f"{name}@{root} mean={list(mean)} std={list(std)}"
    return (
        ImageDataset(trx, try_, "train", prov, mean, std),
        ImageDataset(tex, tey, "test", prov, mean, std),
    )
