"""Representation quality: collapse diagnostic, weighted KNN and linear probe.

Both probes read the pooled backbone features of a frozen encoder. The
encoder argument may be a :class:`~siamlab.model.SiamModel`, a checkpoint
path, or any callable mapping a normalized image batch to features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import torch
import torch.nn.functional as F

from siamlab.errors import DegenerateInputError, InputError

PROTOCOLS = ("linear", "knn")


@dataclass
class EvalResult:
    protocol: str
    top1_accuracy: float
    n_test: int
    config_digest: str = ""
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise InputError(f"protocol must be one of {PROTOCOLS}")
        if not 0.0 <= self.top1_accuracy <= 1.0 or self.n_test <= 0:
            raise InputError("accuracy must lie in [0, 1] and n_test must be positive")


def append_result(path, result: EvalResult) -> None:
    """Append one JSON line to a results file."""
    with open(path, "a") as fh:
        fh.write(json.dumps(asdict(result), sort_keys=True) + "\n")


def collapse_metric(features: torch.Tensor) -> float:
    """Mean per-coordinate standard deviation of L2-normalized rows.

    Near ``1/sqrt(d)`` for a spread-out representation, ``0`` for a
    collapsed one. Uses the unbiased (n - 1) standard deviation.
    """
    if features.ndim != 2 or features.shape[0] < 2:
        raise InputError("collapse_metric needs a [B, d] matrix with B >= 2")
    norms = torch.linalg.vector_norm(features, dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateInputError("zero-norm feature row")
    z = features / norms
    return float(z.std(dim=0, unbiased=True).mean())


# --- feature extraction ----------------------------------------------------

Encoder = Union[torch.nn.Module, Callable, str, Path]


def _resolve_encoder(encoder: Encoder) -> Callable:
    if isinstance(encoder, (str, Path)):
        from siamlab.checkpoint import load_checkpoint

        encoder = load_checkpoint(encoder).model
    if isinstance(encoder, torch.nn.Module):
        model = encoder
        model.eval()
        dtype = next(model.parameters()).dtype
        fn = model.features if hasattr(model, "features") else model
        return lambda x: fn(x.to(dtype))
    if callable(encoder):
        return encoder
    raise InputError(f"cannot use {type(encoder).__name__} as an encoder")


def eval_view(images: torch.Tensor, size: Optional[int]) -> torch.Tensor:
    """Deterministic evaluation view: the full image resized to ``size``."""
    from siamlab.augment import TransformDescriptor, apply_batch

    size = size or images.shape[-1]
    if size == images.shape[-1] == images.shape[-2]:
        return images
    full = TransformDescriptor((("crop", {"top": 0.0, "left": 0.0, "height": 1.0, "width": 1.0}),))
    return apply_batch([full] * len(images), images, size)


@torch.no_grad()
def extract_features(encoder: Encoder, dataset, crop_size=None, batch_size: int = 500, views=None) -> torch.Tensor:
    """Features of every image (or of the given pre-augmented ``views``)."""
    fn = _resolve_encoder(encoder)
    images = views if views is not None else eval_view(dataset.images, crop_size)
    chunks = [fn(dataset.normalize(images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
    return torch.cat(chunks).detach().double()


def _check_labels(train, test):
    if train.labels is None or test.labels is None:
        raise InputError("evaluation needs labeled train and test splits")
    extra = set(torch.unique(test.labels).tolist()) - set(torch.unique(train.labels).tolist())
    if extra:
        raise InputError(f"test labels {sorted(extra)} do not occur in the train split")


# --- KNN -------------------------------------------------------------------


def knn_predict(train_feats, train_labels, test_feats, k: int, temperature: float, n_classes: Optional[int] = None, chunk: int = 1024):
    """Weighted KNN vote: top-``k`` cosine neighbors weighted by ``exp(sim / T)``."""
    if k < 1:
        raise InputError("k must be >= 1")
    if k > len(train_feats):
        raise InputError(f"k={k} exceeds the train set size {len(train_feats)}")
    n_classes = n_classes or int(train_labels.max()) + 1
    tr = F.normalize(train_feats.double(), dim=1)
    te = F.normalize(test_feats.double(), dim=1)
    preds = []
    for i in range(0, len(te), chunk):
        sim = te[i : i + chunk] @ tr.T
        top_sim, top_idx = sim.topk(k, dim=1)
        weights = (top_sim / temperature).exp()
        votes = torch.zeros(len(sim), n_classes, dtype=torch.float64)
        votes.scatter_add_(1, train_labels[top_idx], weights)
        preds.append(votes.argmax(dim=1))
    return torch.cat(preds)


def default_knn_k(n_train: int) -> int:
    return max(1, min(200, n_train // 10))


def knn_eval(
    encoder: Encoder,
    labeled_train,
    labeled_test,
    k: Optional[int] = None,
    temperature: float = 0.1,
    crop_size: Optional[int] = None,
    config_digest: str = "",
) -> EvalResult:
    """Top-1 accuracy of a weighted KNN classifier on frozen features."""
    _check_labels(labeled_train, labeled_test)
    k = default_knn_k(len(labeled_train)) if k is None else k
    if k > len(labeled_train):
        raise InputError(f"k={k} exceeds the train set size {len(labeled_train)}")
    tr = extract_features(encoder, labeled_train, crop_size)
    te = extract_features(encoder, labeled_test, crop_size)
    pred = knn_predict(tr, labeled_train.labels, te, k, temperature, labeled_train.n_classes)
    acc = float((pred == labeled_test.labels).double().mean())
    return EvalResult("knn", acc, len(labeled_test), config_digest, {"k": k, "temperature": temperature})


# --- linear probe ----------------------------------------------------------


def fit_linear_probe(
    train_feats,
    train_labels,
    test_feats,
    test_labels,
    epochs: int = 30,
    base_lr: float = 0.1,
    batch_size: int = 256,
    momentum: float = 0.9,
    seed: int = 0,
    n_classes: Optional[int] = None,
    train_feats_per_epoch: Optional[Callable[[int], torch.Tensor]] = None,
) -> float:
    """Train one linear layer with SGD and a cosine schedule; return test top-1.

    Features are standardized with the train-split mean and deviation.
    ``train_feats_per_epoch(epoch)`` may supply freshly augmented train
    features for every epoch.
    """
    from siamlab.augment import derive_rng
    from siamlab.trainer import scaled_lr

    n_classes = n_classes or int(train_labels.max()) + 1
    mean = train_feats.mean(dim=0)
    std = train_feats.std(dim=0).clamp_min(1e-8)
    g = torch.Generator().manual_seed(seed)
    clf = torch.nn.Linear(train_feats.shape[1], n_classes, dtype=torch.float64)
    with torch.no_grad():
        bound = 1.0 / math.sqrt(train_feats.shape[1])
        clf.weight.uniform_(-bound, bound, generator=g)
        clf.bias.zero_()
    opt = torch.optim.SGD(clf.parameters(), lr=scaled_lr(base_lr, batch_size), momentum=momentum)
    n = len(train_feats)
    spe = -(-n // batch_size)
    total = epochs * spe
    peak = scaled_lr(base_lr, batch_size)
    step = 0
    for epoch in range(epochs):
        feats = train_feats_per_epoch(epoch) if train_feats_per_epoch else train_feats
        z = (feats - mean) / std
        order = torch.as_tensor(derive_rng(seed, 0x11E, epoch).permutation(n))
        for b in range(spe):
            idx = order[b * batch_size : (b + 1) * batch_size]
            for group in opt.param_groups:
                group["lr"] = peak * 0.5 * (1.0 + math.cos(math.pi * step / total))
            loss = F.cross_entropy(clf(z[idx]), train_labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    with torch.no_grad():
        pred = clf((test_feats - mean) / std).argmax(dim=1)
    return float((pred == test_labels).double().mean())


def linear_eval(
    encoder: Encoder,
    labeled_train,
    labeled_test,
    epochs: int = 30,
    base_lr: float = 0.1,
    batch_size: int = 256,
    augment: bool = True,
    crop_size: Optional[int] = None,
    seed: int = 0,
    config_digest: str = "",
) -> EvalResult:
    """Linear-probe accuracy of a frozen encoder.

    With ``augment`` the train features are recomputed every epoch from
    random-crop + flip views; the test split always uses the deterministic
    evaluation view.
    """
    from siamlab.augment import generate_views, linear_eval_augmentation

    _check_labels(labeled_train, labeled_test)
    fn = _resolve_encoder(encoder)
    tr = extract_features(fn, labeled_train, crop_size)
    te = extract_features(fn, labeled_test, crop_size)
    per_epoch = None
    if augment:
        cfg = linear_eval_augmentation(crop_size or labeled_train.image_size)

        def per_epoch(epoch):
            feats = []
            for i in range(0, len(labeled_train), 500):
                batch = labeled_train.images[i : i + 500]
                views = generate_views(batch, 1, cfg, seed=seed, source_ids=range(i, i + len(batch)), stream=epoch)
                feats.append(extract_features(fn, labeled_train, views=views.views[0]))
            return torch.cat(feats)

    acc = fit_linear_probe(
        tr,
        labeled_train.labels,
        te,
        labeled_test.labels,
        epochs=epochs,
        base_lr=base_lr,
        batch_size=batch_size,
        seed=seed,
        n_classes=labeled_train.n_classes,
        train_feats_per_epoch=per_epoch,
    )
    settings = {"epochs": epochs, "base_lr": base_lr, "batch_size": batch_size, "augment": augment}
    return EvalResult("linear", acc, len(labeled_test), config_digest, settings)
