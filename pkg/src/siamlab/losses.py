"""SimSiam, SimSiam K-aug and EnSiam objectives.

All three compare a student feature ``g_k`` against a stop-gradient teacher
target with the negative cosine distance. They differ only in the target:

* SimSiam / K-aug: the projected feature of the paired view ``f_{N(k)}``.
* EnSiam: the within-step ensemble ``f_bar = mean_k f_k``.

Reductions over views go through :func:`ordered_mean`, which sorts before a
pairwise-tree sum. That makes the result bitwise independent of view order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from siamlab.errors import InputError
from siamlab.model import cosine_distance, stop_gradient

METHODS = ("simsiam", "simsiam_kaug", "ensiam")


@dataclass
class LossOutput:
    total: torch.Tensor
    per_view_terms: list = field(default_factory=list)
    method: str = "simsiam"

    def terms_as_floats(self) -> list[float]:
        return [float(t.detach()) for t in self.per_view_terms]


def neighbor_index(k: int) -> int:
    """1-based index of the view paired with view ``k``: 1<->2, 3<->4, ...

    Closed form ``2*ceil(k/2) - 1 + (k mod 2)``.
    """
    if int(k) != k or k < 1:
        raise InputError(f"view index must be a positive integer, got {k}")
    k = int(k)
    return 2 * ((k + 1) // 2) - 1 + (k % 2)


def _tree_sum(x: torch.Tensor) -> torch.Tensor:
    # pairwise reduction along dim 0, left to right
    while x.shape[0] > 1:
        n = x.shape[0]
        head = x[: n - n % 2].reshape(n // 2, 2, *x.shape[1:])
        paired = head[:, 0] + head[:, 1]
        x = torch.cat([paired, x[n - 1 :]]) if n % 2 else paired
    return x[0]


def ordered_mean(stacked: torch.Tensor) -> torch.Tensor:
    """Mean along dim 0, invariant to the order of the slices bit for bit."""
    if stacked.shape[0] == 0:
        raise InputError("cannot average an empty collection")
    values, _ = torch.sort(stacked, dim=0)
    return _tree_sum(values) / stacked.shape[0]


def _check_aligned(gs, fs):
    if len(gs) != len(fs):
        raise InputError(f"got {len(gs)} student and {len(fs)} teacher views")
    if not gs:
        raise InputError("need at least one view")
    shape = gs[0].shape
    for t in list(gs) + list(fs):
        if t.shape != shape:
            raise InputError(f"feature shapes disagree: {tuple(t.shape)} vs {tuple(shape)}")


def simsiam_loss(g1, g2, f1, f2) -> LossOutput:
    """``0.5 * (D(g1, sg(f2)) + D(g2, sg(f1)))``."""
    _check_aligned([g1, g2], [f1, f2])
    d1 = cosine_distance(g1, stop_gradient(f2))
    d2 = cosine_distance(g2, stop_gradient(f1))
    total = ordered_mean(torch.stack([d1, d2]))
    return LossOutput(total=total, per_view_terms=[d1, d2], method="simsiam")


def simsiam_kaug_loss(gs, fs) -> LossOutput:
    """``(1/K) sum_k D(g_k, sg(f_{N(k)}))`` for an even number of views."""
    _check_aligned(gs, fs)
    K = len(gs)
    if K < 2 or K % 2:
        raise InputError(f"SimSiam K-aug pairs views, so K must be even and >= 2 (got {K})")
    terms = [cosine_distance(gs[k], stop_gradient(fs[neighbor_index(k + 1) - 1])) for k in range(K)]
    return LossOutput(total=ordered_mean(torch.stack(terms)), per_view_terms=terms, method="simsiam_kaug")


def ensemble_target(fs) -> torch.Tensor:
    """Stop-gradient mean of the projected features of all views."""
    if len(fs) == 0:
        raise InputError("ensemble_target needs at least one view")
    shape = fs[0].shape
    if any(f.shape != shape for f in fs):
        raise InputError("all views must share one feature shape")
    return ordered_mean(torch.stack([stop_gradient(f) for f in fs]))


def ensiam_loss(gs, fs) -> LossOutput:
    """``(1/K) sum_k D(g_k, sg(f_bar))``; every view shares the same target."""
    _check_aligned(gs, fs)
    target = ensemble_target(fs)
    terms = [cosine_distance(g, target) for g in gs]
    return LossOutput(total=ordered_mean(torch.stack(terms)), per_view_terms=terms, method="ensiam")


def compute_loss(method: str, gs, fs) -> LossOutput:
    """Dispatch on a method name (``simsiam``, ``simsiam_kaug`` or ``ensiam``)."""
    if method == "simsiam":
        if len(gs) != 2:
            raise InputError(f"simsiam uses exactly two views, got {len(gs)}")
        return simsiam_loss(gs[0], gs[1], fs[0], fs[1])
    if method == "simsiam_kaug":
        return simsiam_kaug_loss(gs, fs)
    if method == "ensiam":
        return ensiam_loss(gs, fs)
    raise InputError(f"unknown method {method!r}; expected one of {METHODS}")


def validate_method(method: str, K: int) -> None:
    """Raise before any work is done if ``(method, K)`` cannot be trained."""
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "simsiam" and K != 2:
        raise InputError("simsiam uses exactly K=2 views")
    if method == "simsiam_kaug" and (K < 2 or K % 2):
        raise InputError(f"simsiam_kaug requires an even K >= 2 (got {K})")
    if K < 1:
        raise InputError("K must be >= 1")
