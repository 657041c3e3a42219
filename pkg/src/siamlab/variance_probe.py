"""Monte Carlo probe of loss-gradient variance under augmentation randomness.

For a fixed image ``x`` and fixed parameters, every draw samples fresh views
and records the full parameter gradient of one method's loss. The spread of
those vectors is summarized by the trace of their empirical covariance.

Two checks build on that:

* :func:`taylor_decomposition_check` replaces the teacher target by
  ``b = b_bar + sigma * eps`` and compares the measured variance with the
  first-order split ``Var[G(a, b_bar)] + E[J Var[b] J^T]``, ``J = dG/db``.
* :func:`compare_methods` measures SimSiam K-aug against EnSiam on the same
  view draws and bootstraps the trace difference.

The model is evaluated in inference mode (batch-norm running statistics), so
one image can be probed without batch statistics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from siamlab.augment import AugmentationConfig, derive_rng, generate_views
from siamlab.errors import DegenerateInputError, InputError, NumericalError
from siamlab.losses import compute_loss
from siamlab.model import SiamModel, encode, negative_cosine_rows, predict

_MAX_SKIP_FRACTION = 0.10


@dataclass
class GradientSample:
    vector: np.ndarray
    method: str
    draw_id: int


@dataclass
class VarianceReport:
    method_traces: dict
    decomposition: Optional[dict] = None
    inequality_margin: Optional[list] = None
    margin_ci_lower: Optional[list] = None
    passes: Optional[list] = None
    n_draws: int = 0
    ci_level: float = 0.95
    K: Optional[int] = None
    skipped: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def covariance_trace(samples) -> float:
    """Sum over coordinates of the unbiased sample variance.

    ``samples`` is a sequence of vectors (or :class:`GradientSample`) or an
    ``[n, P]`` array with one sample per row.
    """
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        samples = list(samples)
    vecs = [s.vector if isinstance(s, GradientSample) else np.asarray(s) for s in samples]
    if len(vecs) < 2:
        raise InputError("need at least two samples")
    if len({v.shape for v in vecs}) != 1:
        raise InputError("samples differ in dimension")
    m = np.stack(vecs).astype(np.float64)
    return float(m.var(axis=0, ddof=1).sum())


def _flat_grad(loss, params) -> torch.Tensor:
    grads = torch.autograd.grad(loss, params)
    return torch.cat([g.reshape(-1) for g in grads])


def sample_gradients(
    model: SiamModel,
    x: torch.Tensor,
    method: str,
    K: int,
    n_draws: int,
    cfg: AugmentationConfig,
    seed: int = 0,
    normalize=None,
) -> list[GradientSample]:
    """``n_draws`` gradient vectors of ``method``'s loss for views of the one image ``x``.

    Draw ``i`` takes its transforms from the substream keyed by ``i``, so the
    same seed yields the same views for every method. Draws whose features
    are degenerate are skipped; more than 10% skipped is an error.
    """
    if n_draws < 2:
        raise InputError("n_draws must be >= 2")
    if x.ndim != 3:
        raise InputError("x must be a single [C, H, W] image")
    model.eval()
    params = list(model.parameters())
    dtype = params[0].dtype
    out, skipped = [], 0
    for draw in range(n_draws):
        views = generate_views(x[None], K, cfg, seed=seed, source_ids=[0], stream=draw)
        inputs = [(normalize(v) if normalize else v).to(dtype) for v in views.views]
        try:
            fs = encode(model, inputs)
            gs = [predict(model, f) for f in fs]
            loss = compute_loss(method, gs, fs).total
        except DegenerateInputError:
            skipped += 1
            if skipped > _MAX_SKIP_FRACTION * n_draws:
                raise DegenerateInputError(f"{skipped} of {n_draws} draws had degenerate features")
            continue
        vec = _flat_grad(loss, params)
        if not torch.isfinite(vec).all():
            raise NumericalError(f"non-finite gradient in draw {draw}", where="variance_probe")
        out.append(GradientSample(vec.detach().cpu().numpy().astype(np.float64), method, draw))
    return out


def _bootstrap_margin(a: np.ndarray, b: np.ndarray, n_boot: int, rng: np.random.Generator) -> np.ndarray:
    """Bootstrap replicates of ``trace(cov a) - trace(cov b)`` with paired resampling."""
    n = a.shape[0]
    w = rng.multinomial(n, np.full(n, 1.0 / n), size=n_boot).astype(np.float64)

    def traces(m):
        sq = w @ np.einsum("ij,ij->i", m, m)
        mean = (w @ m) / n
        return (sq - n * np.einsum("ij,ij->i", mean, mean)) / (n - 1)

    return traces(a) - traces(b)


def compare_methods(
    model: SiamModel,
    images,
    K: int,
    n_draws: int,
    cfg: AugmentationConfig,
    seed: int = 0,
    ci_level: float = 0.95,
    n_boot: int = 2000,
    methods=("simsiam_kaug", "ensiam"),
    normalize=None,
) -> VarianceReport:
    """Per-image gradient-variance traces of two methods and their difference.

    ``inequality_margin[i] = trace_first - trace_second`` for image ``i``; the
    one-sided bootstrap lower bound at ``ci_level`` is reported alongside and
    ``passes[i]`` says whether that bound is positive.
    """
    first, second = methods
    traces = {m: [] for m in methods}
    margins, lowers, passes = [], [], []
    skipped = {m: 0 for m in methods}
    for i, x in enumerate(images):
        mats = {}
        for m in methods:
            samples = sample_gradients(model, x, m, K, n_draws, cfg, seed=seed + i, normalize=normalize)
            skipped[m] += n_draws - len(samples)
            mats[m] = {s.draw_id: s.vector for s in samples}
            traces[m].append(covariance_trace(samples))
        common = sorted(set(mats[first]) & set(mats[second]))
        a = np.stack([mats[first][d] for d in common])
        b = np.stack([mats[second][d] for d in common])
        margin = traces[first][-1] - traces[second][-1]
        if traces[first][-1] == 0.0 and traces[second][-1] == 0.0:
            boot = np.zeros(n_boot)
        else:
            boot = _bootstrap_margin(a, b, n_boot, derive_rng(seed, 0xB007, i))
        lower = float(np.quantile(boot, 1.0 - ci_level))
        margins.append(float(margin))
        lowers.append(lower)
        passes.append(bool(lower > 0.0))
    return VarianceReport(
        method_traces=traces,
        inequality_margin=margins,
        margin_ci_lower=lowers,
        passes=passes,
        n_draws=n_draws,
        ci_level=ci_level,
        K=K,
        skipped=skipped,
    )


def trace_vs_k(model, x, Ks, n_draws, cfg, methods=("simsiam_kaug", "ensiam"), seed=0, normalize=None) -> dict:
    """Gradient-variance trace of each method for every ``K`` in ``Ks``."""
    out = {m: {} for m in methods}
    for m in methods:
        for K in Ks:
            samples = sample_gradients(model, x, m, K, n_draws, cfg, seed=seed, normalize=normalize)
            out[m][int(K)] = covariance_trace(samples)
    return out


class _StudentPath(torch.nn.Module):
    # predictor(projector(backbone(x))) as a single module for torch.func
    def __init__(self, model: SiamModel):
        super().__init__()
        self.model = model

    def forward(self, x):
        return self.model.predictor(self.model(x))


def _gradients_for_targets(model: SiamModel, xs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """``G[i, t] = grad_theta D(a(xs[i]), targets[i, t])`` as a ``[n, T, P]`` tensor.

    The student of every draw is evaluated once; its pullback is then applied
    to the cosine gradients of all ``T`` targets.
    """
    path = _StudentPath(model)
    params = {k: v.detach() for k, v in path.named_parameters()}
    buffers = {k: v.detach() for k, v in path.named_buffers()}

    def student(p, x):
        return torch.func.functional_call(path, (p, buffers), (x[None],))[0]

    def dloss_da(a, b):
        return torch.func.grad(lambda u: negative_cosine_rows(u, b))(a)

    def per_draw(x, tgts):
        a, pullback = torch.func.vjp(lambda p: student(p, x), params)
        cot = torch.func.vmap(dloss_da, in_dims=(None, 0))(a, tgts)
        (g,) = torch.func.vmap(pullback)(cot)
        return torch.cat([g[k].reshape(tgts.shape[0], -1) for k in params], dim=1)

    return torch.func.vmap(per_draw)(xs, targets)


def taylor_decomposition_check(
    model: SiamModel,
    x: torch.Tensor,
    noise_scale: float,
    n_draws: int,
    student_noise: float = 1e-3,
    seed: int = 0,
    fd_step: float = 1e-4,
    jacobian_draws: Optional[int] = 2000,
    chunk: int = 500,
) -> VarianceReport:
    """Compare the measured gradient variance with its first-order decomposition.

    Student ``a = g(f(x + student_noise * eta))`` with pixel noise ``eta``,
    teacher ``b = b_bar + noise_scale * eps`` with ``b_bar = f(x)`` and
    ``eps ~ N(0, I)``, so ``Var[b] = noise_scale**2 * I``. Per draw:

    * ``empirical``: ``G(a, b)``
    * ``term_base``: ``G(a, b_bar)`` (same ``a``)
    * ``term_noise``: ``noise_scale**2 * ||J||_F**2`` with ``J = dG/db`` from
      central differences around ``b_bar``, averaged over the first
      ``jacobian_draws`` draws (all draws when ``None``).

    The model runs in inference mode, so draws are processed ``chunk`` at a
    time without changing any result.
    """
    if noise_scale < 0:
        raise InputError("noise_scale must be >= 0")
    if n_draws < 2:
        raise InputError("n_draws must be >= 2")
    model.eval()
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    with torch.no_grad():
        b_bar = encode(model, [x[None]])[0]
    if bool((torch.linalg.vector_norm(b_bar) == 0).any()):
        raise DegenerateInputError("teacher feature of the probe image is zero")
    d = b_bar.shape[1]
    n_jac = n_draws if jacobian_draws is None else min(jacobian_draws, n_draws)
    rng = derive_rng(seed, 0x7A11)
    eta = torch.as_tensor(rng.standard_normal((n_draws, *x.shape)), dtype=dtype)
    eps = torch.as_tensor(rng.standard_normal((n_draws, d)), dtype=dtype)
    steps = torch.eye(d, dtype=dtype) * fd_step
    probes = torch.stack([b_bar[0] + steps, b_bar[0] - steps], dim=1).reshape(2 * d, d)

    emp, base = [], []
    jac_sq = 0.0
    for lo in range(0, n_draws, chunk):
        hi = min(lo + chunk, n_draws)
        xs = x + student_noise * eta[lo:hi]
        tgts = torch.stack([b_bar[0] + noise_scale * eps[lo:hi], b_bar[0].expand(hi - lo, d)], dim=1)
        G = _gradients_for_targets(model, xs, tgts)
        if not torch.isfinite(G).all():
            raise NumericalError(f"non-finite gradient in draws {lo}..{hi}", where="taylor_decomposition_check")
        emp.append(G[:, 0].numpy())
        base.append(G[:, 1].numpy())
        if lo < n_jac:
            m = min(hi, n_jac) - lo
            P = _gradients_for_targets(model, xs[:m], probes.expand(m, 2 * d, d))
            J = (P[:, 0::2] - P[:, 1::2]) / (2 * fd_step)
            jac_sq += float((J.double() ** 2).sum())
    empirical = covariance_trace(np.concatenate(emp))
    term_base = covariance_trace(np.concatenate(base))
    term_noise = noise_scale**2 * jac_sq / n_jac
    predicted = term_base + term_noise
    rel = abs(empirical - predicted) / empirical if empirical > 0 else (0.0 if predicted == 0 else float("inf"))
    decomposition = {
        "noise_scale": noise_scale,
        "student_noise": student_noise,
        "empirical": empirical,
        "term_base": term_base,
        "term_noise": term_noise,
        "relative_error": rel,
        "jacobian_draws": n_jac,
    }
    return VarianceReport(method_traces={"empirical": empirical}, decomposition=decomposition, n_draws=n_draws)
