"""Independent reference implementations used by the tests.

Nothing here calls into the code under test beyond building models, so
agreement between the two routes is meaningful.
"""

import numpy as np
import torch

from siamlab.model import EncoderSpec, PredictorSpec, build_model

TINY_ENCODER = EncoderSpec(width=4, depth=1, projector_hidden_dim=8, projector_out_dim=8)
TINY_PREDICTOR = PredictorSpec(hidden_dim=4, in_out_dim=8)


def tiny_model(seed=0, dtype=torch.float64):
    return build_model(TINY_ENCODER, TINY_PREDICTOR, seed, dtype=dtype)


def np_negative_cosine(a, b):
    """Batch mean of negative cosine similarity, straight numpy."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = np.einsum("ij,ij->i", a, b)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return float(np.mean(-num / den))


def np_pair(k):
    """Partner of 1-based view k by table lookup rather than a formula."""
    return k + 1 if k % 2 == 1 else k - 1


def central_difference(fn, params, h=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``params``."""
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = float(fn())
                flat[i] = old - h
                down = float(fn())
                flat[i] = old
                g[i] = (up - down) / (2 * h)
            out.append(g.view_as(p))
    return torch.cat([g.reshape(-1) for g in out])


def kink_aware_central_difference(fn, model, params, h=1e-5):
    """Central differences plus a mask of coordinates whose +-h probes cross a ReLU kink.

    A crossing is any ReLU input that changes sign between the two probes;
    there the loss is not differentiable on the probe interval and the
    difference quotient says nothing about the analytic gradient.
    """
    patterns = []
    hooks = [
        m.register_forward_pre_hook(lambda _m, inp: patterns.append((inp[0] > 0).clone()))
        for m in model.modules()
        if isinstance(m, torch.nn.ReLU)
    ]
    grads, crossed = [], []
    try:
        with torch.no_grad():
            for p in params:
                flat = p.view(-1)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    patterns.clear()
                    flat[i] = old + h
                    up = float(fn())
                    up_pattern = list(patterns)
                    patterns.clear()
                    flat[i] = old - h
                    down = float(fn())
                    flat[i] = old
                    grads.append((up - down) / (2 * h))
                    crossed.append(any(not torch.equal(a, b) for a, b in zip(up_pattern, patterns)))
    finally:
        for hook in hooks:
            hook.remove()
    return np.array(grads), np.array(crossed)


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def brute_force_knn(train, train_labels, test, k, temperature, n_classes):
    """Weighted KNN vote with an explicit argsort per query."""
    tr = train / np.linalg.norm(train, axis=1, keepdims=True)
    te = test / np.linalg.norm(test, axis=1, keepdims=True)
    preds = []
    for q in te:
        sims = tr @ q
        nearest = np.argsort(-sims, kind="stable")[:k]
        votes = np.zeros(n_classes)
        for j in nearest:
            votes[train_labels[j]] += np.exp(sims[j] / temperature)
        preds.append(int(np.argmax(votes)))
    return np.array(preds)


def loop_trace(samples):
    """Trace of the unbiased covariance, one coordinate at a time."""
    m = np.asarray(samples, dtype=np.float64)
    n = m.shape[0]
    total = 0.0
    for j in range(m.shape[1]):
        col = m[:, j]
        mu = sum(col) / n
        total += sum((c - mu) ** 2 for c in col) / (n - 1)
    return total
