"""The gradient-variance probe on a tiny model.

First the two-term decomposition under controlled teacher noise, then the
per-image comparison of the two multi-view losses under real augmentations.
Run with ``python demos/02_gradient_variance.py`` (about a minute on a CPU).
"""

import sys
from pathlib import Path

import torch

from siamlab.augment import generate_views, preset
from siamlab.data import synthetic_dataset
from siamlab.model import EncoderSpec, PredictorSpec, build_model, estimate_batch_norm
from siamlab.plots import plot_variance_report
from siamlab.variance_probe import compare_methods, taylor_decomposition_check

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
train, test = synthetic_dataset(10, 50, 32, 0)

# A 308-parameter model in double precision. Batch-norm statistics are
# estimated on augmented views so the features have a realistic scale.
model = build_model(
    EncoderSpec(width=4, depth=1, projector_hidden_dim=8, projector_out_dim=8), PredictorSpec(4, 8), 0, dtype=torch.float64
)
views = generate_views(train.images[:256], 4, preset("default", 16), seed=0).views
model = estimate_batch_norm(model, [train.normalize(v).double() for v in views])

# Decomposition: Var[G(a, b)] ~ Var[G(a, b_bar)] + sigma^2 E||dG/db||^2.
x = torch.nn.functional.interpolate(test.normalize(test.images[:1]).double(), size=16, mode="bilinear", antialias=True)[0]
for sigma in (0.0, 0.005, 0.01, 0.02, 0.1):
    d = taylor_decomposition_check(model, x, sigma, 5000).decomposition
    print(
        f"sigma {sigma:<6} empirical {d['empirical']:.4e} base {d['term_base']:.4e} "
        f"noise {d['term_noise']:.4e} rel err {d['relative_error']:.4f}"
    )
# The relative error stays at the percent level and creeps up with sigma as
# the higher-order terms the expansion drops start to matter.

# Method comparison under real augmentations: traces per image with a
# one-sided bootstrap bound on the difference. A positive bound means the
# ensemble target lowered the variance of the full K-view loss gradient for
# that image; on this model it typically does not.
report = compare_methods(model, test.images[:3], 4, 200, preset("default", 16), normalize=test.normalize)
for i, (a, b, lo) in enumerate(
    zip(report.method_traces["simsiam_kaug"], report.method_traces["ensiam"], report.margin_ci_lower)
):
    print(f"image {i}: kaug {a:.3f} ensiam {b:.3f} margin lower bound {lo:+.3f}")
report.write(out_dir / "variance_report.json")
print("figure", plot_variance_report(report, out_dir / "variance_report.png"))
