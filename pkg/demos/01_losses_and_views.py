"""Views, losses and the pairing rule, on one synthetic batch.

Run with ``python demos/01_losses_and_views.py``.
"""

from siamlab.augment import generate_views, preset
from siamlab.data import synthetic_dataset
from siamlab.losses import compute_loss, neighbor_index, simsiam_loss
from siamlab.model import EncoderSpec, PredictorSpec, build_model, encode, predict

# A small synthetic dataset: class = (shape, hue band), everything else is nuisance.
train, _ = synthetic_dataset(n_classes=10, n_per_class=20, image_size=32, seed=0)
images = train.images[:8]
print("batch", tuple(images.shape), "labels", train.labels[:8].tolist())

# K views per image. Every random choice is recorded in a descriptor, so a view
# can be replayed from (descriptor, source image) alone.
K = 4
views = generate_views(images, K, preset("default", crop_size=16), seed=0)
print("views", [tuple(v.shape) for v in views.views])
print("first descriptor", views.descriptors[0][0].to_json()[:120], "...")

# K-aug pairs view k with its neighbor: 1<->2, 3<->4, ...
print("pairing", {k: neighbor_index(k) for k in range(1, K + 1)})

model = build_model(EncoderSpec(width=16, depth=2), PredictorSpec(), seed=0).train()
fs = encode(model, [train.normalize(v) for v in views.views])
gs = [predict(model, f) for f in fs]

for method in ("simsiam_kaug", "ensiam"):
    out = compute_loss(method, gs, fs)
    print(f"{method:13s} total {out.total.item():+.4f} terms", [round(t, 4) for t in out.terms_as_floats()])

# With two views the K-aug loss is the original two-view loss, bit for bit.
two = compute_loss("simsiam_kaug", gs[:2], fs[:2]).total
ref = simsiam_loss(gs[0], gs[1], fs[0], fs[1]).total
print("K=2 equals two-view loss bitwise:", two.detach().numpy().tobytes() == ref.detach().numpy().tobytes())

