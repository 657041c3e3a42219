"""A short pretraining run with KNN monitoring, then a linear probe.

Uses the same encoder and resolution as the acceptance suite but only a few
epochs. Run with ``python demos/03_desk_pretraining.py [epochs]``.
"""

import sys
from pathlib import Path

from siamlab.data import synthetic_dataset
from siamlab.evaluation import knn_eval, linear_eval
from siamlab.model import EncoderSpec, PredictorSpec, build_model
from siamlab.plots import plot_metric_curves
from siamlab.trainer import TrainConfig, pretrain

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
out = Path("demo_output") / "pretrain"
train, test = synthetic_dataset(10, 500, 32, 0)
enc, pred = EncoderSpec(width=32, depth=2), PredictorSpec()

baseline = linear_eval(build_model(enc, pred, 0), train, test, crop_size=16)
print(f"random encoder linear probe: {baseline.top1_accuracy:.3f}")


def monitor(state, record):
    acc = knn_eval(state.model, train, test, crop_size=16).top1_accuracy
    state.model.train()
    print(f"epoch {record['epoch']:3d} loss {record['loss_total']:+.4f} feature std {record['feature_std']:.4f} knn {acc:.3f}")
    return {"knn_accuracy": acc}


cfg = TrainConfig(method="ensiam", K=4, epochs=epochs, warmup_epochs=max(0, epochs // 5), crop_size=16)
result = pretrain(cfg, train, enc, pred, out_dir=out, epoch_callback=monitor)
print("checkpoint", result.checkpoint.path)
print(f"pretrained linear probe: {linear_eval(result.state.model, train, test, crop_size=16).top1_accuracy:.3f}")
print("figure", plot_metric_curves([out], "knn_accuracy", out / "knn_accuracy.png"))
