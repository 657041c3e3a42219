"""Pretraining loop: momentum SGD with L2 weight decay, LR scaling, warmup + cosine."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch

from siamlab.augment import PRESETS, AugmentationConfig, derive_rng, generate_views, preset
from siamlab.errors import ConfigurationError, InputError, NumericalError
from siamlab.evaluation import collapse_metric
from siamlab.losses import compute_loss, validate_method
from siamlab.model import EncoderSpec, PredictorSpec, SiamModel, build_model, encode, predict

log = logging.getLogger(__name__)

# key of the data-order substream; view substreams use the epoch as first key
_ORDER_STREAM = 0x0D3D


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ensiam"
    K: int = 4
    batch_size: int = 64
    epochs: int = 50
    base_lr: float = 0.10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    augmentation: str = "default"
    seed: int = 0
    crop_size: Optional[int] = None

    def __post_init__(self):
        try:
            validate_method(self.method, self.K)
        except InputError as exc:
            raise ConfigurationError(str(exc)) from None
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.augmentation not in PRESETS:
            raise ConfigurationError(f"augmentation must be one of {PRESETS}")

    def augmentation_config(self) -> AugmentationConfig:
        return preset(self.augmentation, self.crop_size)


@dataclass
class TrainState:
    """Everything needed to resume training bit for bit."""

    model: SiamModel
    momentum_buffers: list
    global_step: int = 0
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    config_digest: str = ""

    @classmethod
    def fresh(cls, model: SiamModel, seed: int, config_digest: str = "") -> "TrainState":
        buffers = [torch.zeros_like(p) for p in model.parameters()]
        return cls(model, buffers, 0, 0, {"seed": int(seed)}, config_digest)


@dataclass
class StepMetrics:
    step: int
    epoch: int
    lr: float
    loss_total: float
    loss_terms: list
    feature_std: float

    def to_record(self) -> dict:
        return {"kind": "step", **asdict(self)}


def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule ``base_lr * batch_size / 256``."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    return base_lr * batch_size / 256


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Per-step linear warmup from 0 to ``peak_lr``, then half-cosine decay."""
    if not 0 <= step < total_steps:
        raise InputError(f"step {step} outside [0, {total_steps})")
    if not 0 <= warmup_steps < total_steps:
        raise InputError("warmup_steps must satisfy 0 <= warmup_steps < total_steps")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _identity(x):
    return x


def train_step(
    state: TrainState,
    images: torch.Tensor,
    cfg: TrainConfig,
    lr: float,
    source_ids=None,
    normalize: Callable = _identity,
    aug: Optional[AugmentationConfig] = None,
) -> tuple[TrainState, StepMetrics]:
    """One update ``v <- mu*v + (grad + wd*theta); theta <- theta - lr*v``.

    ``state`` is updated in place and returned. On a non-finite loss or
    gradient a :class:`NumericalError` is raised and the state (parameters,
    momentum buffers, batch-norm statistics, counters) is left untouched.
    """
    if images.shape[0] == 0:
        raise InputError("empty batch")
    model = state.model
    aug = aug or cfg.augmentation_config()
    seed = state.rng_state.get("seed", cfg.seed)
    views = generate_views(images, cfg.K, aug, seed=seed, source_ids=source_ids, stream=state.epoch)
    inputs = [normalize(v).to(next(model.parameters()).dtype) for v in views.views]

    saved_buffers = [b.clone() for b in model.buffers()]

    def restore():
        with torch.no_grad():
            for b, s in zip(model.buffers(), saved_buffers):
                b.copy_(s)

    model.train()
    params = list(model.parameters())
    try:
        fs = encode(model, inputs)
        gs = [predict(model, f) for f in fs]
        out = compute_loss(cfg.method, gs, fs)
        if not torch.isfinite(out.total):
            raise NumericalError("non-finite loss", where="loss", step=state.global_step)
        grads = torch.autograd.grad(out.total, params)
        for (name, _), g in zip(model.named_parameters(), grads):
            if not torch.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for {name}", where=name, step=state.global_step)
    except NumericalError as exc:
        restore()
        if exc.step is None:
            exc.step = state.global_step
        raise
    except Exception:
        restore()
        raise

    with torch.no_grad():
        for p, g, v in zip(params, grads, state.momentum_buffers):
            d = g + cfg.weight_decay * p if cfg.weight_decay else g
            v.mul_(cfg.momentum).add_(d)
            p.sub_(lr * v)
        std = sum(collapse_metric(f.detach()) for f in fs) / len(fs)

    metrics = StepMetrics(
        step=state.global_step,
        epoch=state.epoch,
        lr=float(lr),
        loss_total=float(out.total.detach()),
        loss_terms=out.terms_as_floats(),
        feature_std=float(std),
    )
    state.global_step += 1
    return state, metrics


def epoch_order(seed: int, epoch: int, n: int) -> torch.Tensor:
    return torch.as_tensor(derive_rng(seed, _ORDER_STREAM, epoch).permutation(n))


@dataclass
class PretrainResult:
    state: TrainState
    checkpoint: object = None
    epoch_records: list = field(default_factory=list)


def pretrain(
    cfg: TrainConfig,
    dataset,
    encoder_spec: EncoderSpec = EncoderSpec(),
    predictor_spec: PredictorSpec = PredictorSpec(),
    *,
    out_dir=None,
    state: Optional[TrainState] = None,
    config_digest: str = "",
    checkpoint_every: int = 0,
    max_steps: Optional[int] = None,
    epoch_callback: Optional[Callable[[TrainState, dict], Optional[dict]]] = None,
    metrics_path=None,
) -> PretrainResult:
    """Run ``epochs * ceil(N / B)`` steps (or resume ``state`` where it stopped).

    With ``out_dir`` a final checkpoint ``final.ckpt`` is written there, plus
    ``epoch_XXXX.ckpt`` every ``checkpoint_every`` epochs; step and epoch
    records go to ``metrics_path`` (default ``out_dir/metrics.jsonl``).
    ``epoch_callback`` may return extra fields (e.g. a KNN accuracy) to merge
    into the epoch record. ``max_steps`` stops early, mainly for tests.
    """
    validate_method(cfg.method, cfg.K)
    n = len(dataset)
    if n == 0:
        raise InputError("dataset is empty")
    from siamlab.checkpoint import save_checkpoint

    if state is None:
        model = build_model(encoder_spec, predictor_spec, cfg.seed)
        state = TrainState.fresh(model, cfg.seed, config_digest)
    spe = steps_per_epoch(n, cfg.batch_size)
    total = cfg.epochs * spe
    warmup = cfg.warmup_epochs * spe
    peak = scaled_lr(cfg.base_lr, cfg.batch_size)
    aug = cfg.augmentation_config()
    seed = state.rng_state.get("seed", cfg.seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = metrics_path or out_dir / "metrics.jsonl"
    sink = open(metrics_path, "a") if metrics_path is not None else None

    result = PretrainResult(state)
    losses, stds = [], []
    try:
        while state.global_step < total:
            if max_steps is not None and state.global_step >= max_steps:
                break
            state.epoch = state.global_step // spe
            pos = state.global_step % spe
            order = epoch_order(seed, state.epoch, n)
            idx = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
            lr = lr_at(state.global_step, total, warmup, peak)
            state, m = train_step(
                state, dataset.images[idx], cfg, lr, source_ids=idx.tolist(), normalize=dataset.normalize, aug=aug
            )
            losses.append(m.loss_total)
            stds.append(m.feature_std)
            if sink:
                sink.write(json.dumps(m.to_record()) + "\n")
            if pos == spe - 1:
                record = {
                    "kind": "epoch",
                    "step": m.step,
                    "epoch": state.epoch,
                    "lr": m.lr,
                    "loss_total": sum(losses) / len(losses),
                    "loss_terms": m.loss_terms,
                    "feature_std": sum(stds) / len(stds),
                }
                losses, stds = [], []
                if epoch_callback is not None:
                    record.update(epoch_callback(state, record) or {})
                result.epoch_records.append(record)
                log.info("epoch %d loss %.4f feature_std %.4f", state.epoch, record["loss_total"], record["feature_std"])
                if sink:
                    sink.write(json.dumps(record) + "\n")
                    sink.flush()
                if out_dir is not None and checkpoint_every and (state.epoch + 1) % checkpoint_every == 0:
                    save_checkpoint(state, out_dir / f"epoch_{state.epoch + 1:04d}.ckpt", train_config=cfg)
        state.epoch = min(state.global_step // spe, cfg.epochs)
        if out_dir is not None:
            result.checkpoint = save_checkpoint(state, out_dir / "final.ckpt", train_config=cfg)
    finally:
        if sink:
            sink.close()
    return result
