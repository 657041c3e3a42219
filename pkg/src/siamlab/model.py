"""Encoder, predictor, stop-gradient and cosine distance.

The encoder ``f`` is a small convolutional backbone followed by a projection
MLP; the predictor ``g`` is a two-layer bottleneck MLP. Batch-norm placement
follows the SimSiam convention: every hidden layer is normalized, the
projector output is normalized without affine parameters, and the predictor
output is left unnormalized.
"""

from __future__ import annotations

from collections import OrderedDict
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import torch
from torch import nn

from siamlab.errors import ConfigurationError, DegenerateInputError, InputError, NumericalError

BACKBONES = ("tiny_conv", "small_resnet")


@dataclass(frozen=True)
class EncoderSpec:
    backbone: str = "tiny_conv"
    projector_layers: int = 2
    projector_hidden_dim: int = 128
    projector_out_dim: int = 64
    small_input_stem: bool = True
    # base channel count and number of downsampling stages of the backbone
    width: int = 16
    depth: int = 3

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.projector_layers not in (2, 3):
            raise ConfigurationError("projector_layers must be 2 or 3")
        if not self.projector_hidden_dim >= self.projector_out_dim >= 8:
            raise ConfigurationError(
                "need projector_hidden_dim >= projector_out_dim >= 8, got "
                f"{self.projector_hidden_dim} / {self.projector_out_dim}"
            )
        if self.width < 1 or not 1 <= self.depth <= 4:
            raise ConfigurationError("width must be >= 1 and depth in 1..4")

    @property
    def feature_dim(self) -> int:
        """Dimension of the pooled backbone output."""
        return self.width * 2 ** (self.depth - 1)


@dataclass(frozen=True)
class PredictorSpec:
    hidden_dim: int = 16
    in_out_dim: int = 64

    def __post_init__(self):
        if self.hidden_dim < 1 or self.in_out_dim < 1:
            raise ConfigurationError("predictor dimensions must be positive")


def _conv_bn(cin, cout, kernel, stride):
    return [
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def _backbone(spec: EncoderSpec) -> nn.Sequential:
    w = spec.width
    layers: OrderedDict[str, nn.Module] = OrderedDict()
    if spec.small_input_stem:
        layers["stem"] = nn.Sequential(*_conv_bn(3, w, 3, 1))
    else:
        layers["stem"] = nn.Sequential(*_conv_bn(3, w, 7, 2), nn.MaxPool2d(3, 2, 1))
    if spec.backbone == "small_resnet":
        layers["stage0"] = BasicBlock(w, w, 1)
    cin = w
    for i in range(1, spec.depth):
        cout = w * 2**i
        if spec.backbone == "tiny_conv":
            layers[f"stage{i}"] = nn.Sequential(*_conv_bn(cin, cout, 3, 2))
        else:
            layers[f"stage{i}"] = BasicBlock(cin, cout, 2)
        cin = cout
    layers["pool"] = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
    return nn.Sequential(layers)


def _projector(spec: EncoderSpec) -> nn.Sequential:
    dims = [spec.feature_dim] + [spec.projector_hidden_dim] * (spec.projector_layers - 1)
    mods: list[nn.Module] = []
    for cin, cout in zip(dims[:-1], dims[1:]):
        mods += [nn.Linear(cin, cout, bias=False), nn.BatchNorm1d(cout), nn.ReLU(inplace=True)]
    mods += [nn.Linear(dims[-1], spec.projector_out_dim, bias=False), nn.BatchNorm1d(spec.projector_out_dim, affine=False)]
    return nn.Sequential(*mods)


def _predictor(spec: PredictorSpec) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(spec.in_out_dim, spec.hidden_dim, bias=False),
        nn.BatchNorm1d(spec.hidden_dim),
        nn.ReLU(inplace=True),
        nn.Linear(spec.hidden_dim, spec.in_out_dim),
    )


class SiamModel(nn.Module):
    """Shared-weight siamese network: ``backbone -> projector`` is ``f``, ``predictor`` is ``g``.

    Parameters are addressed by a stable flat index (registration order), see
    :meth:`flat_parameters` and :meth:`parameter_slices`.
    """

    def __init__(self, encoder_spec: EncoderSpec, predictor_spec: PredictorSpec):
        super().__init__()
        self.encoder_spec = encoder_spec
        self.predictor_spec = predictor_spec
        self.backbone = _backbone(encoder_spec)
        self.projector = _projector(encoder_spec)
        self.predictor = _predictor(predictor_spec)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled backbone features, the input of the linear probe."""
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.projector(self.backbone(x))

    @property
    def total_dim(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def parameter_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, p in self.named_parameters():
            out[name] = slice(start, start + p.numel())
            start += p.numel()
        return out

    def spec_dict(self) -> dict:
        return {"encoder": asdict(self.encoder_spec), "predictor": asdict(self.predictor_spec)}


def build_model(enc: EncoderSpec, pred: PredictorSpec, seed: int, dtype=torch.float32) -> SiamModel:
    """Construct a model with deterministic initialization.

    Raises ConfigurationError when the predictor width does not match the
    projector output.
    """
    if enc.projector_out_dim != pred.in_out_dim:
        raise ConfigurationError(
            f"projector_out_dim ({enc.projector_out_dim}) must equal predictor in_out_dim ({pred.in_out_dim})"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SiamModel(enc, pred)
    return model.to(dtype)


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activation after {where}", where=where)


def _run_checked(seq: nn.Sequential, x: torch.Tensor, prefix: str) -> torch.Tensor:
    for name, layer in seq.named_children():
        x = layer(x)
        _check_finite(x, f"{prefix}.{name}")
    return x


def encode(model: SiamModel, views) -> list[torch.Tensor]:
    """Projected features ``f_k`` for every view, in view order.

    ``views`` is a :class:`~siamlab.augment.ViewBatch` or a sequence of
    ``[B, C, H, W]`` tensors. Each view passes through the encoder on its
    own, so batch-norm statistics are per view.
    """
    tensors = getattr(views, "views", views)
    if isinstance(tensors, torch.Tensor):
        tensors = [tensors]
    if len(tensors) < 1:
        raise InputError("encode needs at least one view")
    out = []
    for v in tensors:
        h = _run_checked(model.backbone, v, "backbone")
        out.append(_run_checked(model.projector, h, "projector"))
    return out


def predict(model: SiamModel, f: torch.Tensor) -> torch.Tensor:
    """Predicted features ``g = predictor(f)``."""
    if f.ndim != 2 or f.shape[1] != model.predictor_spec.in_out_dim:
        raise ConfigurationError(
            f"predictor expects [B, {model.predictor_spec.in_out_dim}] input, got {tuple(f.shape)}"
        )
    return _run_checked(model.predictor, f, "predictor")


def stop_gradient(f: torch.Tensor) -> torch.Tensor:
    """Same values, no gradient path back to the parameters."""
    return f.detach()


def _rowwise_negative_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim != 2:
        raise InputError("features must be [B, d] matrices")
    na = torch.linalg.vector_norm(a, dim=1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DegenerateInputError("zero-norm feature row in cosine distance")
    return negative_cosine_rows(a, b)


def negative_cosine_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise ``-cos(a_i, b_i)`` without input checks (safe under ``torch.func`` transforms)."""
    na = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    cos = ((a / na) * (b / nb)).sum(dim=-1)
    return -cos.clamp(-1.0, 1.0)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``-<a_i, b_i> / (|a_i| |b_i|)``; lies in ``[-1, 1]``.

    Zero-norm rows raise :class:`DegenerateInputError` instead of being
    clamped.
    """
    return _rowwise_negative_cosine(a, b).mean()


def as_features(values: Sequence, dtype=torch.float64) -> torch.Tensor:
    """Small helper turning nested lists into a feature matrix."""
    return torch.as_tensor(values, dtype=dtype)


@torch.no_grad()
def estimate_batch_norm(model: SiamModel, batches) -> SiamModel:
    """Replace every batch-norm running statistic by its average over ``batches``.

    Each batch is a ``[B, C, H, W]`` tensor pushed through backbone,
    projector and predictor in training mode; the cumulative average makes
    the result independent of the momentum setting. Parameters are not
    touched. Returns the model in eval mode.
    """
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    try:
        for x in batches:
            model.predictor(model(x.to(next(model.parameters()).dtype)))
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
    return model.eval()
