"""Transform space, transform sampling and K-view generation.

A transform is sampled once into a :class:`TransformDescriptor` (every random
choice bound) and then applied as a pure function of ``(descriptor, image)``.
The batched applier only uses per-sample elementwise arithmetic, gathers and
per-image loops, so a view produced inside a batch is bit-identical to the
same descriptor replayed on the lone source image.

Images are float tensors ``[C, H, W]`` with values in ``[0, 1]``; every op
keeps values inside that range.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from siamlab.errors import ConfigurationError, InputError

PRESETS = ("default", "strong", "very_strong")

RANDAUGMENT_OPS = (
    "Identity",
    "ShearX",
    "ShearY",
    "TranslateX",
    "TranslateY",
    "Rotate",
    "Brightness",
    "Color",
    "Contrast",
    "Sharpness",
    "Posterize",
    "Solarize",
    "AutoContrast",
    "Equalize",
)
_SIGNED_OPS = {"ShearX", "ShearY", "TranslateX", "TranslateY", "Rotate", "Brightness", "Color", "Contrast", "Sharpness"}
_RANDAUGMENT_BINS = 31

_JITTER_OPS = ("brightness", "contrast", "saturation", "hue")
_GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def _check_interval(name, lo, hi, upper=None):
    if not (0 < lo <= hi) or (upper is not None and hi > upper):
        bound = f" <= {upper}" if upper is not None else ""
        raise ConfigurationError(f"{name} must satisfy 0 < lo <= hi{bound}, got ({lo}, {hi})")


@dataclass(frozen=True)
class AugmentationConfig:
    """Parameterization of the transform space."""

    crop_scale: tuple[float, float] = (0.2, 1.0)
    hflip_prob: float = 0.5
    jitter_strengths: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_prob: float = 0.5
    randaugment: Optional[tuple[int, int]] = None
    jigsaw_grid: Optional[int] = None
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    # output side length of every view; None keeps the source size
    crop_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(self.crop_scale))
        object.__setattr__(self, "jitter_strengths", tuple(self.jitter_strengths))
        object.__setattr__(self, "blur_sigma", tuple(self.blur_sigma))
        object.__setattr__(self, "crop_ratio", tuple(self.crop_ratio))
        if self.randaugment is not None:
            object.__setattr__(self, "randaugment", tuple(self.randaugment))
        for name in ("hflip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must be a probability, got {p}")
        _check_interval("crop_scale", *self.crop_scale, upper=1.0)
        _check_interval("crop_ratio", *self.crop_ratio)
        _check_interval("blur_sigma", *self.blur_sigma)
        if len(self.jitter_strengths) != 4 or min(self.jitter_strengths) < 0:
            raise ConfigurationError("jitter_strengths must be four non-negative numbers")
        if self.jitter_strengths[3] > 0.5:
            raise ConfigurationError("hue jitter strength must be <= 0.5")
        if self.randaugment is not None:
            n_ops, magnitude = self.randaugment
            if n_ops < 0 or not 0 <= magnitude < _RANDAUGMENT_BINS:
                raise ConfigurationError(f"invalid randaugment {self.randaugment}")
        if self.jigsaw_grid is not None and self.jigsaw_grid < 1:
            raise ConfigurationError("jigsaw_grid must be a positive integer")
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigurationError("crop_size must be positive")


def preset(name: str, crop_size: Optional[int] = None) -> AugmentationConfig:
    """Named augmentation configuration: ``default``, ``strong`` or ``very_strong``.

    ``strong`` widens brightness/contrast/saturation by 0.4 and blur to
    ``[0.2, 3.0]``; ``very_strong`` adds RandAugment(2, 5) and a 4x4 jigsaw.
    """
    base = AugmentationConfig(crop_size=crop_size)
    if name == "default":
        return base
    b, c, s, h = base.jitter_strengths
    strong = replace(base, jitter_strengths=(b + 0.4, c + 0.4, s + 0.4, h), blur_sigma=(0.2, 3.0))
    if name == "strong":
        return strong
    if name == "very_strong":
        return replace(strong, randaugment=(2, 5), jigsaw_grid=4)
    raise ConfigurationError(f"unknown augmentation preset {name!r}; expected one of {PRESETS}")


def linear_eval_augmentation(crop_size: Optional[int] = None) -> AugmentationConfig:
    """Random crop and horizontal flip only, used while fitting linear probes."""
    return AugmentationConfig(jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0, crop_size=crop_size)


def identity_augmentation(crop_size: Optional[int] = None) -> AugmentationConfig:
    """Degenerate configuration whose every transform is the identity."""
    return AugmentationConfig(
        crop_scale=(1.0, 1.0), hflip_prob=0.0, jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0, crop_size=crop_size
    )


@dataclass(frozen=True)
class TransformDescriptor:
    """Ordered ``(op_name, params)`` records of one fully sampled transform.

    Crop boxes are stored as fractions of the source height and width.
    """

    records: tuple = ()

    def ops(self) -> list[str]:
        return [name for name, _ in self.records]

    def get(self, name: str) -> Optional[dict]:
        for op, params in self.records:
            if op == name:
                return params
        return None

    def to_json(self) -> str:
        return json.dumps([[n, p] for n, p in self.records], sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TransformDescriptor":
        return cls(tuple((n, p) for n, p in json.loads(text)))


@dataclass
class ViewBatch:
    """``K`` augmented views of ``B`` source images.

    ``descriptors[k][b]`` produced ``views[k][b]`` from source ``source_ids[b]``.
    """

    views: list
    descriptors: list
    source_ids: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.views)

    @property
    def batch_size(self) -> int:
        return int(self.views[0].shape[0]) if self.views else 0


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent named substream of ``seed`` keyed by a tuple of integers."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def _sample_crop(cfg: AugmentationConfig, rng: np.random.Generator) -> dict:
    lo, hi = cfg.crop_scale
    log_ratio = (math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    for _ in range(10):
        area = rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_ratio))
        w = math.sqrt(area * ratio)
        h = math.sqrt(area / ratio)
        if w <= 1.0 and h <= 1.0:
            top = rng.uniform(0.0, 1.0 - h)
            left = rng.uniform(0.0, 1.0 - w)
            return {"top": top, "left": left, "height": h, "width": w}
    # fallback: largest centered box whose aspect ratio lies in range
    r = min(max(1.0, cfg.crop_ratio[0]), cfg.crop_ratio[1])
    w, h = (1.0, 1.0 / r) if r >= 1.0 else (r, 1.0)
    return {"top": (1.0 - h) / 2, "left": (1.0 - w) / 2, "height": h, "width": w}


def sample_transform(cfg: AugmentationConfig, rng: np.random.Generator) -> TransformDescriptor:
    """Draw one transform ``t ~ T``, binding every random choice.

    The stream is consumed in a fixed pattern, so equal stream states give
    equal descriptors.
    """
    records = [("crop", _sample_crop(cfg, rng))]
    if rng.random() < cfg.hflip_prob:
        records.append(("hflip", {}))
    apply_jitter = rng.random() < cfg.jitter_prob
    order = [int(i) for i in rng.permutation(4)]
    b, c, s, h = cfg.jitter_strengths
    factors = {
        "brightness": float(rng.uniform(max(0.0, 1 - b), 1 + b)) if b > 0 else None,
        "contrast": float(rng.uniform(max(0.0, 1 - c), 1 + c)) if c > 0 else None,
        "saturation": float(rng.uniform(max(0.0, 1 - s), 1 + s)) if s > 0 else None,
        "hue": float(rng.uniform(-h, h)) if h > 0 else None,
    }
    if apply_jitter and any(v is not None for v in factors.values()):
        records.append(("color_jitter", {"order": order, **factors}))
    if rng.random() < cfg.grayscale_prob:
        records.append(("grayscale", {}))
    apply_blur = rng.random() < cfg.blur_prob
    sigma = float(rng.uniform(*cfg.blur_sigma))
    if apply_blur:
        records.append(("gaussian_blur", {"sigma": sigma}))
    if cfg.randaugment is not None:
        n_ops, magnitude = cfg.randaugment
        ops = []
        for _ in range(n_ops):
            name = RANDAUGMENT_OPS[int(rng.integers(len(RANDAUGMENT_OPS)))]
            sign = -1.0 if (name in _SIGNED_OPS and rng.random() < 0.5) else 1.0
            ops.append([name, int(magnitude), sign])
        records.append(("randaugment", {"ops": ops}))
    if cfg.jigsaw_grid is not None:
        g = cfg.jigsaw_grid
        records.append(("jigsaw", {"grid": g, "perm": [int(i) for i in rng.permutation(g * g)]}))
    return TransformDescriptor(tuple(records))


# --- appliers -------------------------------------------------------------


def _axis_coords(start, length, size, out, reverse):
    # pixel-center mapping; an unscaled, unshifted axis maps exactly onto integers
    step = (length * size) / out
    coords = start * size + (np.arange(out) + 0.5) * step - 0.5
    coords = np.clip(coords, 0.0, size - 1)
    lo = np.floor(coords)
    frac = coords - lo
    lo = lo.astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    if reverse:
        lo, hi, frac = lo[::-1], hi[::-1], frac[::-1]
    return lo, hi, frac


def _resized_crop(images: torch.Tensor, crops: list[dict], flips: list[bool], out: int) -> torch.Tensor:
    n, c, H, W = images.shape
    ys = [_axis_coords(cr["top"], cr["height"], H, out, False) for cr in crops]
    xs = [_axis_coords(cr["left"], cr["width"], W, out, fl) for cr, fl in zip(crops, flips)]
    y0 = torch.as_tensor(np.stack([y[0] for y in ys]))
    y1 = torch.as_tensor(np.stack([y[1] for y in ys]))
    wy = torch.as_tensor(np.stack([y[2] for y in ys]), dtype=images.dtype)
    x0 = torch.as_tensor(np.stack([x[0] for x in xs]))
    x1 = torch.as_tensor(np.stack([x[1] for x in xs]))
    wx = torch.as_tensor(np.stack([x[2] for x in xs]), dtype=images.dtype)

    def rows(idx):
        return torch.gather(images, 2, idx[:, None, :, None].expand(n, c, out, W))

    r = rows(y0) * (1 - wy)[:, None, :, None] + rows(y1) * wy[:, None, :, None]

    def cols(idx):
        return torch.gather(r, 3, idx[:, None, None, :].expand(n, c, out, out))

    return cols(x0) * (1 - wx)[:, None, None, :] + cols(x1) * wx[:, None, None, :]


def _gray(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    return (_GRAY_WEIGHTS[0] * r + _GRAY_WEIGHTS[1] * g + _GRAY_WEIGHTS[2] * b).unsqueeze(1)


def _blend(a: torch.Tensor, b: torch.Tensor, ratio: torch.Tensor) -> torch.Tensor:
    return (ratio * a + (1.0 - ratio) * b).clamp(0.0, 1.0)


def _per_sample_mean(x: torch.Tensor) -> torch.Tensor:
    # one reduction per image so the value cannot depend on batch layout
    return torch.stack([xi.mean() for xi in x]).reshape(-1, 1, 1, 1)


def _rgb_to_hsv(x):
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    maxc = torch.max(torch.max(r, g), b)
    minc = torch.min(torch.min(r, g), b)
    eqc = maxc == minc
    cr = maxc - minc
    ones = torch.ones_like(maxc)
    s = cr / torch.where(eqc, ones, maxc)
    cr_div = torch.where(eqc, ones, cr)
    rc = (maxc - r) / cr_div
    gc = (maxc - g) / cr_div
    bc = (maxc - b) / cr_div
    hr = (maxc == r) * (bc - gc)
    hg = ((maxc == g) & (maxc != r)) * (2.0 + rc - bc)
    hb = ((maxc != g) & (maxc != r)) * (4.0 + gc - rc)
    h = torch.fmod((hr + hg + hb) / 6.0 + 1.0, 1.0)
    return h, s, maxc


def _hsv_to_rgb(h, s, v):
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.to(torch.int64) % 6
    p = (v * (1.0 - s)).clamp(0.0, 1.0)
    q = (v * (1.0 - s * f)).clamp(0.0, 1.0)
    t = (v * (1.0 - s * (1.0 - f))).clamp(0.0, 1.0)
    sel = [i == k for k in range(6)]
    r = torch.where(sel[0] | sel[5], v, torch.where(sel[1], q, torch.where(sel[4], t, p)))
    g = torch.where(sel[1] | sel[2], v, torch.where(sel[0], t, torch.where(sel[3], q, p)))
    b = torch.where(sel[3] | sel[4], v, torch.where(sel[2], t, torch.where(sel[5], q, p)))
    return torch.stack([r, g, b], dim=1)


def _jitter_op(name: str, x: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    f = f.reshape(-1, 1, 1, 1)
    if name == "brightness":
        return (x * f).clamp(0.0, 1.0)
    if name == "contrast":
        return _blend(x, _per_sample_mean(_gray(x)), f)
    if name == "saturation":
        return _blend(x, _gray(x), f)
    h, s, v = _rgb_to_hsv(x)
    h = torch.remainder(h + f[:, 0], 1.0)
    return _hsv_to_rgb(h, s, v)


def _color_jitter(x: torch.Tensor, params: list[Optional[dict]]) -> torch.Tensor:
    x = x.clone()
    for pos in range(4):
        for op_id, name in enumerate(_JITTER_OPS):
            idx = [i for i, p in enumerate(params) if p is not None and p["order"][pos] == op_id and p[name] is not None]
            if not idx:
                continue
            sel = torch.as_tensor(idx)
            f = torch.as_tensor([params[i][name] for i in idx], dtype=x.dtype)
            x[sel] = _jitter_op(name, x[sel], f)
    return x


def blur_radius(size: int) -> int:
    """Half-width of the Gaussian kernel for images of the given side length."""
    return max(1, round(0.05 * size))


def _gaussian_blur(x: torch.Tensor, sigmas: list[float]) -> torch.Tensor:
    n, _, H, W = x.shape
    radius = min(blur_radius(H), H - 1, W - 1)
    if radius < 1:
        return x
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(offs[None, :] ** 2) / (2.0 * np.asarray(sigmas, dtype=np.float64)[:, None] ** 2))
    k = torch.as_tensor(k / k.sum(axis=1, keepdims=True), dtype=x.dtype)
    pad = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    acc = sum(k[:, j].reshape(n, 1, 1, 1) * pad[:, :, :, j : j + W] for j in range(2 * radius + 1))
    pad = F.pad(acc, (0, 0, radius, radius), mode="reflect")
    out = sum(k[:, j].reshape(n, 1, 1, 1) * pad[:, :, j : j + H, :] for j in range(2 * radius + 1))
    return out.clamp(0.0, 1.0)


def _affine(img: torch.Tensor, matrix) -> torch.Tensor:
    theta = torch.as_tensor(matrix, dtype=img.dtype).reshape(1, 2, 3)
    grid = F.affine_grid(theta, [1, *img.shape], align_corners=False)
    return F.grid_sample(img[None], grid, mode="nearest", padding_mode="zeros", align_corners=False)[0]


def _magnitude(name: str, index: int, size: int) -> float:
    table = {
        "ShearX": 0.3,
        "ShearY": 0.3,
        "TranslateX": 150.0 / 331.0 * size,
        "TranslateY": 150.0 / 331.0 * size,
        "Rotate": 30.0,
        "Brightness": 0.9,
        "Color": 0.9,
        "Contrast": 0.9,
        "Sharpness": 0.9,
    }
    if name in table:
        return table[name] * index / (_RANDAUGMENT_BINS - 1)
    if name == "Posterize":
        return 8 - int(round(index / ((_RANDAUGMENT_BINS - 1) / 4)))
    if name == "Solarize":
        return 1.0 - index / (_RANDAUGMENT_BINS - 1)
    return 0.0


def _equalize(img: torch.Tensor) -> torch.Tensor:
    q = (img * 255.0).round().to(torch.int64)
    out = []
    for ch in q:
        hist = torch.bincount(ch.reshape(-1), minlength=256)
        nonzero = hist[hist > 0]
        step = (int(hist.sum()) - int(nonzero[-1])) // 255
        if step == 0:
            out.append(ch)
            continue
        lut = torch.div(torch.cumsum(hist, 0) + step // 2, step, rounding_mode="floor")
        lut = torch.cat([torch.zeros(1, dtype=lut.dtype), lut[:-1]]).clamp(0, 255)
        out.append(lut[ch])
    return torch.stack(out).to(img.dtype) / 255.0


def _randaugment_op(img: torch.Tensor, name: str, index: int, sign: float) -> torch.Tensor:
    size = img.shape[-1]
    m = _magnitude(name, index, size) * (sign if name in _SIGNED_OPS else 1.0)
    one = img.new_tensor([1.0 + m])
    if name == "Identity":
        return img
    if name == "ShearX":
        return _affine(img, [[1, m, 0], [0, 1, 0]])
    if name == "ShearY":
        return _affine(img, [[1, 0, 0], [m, 1, 0]])
    if name == "TranslateX":
        return _affine(img, [[1, 0, -2 * m / img.shape[-1]], [0, 1, 0]])
    if name == "TranslateY":
        return _affine(img, [[1, 0, 0], [0, 1, -2 * m / img.shape[-2]]])
    if name == "Rotate":
        a = math.radians(m)
        return _affine(img, [[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0]])
    if name == "Brightness":
        return _jitter_op("brightness", img[None], one)[0]
    if name == "Color":
        return _jitter_op("saturation", img[None], one)[0]
    if name == "Contrast":
        return _jitter_op("contrast", img[None], one)[0]
    if name == "Sharpness":
        kernel = img.new_tensor([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0
        smooth = F.conv2d(img[:, None], kernel[None, None], padding=1)[:, 0]
        smooth[:, 0, :], smooth[:, -1, :], smooth[:, :, 0], smooth[:, :, -1] = (
            img[:, 0, :], img[:, -1, :], img[:, :, 0], img[:, :, -1]
        )
        return _blend(img, smooth, one)
    if name == "Posterize":
        bits = int(m)
        q = (img * 255.0).round().to(torch.int64)
        mask = ~(2 ** (8 - bits) - 1) & 0xFF
        return (q & mask).to(img.dtype) / 255.0
    if name == "Solarize":
        return torch.where(img >= m, 1.0 - img, img)
    if name == "AutoContrast":
        lo = img.amin(dim=(1, 2), keepdim=True)
        hi = img.amax(dim=(1, 2), keepdim=True)
        scale = torch.where(hi > lo, 1.0 / (hi - lo), torch.ones_like(hi))
        lo = torch.where(hi > lo, lo, torch.zeros_like(lo))
        return ((img - lo) * scale).clamp(0.0, 1.0)
    if name == "Equalize":
        return _equalize(img)
    raise ConfigurationError(f"unknown RandAugment op {name!r}")


def _jigsaw(img: torch.Tensor, grid: int, perm: list[int]) -> torch.Tensor:
    c, H, W = img.shape
    if H % grid or W % grid:
        raise InputError(f"jigsaw grid {grid} does not divide view size {H}x{W}")
    sh, sw = H // grid, W // grid
    cells = img.reshape(c, grid, sh, grid, sw).permute(1, 3, 0, 2, 4).reshape(grid * grid, c, sh, sw)
    cells = cells[torch.as_tensor(perm)]
    return cells.reshape(grid, grid, c, sh, sw).permute(2, 0, 3, 1, 4).reshape(c, H, W)


def apply_batch(descriptors: list[TransformDescriptor], images: torch.Tensor, out_size: Optional[int] = None) -> torch.Tensor:
    """Apply ``descriptors[i]`` to ``images[i]`` for every ``i``; returns a new tensor."""
    if images.ndim != 4 or images.shape[0] != len(descriptors):
        raise InputError("need one descriptor per image in a [N, C, H, W] batch")
    n, c, H, W = images.shape
    out = out_size or min(H, W)
    if out > H or out > W:
        raise InputError(f"image {H}x{W} is smaller than the crop target {out}")
    crops, flips = [], []
    for d in descriptors:
        crop = d.get("crop")
        crops.append(crop if crop is not None else {"top": 0.0, "left": 0.0, "height": 1.0, "width": 1.0})
        flips.append(d.get("hflip") is not None)
    x = _resized_crop(images, crops, flips, out)

    jitter = [d.get("color_jitter") for d in descriptors]
    if any(p is not None for p in jitter):
        x = _color_jitter(x, jitter)

    gray_idx = [i for i, d in enumerate(descriptors) if d.get("grayscale") is not None]
    if gray_idx:
        sel = torch.as_tensor(gray_idx)
        x[sel] = _gray(x[sel]).expand(-1, c, -1, -1)

    blur_idx = [i for i, d in enumerate(descriptors) if d.get("gaussian_blur") is not None]
    if blur_idx:
        sel = torch.as_tensor(blur_idx)
        x[sel] = _gaussian_blur(x[sel], [descriptors[i].get("gaussian_blur")["sigma"] for i in blur_idx])

    for i, d in enumerate(descriptors):
        ra = d.get("randaugment")
        if ra is not None:
            img = x[i]
            for name, index, sign in ra["ops"]:
                img = _randaugment_op(img, name, index, sign)
            x[i] = img
        jig = d.get("jigsaw")
        if jig is not None:
            x[i] = _jigsaw(x[i], jig["grid"], jig["perm"])
    return x


def apply_transform(descriptor: TransformDescriptor, image: torch.Tensor, out_size: Optional[int] = None) -> torch.Tensor:
    """Replay one descriptor on one ``[C, H, W]`` image."""
    return apply_batch([descriptor], image[None], out_size)[0]


def generate_views(
    images: torch.Tensor,
    K: int,
    cfg: AugmentationConfig,
    seed: int,
    source_ids=None,
    stream: int = 0,
) -> ViewBatch:
    """Produce ``K`` independently augmented views of every image in a batch.

    The transform of instance ``i`` in view ``k`` comes from the substream
    keyed by ``(stream, source_ids[i], k)``, so batch composition has no
    effect on which transforms are drawn. ``stream`` is typically the epoch.
    """
    if K < 1:
        raise InputError("K must be >= 1")
    if images.ndim != 4 or images.shape[0] == 0:
        raise InputError("images must be a non-empty [B, C, H, W] batch")
    B, _, H, W = images.shape
    size = cfg.crop_size or min(H, W)
    if size > H or size > W:
        raise InputError(f"image {H}x{W} is smaller than the crop target {size}")
    ids = list(range(B)) if source_ids is None else [int(i) for i in source_ids]
    if len(ids) != B:
        raise InputError("source_ids must have one entry per image")
    descriptors = [[sample_transform(cfg, derive_rng(seed, stream, sid, k)) for sid in ids] for k in range(K)]
    flat = [d for per_view in descriptors for d in per_view]
    stacked = apply_batch(flat, images.repeat(K, 1, 1, 1), size)
    views = list(stacked.split(B))
    return ViewBatch(views=views, descriptors=descriptors, source_ids=ids)


def center_crop(images: torch.Tensor, size: int) -> torch.Tensor:
    """Deterministic center crop used at test time."""
    H, W = images.shape[-2:]
    if size > H or size > W:
        raise InputError(f"image {H}x{W} is smaller than the crop target {size}")
    top, left = (H - size) // 2, (W - size) // 2
    return images[..., top : top + size, left : left + size]
