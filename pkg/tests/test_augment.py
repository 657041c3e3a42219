import colorsys
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from siamlab.augment import (
    AugmentationConfig,
    TransformDescriptor,
    apply_batch,
    apply_transform,
    blur_radius,
    center_crop,
    derive_rng,
    generate_views,
    identity_augmentation,
    linear_eval_augmentation,
    preset,
    sample_transform,
)
from siamlab.errors import ConfigurationError, InputError


def _images(n=4, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g)


def _only(*records):
    return TransformDescriptor(tuple(records))


FULL = ("crop", {"top": 0.0, "left": 0.0, "height": 1.0, "width": 1.0})


class TestPresets:
    def test_default_values(self):
        cfg = preset("default")
        assert cfg.blur_sigma == (0.1, 2.0)
        assert cfg.jitter_strengths == (0.4, 0.4, 0.4, 0.1)
        assert cfg.randaugment is None and cfg.jigsaw_grid is None

    def test_strong_values(self):
        base, strong = preset("default"), preset("strong")
        assert strong.blur_sigma == (0.2, 3.0)
        for i in range(3):
            np.testing.assert_allclose(strong.jitter_strengths[i], base.jitter_strengths[i] + 0.4)
        assert strong.jitter_strengths[3] == base.jitter_strengths[3]
        assert strong.randaugment is None and strong.jigsaw_grid is None

    def test_very_strong_values(self):
        vs = preset("very_strong")
        assert vs.randaugment == (2, 5)
        assert vs.jigsaw_grid == 4
        assert vs.blur_sigma == (0.2, 3.0)

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            preset("extreme")

    def test_linear_eval_is_crop_and_flip(self):
        cfg = linear_eval_augmentation()
        assert cfg.jitter_prob == cfg.grayscale_prob == cfg.blur_prob == 0.0
        assert cfg.hflip_prob == 0.5

    @pytest.mark.parametrize(
        "kwargs",
        [{"hflip_prob": 1.5}, {"crop_scale": (0.5, 0.2)}, {"blur_sigma": (-1.0, 1.0)}, {"jitter_strengths": (0.4, 0.4, 0.4, 0.7)}],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            AugmentationConfig(**kwargs)


class TestSampling:
    def test_hflip_frequency(self):
        cfg = AugmentationConfig(hflip_prob=0.5)
        flips = sum(sample_transform(cfg, derive_rng(0, i)).get("hflip") is not None for i in range(10_000))
        assert abs(flips / 10_000 - 0.5) < 0.02

    @pytest.mark.parametrize("field,op,p", [("grayscale_prob", "grayscale", 0.2), ("blur_prob", "gaussian_blur", 0.5)])
    def test_op_frequency(self, field, op, p):
        cfg = replace(AugmentationConfig(), **{field: p})
        hits = sum(sample_transform(cfg, derive_rng(1, i)).get(op) is not None for i in range(10_000))
        assert abs(hits / 10_000 - p) < 0.02

    def test_crop_area_within_scale(self):
        cfg = AugmentationConfig(crop_scale=(0.2, 1.0))
        for i in range(2000):
            c = sample_transform(cfg, derive_rng(2, i)).get("crop")
            assert 0.2 - 1e-12 <= c["height"] * c["width"] <= 1.0 + 1e-12
            assert c["top"] >= 0 and c["left"] >= 0
            assert c["top"] + c["height"] <= 1 + 1e-12 and c["left"] + c["width"] <= 1 + 1e-12

    def test_views_of_one_image_are_independent(self):
        imgs = _images(1, 16)
        cfg = preset("default")
        tops = np.array(
            [[d[0].get("crop")["top"] for d in generate_views(imgs, 2, cfg, seed=3, stream=s).descriptors] for s in range(2000)]
        )
        assert abs(np.corrcoef(tops[:, 0], tops[:, 1])[0, 1]) < 0.05

    def test_blur_sigma_range(self):
        cfg = preset("strong")
        for i in range(500):
            b = sample_transform(cfg, derive_rng(4, i)).get("gaussian_blur")
            if b is not None:
                assert 0.2 <= b["sigma"] <= 3.0

    def test_descriptor_json_round_trip(self):
        d = sample_transform(preset("very_strong"), derive_rng(5))
        assert TransformDescriptor.from_json(d.to_json()).to_json() == d.to_json()


class TestAppliers:
    def test_identity_config_is_exact(self):
        imgs = _images()
        views = generate_views(imgs, 3, identity_augmentation(), seed=0)
        for v in views.views:
            np.testing.assert_array_equal(v.numpy(), imgs.numpy())

    def test_aligned_crop_is_slicing(self):
        imgs = _images(2, 16)
        crop = ("crop", {"top": 0.25, "left": 0.5, "height": 0.5, "width": 0.5})
        out = apply_batch([_only(crop)] * 2, imgs, 8)
        np.testing.assert_array_equal(out.numpy(), imgs[:, :, 4:12, 8:16].numpy())

    def test_hflip(self):
        imgs = _images(2, 8)
        out = apply_batch([_only(FULL, ("hflip", {}))] * 2, imgs)
        np.testing.assert_array_equal(out.numpy(), imgs.flip(-1).numpy())

    def test_downscale_by_two_averages_pixel_pairs(self):
        # half-size output samples halfway between source pixels
        imgs = _images(1, 8)
        out = apply_batch([_only(FULL)], imgs, 4).numpy()
        x = imgs.numpy()
        ref = 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_grayscale_weights(self):
        imgs = _images(1, 6)
        out = apply_batch([_only(FULL, ("grayscale", {}))], imgs)[0].numpy()
        x = imgs[0].numpy().astype(np.float64)
        ref = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
        for c in range(3):
            np.testing.assert_allclose(out[c], ref, atol=1e-6)

    def test_brightness(self):
        imgs = _images(1, 6)
        jit = {"order": [0, 1, 2, 3], "brightness": 1.3, "contrast": None, "saturation": None, "hue": None}
        out = apply_batch([_only(FULL, ("color_jitter", jit))], imgs).numpy()
        np.testing.assert_allclose(out, np.clip(imgs.numpy() * 1.3, 0, 1), atol=1e-6)

    def test_hue_shift_against_colorsys(self):
        imgs = _images(1, 5, seed=7).double()
        jit = {"order": [3, 0, 1, 2], "brightness": None, "contrast": None, "saturation": None, "hue": 0.07}
        out = apply_batch([_only(FULL, ("color_jitter", jit))], imgs)[0].numpy()
        x = imgs[0].numpy()
        for i in range(5):
            for j in range(5):
                h, s, v = colorsys.rgb_to_hsv(*x[:, i, j])
                ref = colorsys.hsv_to_rgb((h + 0.07) % 1.0, s, v)
                np.testing.assert_allclose(out[:, i, j], ref, atol=1e-9)

    def test_gaussian_blur_against_numpy(self):
        imgs = _images(1, 20, seed=3).double()
        sigma = 1.3
        out = apply_batch([_only(FULL, ("gaussian_blur", {"sigma": sigma}))], imgs)[0].numpy()
        r = blur_radius(20)
        k = np.array([np.exp(-(t**2) / (2 * sigma**2)) for t in range(-r, r + 1)])
        k /= k.sum()
        x = imgs[0].numpy()
        padded = np.pad(x, ((0, 0), (r, r), (r, r)), mode="reflect")
        ref = np.zeros_like(x)
        for c in range(3):
            for i in range(20):
                for j in range(20):
                    ref[c, i, j] = k @ padded[c, i : i + 2 * r + 1, j : j + 2 * r + 1] @ k
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_jigsaw_permutes_tiles(self):
        img = torch.arange(16.0).reshape(1, 1, 4, 4).expand(1, 3, 4, 4) / 16
        perm = [3, 2, 1, 0]
        out = apply_batch([_only(FULL, ("jigsaw", {"grid": 2, "perm": perm}))], img.clone())[0, 0]
        tiles = [img[0, 0, :2, :2], img[0, 0, :2, 2:], img[0, 0, 2:, :2], img[0, 0, 2:, 2:]]
        np.testing.assert_array_equal(out[:2, :2].numpy(), tiles[3].numpy())
        np.testing.assert_array_equal(out[2:, 2:].numpy(), tiles[0].numpy())

    def test_jigsaw_needs_divisible_size(self):
        with pytest.raises(InputError):
            apply_batch([_only(FULL, ("jigsaw", {"grid": 4, "perm": list(range(16))}))], _images(1, 18))

    @pytest.mark.parametrize("name", ["default", "strong", "very_strong"])
    def test_range_preserved(self, name):
        views = generate_views(_images(8, 16), 2, preset(name), seed=1)
        for v in views.views:
            assert float(v.min()) >= 0.0 and float(v.max()) <= 1.0

    def test_crop_too_large(self):
        with pytest.raises(InputError):
            generate_views(_images(1, 8), 2, preset("default", crop_size=16), seed=0)

    def test_center_crop(self):
        imgs = _images(1, 10)
        np.testing.assert_array_equal(center_crop(imgs, 6).numpy(), imgs[..., 2:8, 2:8].numpy())


class TestReplay:
    @pytest.mark.parametrize("name", ["default", "strong", "very_strong"])
    def test_replay_is_bitwise(self, name):
        imgs = _images(6, 16, seed=2)
        views = generate_views(imgs, 2, preset(name), seed=11)
        for k in range(2):
            for b in range(6):
                again = apply_transform(views.descriptors[k][b], imgs[b])
                assert again.numpy().tobytes() == views.views[k][b].numpy().tobytes()

    def test_same_seed_same_views(self):
        imgs = _images()
        a = generate_views(imgs, 4, preset("default"), seed=5, stream=2)
        b = generate_views(imgs, 4, preset("default"), seed=5, stream=2)
        for u, v in zip(a.views, b.views):
            assert torch.equal(u, v)

    def test_batch_composition_irrelevant(self):
        imgs = _images(6)
        full = generate_views(imgs, 2, preset("default"), seed=5, source_ids=range(6))
        part = generate_views(imgs[3:5], 2, preset("default"), seed=5, source_ids=[3, 4])
        for k in range(2):
            assert full.views[k][3:5].numpy().tobytes() == part.views[k].numpy().tobytes()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["default", "strong", "very_strong"]))
    def test_replay_property(self, seed, name):
        img = _images(1, 16, seed=seed % 1000)[0]
        d = sample_transform(preset(name), derive_rng(seed))
        a = apply_transform(d, img)
        b = apply_transform(TransformDescriptor.from_json(d.to_json()), img.clone())
        assert a.numpy().tobytes() == b.numpy().tobytes()
