import math

import numpy as np
import pytest

from oracles import clahe_oracle, shift_oracle, smooth_image

from eyessl.core import EyeImage, LabelMask, ParameterError, seeded_rng
from eyessl.augment import (
    BasicAugConfig,
    DomainAugConfig,
    SpatialAugConfig,
    SpatialTransform,
    apply_spatial,
    basic_augment,
    clahe,
    gamma_correct,
    hflip,
    invert_spatial,
    sample_T,
    sample_domain_aug,
    validity_of,
)


# ---------------------------------------------------------------------------
# sampling distributions


class TestSampling:
    def test_domain_draw_deterministic(self):
        a = sample_domain_aug(seeded_rng(5))
        b = sample_domain_aug(seeded_rng(5))
        assert a == b

    def test_clip_grid_pair_frequencies(self):
        rng = seeded_rng(0)
        cfg = DomainAugConfig()
        draws = [sample_domain_aug(rng, cfg) for _ in range(10_000)]
        pairs = [(d.clahe_clip, d.clahe_grid) for d in draws]
        for clip, grid in zip(cfg.clahe_clips, cfg.clahe_grids):
            freq = sum(1 for p in pairs if p == (clip, grid)) / len(pairs)
            expected = sum(
                1 for c, g in zip(cfg.clahe_clips, cfg.clahe_grids) if (c, g) == (clip, grid)
            ) / len(cfg.clahe_clips)
            assert abs(freq - expected) < 0.02
        # the repeated (1.5, 8) entry carries half the probability mass
        mass_15 = sum(1 for d in draws if d.clahe_clip == 1.5) / len(draws)
        assert abs(mass_15 - 0.5) < 0.02

    def test_gamma_only_from_grid(self):
        rng = seeded_rng(1)
        cfg = DomainAugConfig()
        seen = {sample_domain_aug(rng, cfg).gamma for _ in range(10_000)}
        assert seen == set(cfg.gammas)

    def test_transform_probabilities(self):
        rng = seeded_rng(2)
        draws = [sample_T(rng) for _ in range(10_000)]
        applied = [d for d in draws if d.applied]
        assert abs(1 - len(applied) / len(draws) - 0.5) < 0.02
        translated = sum(1 for d in applied if d.shift != (0, 0)) / len(applied)
        assert abs(translated - 0.8) < 0.02
        rotated = sum(1 for d in applied if d.angle_deg != 0.0) / len(applied)
        assert abs(rotated - 0.5) < 0.02
        assert all(-5.0 <= d.angle_deg <= 5.0 for d in draws)
        assert all(-20 <= d.shift[0] <= 20 and -20 <= d.shift[1] <= 20 for d in draws)

    def test_identity_when_disabled(self):
        cfg = SpatialAugConfig(t_prob=0.0)
        assert all(not sample_T(seeded_rng(i), cfg).applied for i in range(50))


# ---------------------------------------------------------------------------
# photometric ops


class TestGamma:
    def test_identity(self):
        img = smooth_image(16, 16)
        assert np.array_equal(gamma_correct(img, 1.0), img)

    def test_quarter_to_half(self):
        assert gamma_correct(np.array([[0.25] * 8] * 8, dtype=np.float32), 0.5)[0, 0] == pytest.approx(0.5)

    def test_fixed_points(self):
        img = np.zeros((8, 8), dtype=np.float32)
        img[0, 0] = 1.0
        for g in (0.5, 1.0, 2.3):
            out = gamma_correct(img, g)
            assert out[0, 0] == 1.0 and out[1, 1] == 0.0

    def test_rejects_nonpositive(self):
        with pytest.raises(ParameterError):
            gamma_correct(np.zeros((8, 8), dtype=np.float32), 0.0)

    def test_range_preserved(self):
        rng = seeded_rng(3)
        img = rng.random((16, 16)).astype(np.float32)
        for g in (0.8, 1.2):
            out = gamma_correct(img, g)
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestClahe:
    def test_constant_image_unchanged(self):
        for level in (0, 100, 255):
            img = np.full((16, 16), level / 255.0, dtype=np.float32)
            out = clahe(img, 2.0, 2)
            assert np.allclose(out, img, atol=1e-7)

    def test_matches_scalar_oracle(self):
        rng = seeded_rng(4)
        img = (rng.random((8, 8)) > 0.5).astype(np.float32) * 0.6 + 0.2
        out = clahe(img, 2.0, 2)
        ref = clahe_oracle(img, 2.0, 2)
        assert np.allclose(out, ref, atol=1e-10)

    def test_matches_oracle_random_images(self):
        rng = seeded_rng(5)
        for trial in range(3):
            img = rng.random((12, 16)).astype(np.float32)
            clip, grid = [(1.0, 2), (1.5, 4), (2.0, 3)][trial]
            assert np.allclose(clahe(img, clip, grid), clahe_oracle(img, clip, grid), atol=1e-10)

    def test_huge_clip_equals_unclipped(self):
        rng = seeded_rng(6)
        img = rng.random((16, 16)).astype(np.float32)

        def ahe_unclipped(img, grid, nbins=256):
            # same tiling/interpolation but with clipping disabled
            return clahe_oracle(img, float(nbins), grid, nbins)

        assert np.allclose(clahe(img, 256.0, 4), ahe_unclipped(img, 4), atol=1e-10)

    def test_range_and_params(self):
        rng = seeded_rng(7)
        img = rng.random((16, 24)).astype(np.float32)
        out = clahe(img, 1.5, 8)
        assert out.min() >= 0.0 and out.max() <= 1.0
        with pytest.raises(ParameterError):
            clahe(img, 1.5, 0)
        with pytest.raises(ParameterError):
            clahe(img, 0.5, 2)


# ---------------------------------------------------------------------------
# spatial warp


class TestSpatial:
    def test_identity_transform(self):
        img = smooth_image(16, 20)
        t = SpatialTransform(applied=False)
        assert np.array_equal(apply_spatial(img, t), img)

    def test_integer_shift_moves_pixel(self):
        img = np.zeros((16, 16), dtype=np.float32)
        img[8, 10] = 1.0
        t = SpatialTransform(shift=(0, 5), applied=True)
        out = apply_spatial(img, t)
        assert out[8, 5] == 1.0 and out.sum() == 1.0

    def test_integer_shift_matches_oracle(self):
        rng = seeded_rng(8)
        img = rng.random((12, 14)).astype(np.float32)
        for dy, dx in ((0, 5), (3, -2), (-4, 4), (7, 0)):
            t = SpatialTransform(shift=(dy, dx), applied=True)
            assert np.array_equal(apply_spatial(img, t), shift_oracle(img, dy, dx))

    def test_shift_roundtrip_exact_on_valid(self):
        rng = seeded_rng(9)
        img = rng.random((16, 20)).astype(np.float32)
        t = SpatialTransform(shift=(3, -5), applied=True)
        back = apply_spatial(apply_spatial(img, t), t.inverse())
        valid = validity_of(t, img.shape).valid
        assert np.array_equal(back[valid > 0.99], img[valid > 0.99])

    def test_rotation_roundtrip_interior(self):
        img = smooth_image(64, 96)
        rng = seeded_rng(10)
        cfg = SpatialAugConfig(t_prob=1.0)
        for _ in range(10):
            t = sample_T(rng, cfg)
            out = apply_spatial(img, t)
            src = _invert_image(out, t)
            interior = np.zeros(img.shape, dtype=bool)
            interior[10:-10, 10:-10] = True
            valid = validity_of(t, img.shape).valid > 0.99
            sel = interior & valid
            assert np.abs(src[sel] - img[sel]).max() <= 0.02

    def test_validity_pure_shift_geometry(self):
        t = SpatialTransform(shift=(0, 20), applied=True)
        v = validity_of(t, (32, 64)).valid
        assert np.all(v[:, :20] == 0.0)
        assert np.all(v[:, 20:] == 1.0)

    def test_inverse_parameters(self):
        t = SpatialTransform(angle_deg=3.0, shift=(4, -7), applied=True)
        inv = t.inverse()
        assert inv.angle_deg == -3.0 and inv.shift == (-4, 7)


def _invert_image(arr, t):
    from eyessl.augment import _resample, _sample_coords  # round trip via the inverse map

    out = _resample(arr[None].astype(np.float64), _sample_coords(arr.shape, t, inverse=True), "bilinear")
    return out[0]


class TestInvertSpatial:
    def test_identity_passthrough(self):
        probs = np.random.default_rng(0).dirichlet(np.ones(4), size=(8, 10)).transpose(2, 0, 1)
        probs = probs.astype(np.float32)
        out, v = invert_spatial(probs, SpatialTransform(applied=False))
        assert np.array_equal(out.probs, probs)
        assert np.all(v.valid == 1.0)

    def test_shift_validity_columns(self):
        t = SpatialTransform(shift=(0, 20), applied=True)
        probs = np.full((4, 32, 64), 0.25, dtype=np.float32)
        _, v = invert_spatial(probs, t)
        assert np.all(v.valid[:, :20] == 0.0)
        assert np.all(v.valid[:, 20:] == 1.0)

    def test_onehot_integer_shift_exact_reverse(self):
        rng = seeded_rng(11)
        cls = rng.integers(0, 4, size=(16, 20))
        onehot = np.zeros((4, 16, 20), dtype=np.float32)
        np.put_along_axis(onehot, cls[None], 1.0, axis=0)
        t = SpatialTransform(shift=(2, -6), applied=True)
        fwd = apply_spatial(onehot, t)
        back, v = invert_spatial(fwd, t)
        good = v.valid > 0.99
        assert np.array_equal(back.probs[:, good], onehot[:, good])

    def test_simplex_on_valid_region(self):
        rng = seeded_rng(12)
        probs = rng.dirichlet(np.ones(4), size=(32, 48)).transpose(2, 0, 1).astype(np.float32)
        cfg = SpatialAugConfig(t_prob=1.0)
        for _ in range(5):
            t = sample_T(rng, cfg)
            fwd = apply_spatial(probs, t)
            back, v = invert_spatial(fwd, t)
            good = v.valid > 0.99
            sums = back.probs.sum(axis=0)[good]
            if sums.size:
                assert np.abs(sums - 1.0).max() <= 1e-5


# ---------------------------------------------------------------------------
# baseline augmentation


class TestBasicAugment:
    def _item(self, seed=13):
        rng = seeded_rng(seed)
        img = EyeImage(rng.random((16, 20)).astype(np.float32), frame_id="f")
        mask = LabelMask(rng.integers(0, 4, size=(16, 20)))
        return img, mask

    def test_all_probs_zero_identity(self):
        img, mask = self._item()
        cfg = BasicAugConfig(p_flip=0.0, p_blur=0.0, p_lines=0.0)
        out_img, out_mask = basic_augment(img, mask, seeded_rng(0), cfg)
        assert np.array_equal(out_img.pixels, img.pixels)
        assert np.array_equal(out_mask.classes, mask.classes)

    def test_flip_is_involution(self):
        img, _ = self._item()
        assert np.array_equal(hflip(hflip(img.pixels)), img.pixels)

    def test_flip_mirrors_mask_and_keeps_histogram(self):
        img, mask = self._item()
        cfg = BasicAugConfig(p_flip=1.0, p_blur=0.0, p_lines=0.0)
        out_img, out_mask = basic_augment(img, mask, seeded_rng(1), cfg)
        assert np.array_equal(out_img.pixels, img.pixels[:, ::-1])
        assert np.array_equal(out_mask.classes, mask.classes[:, ::-1])
        assert np.array_equal(
            np.bincount(out_mask.classes.ravel(), minlength=4),
            np.bincount(mask.classes.ravel(), minlength=4),
        )

    def test_photometric_parts_leave_mask_alone(self):
        img, mask = self._item()
        cfg = BasicAugConfig(p_flip=0.0, p_blur=1.0, p_lines=1.0)
        out_img, out_mask = basic_augment(img, mask, seeded_rng(2), cfg)
        assert out_mask is mask
        assert out_img.pixels.min() >= 0.0 and out_img.pixels.max() <= 1.0

    def test_output_in_range(self):
        img, mask = self._item()
        for seed in range(10):
            out_img, _ = basic_augment(img, mask, seeded_rng(seed))
            assert out_img.pixels.min() >= 0.0 and out_img.pixels.max() <= 1.0


class TestSpatialMaskLockstep:
    def test_image_and_hard_mask_share_geometry(self):
        # spatial ops move a mask (nearest-neighbor) exactly like the image
        rng = seeded_rng(20)
        cls = rng.integers(0, 4, size=(16, 20))
        img = (cls.astype(np.float32) / 3.0)
        t = SpatialTransform(shift=(3, -4), applied=True)
        img_w = apply_spatial(img, t)
        mask_w = apply_spatial(cls, t, order="nearest")
        assert mask_w.dtype == cls.dtype
        # integer shift: both are pure index moves, so they stay aligned
        assert np.array_equal((mask_w.astype(np.float32) / 3.0), img_w)
