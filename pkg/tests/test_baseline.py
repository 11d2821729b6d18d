"""Bicubic + masked temporal averaging baseline tests."""

import numpy as np

from tempsr import baseline, data
from tempsr.data import SceneRecord


def make_scene(frames, masks):
    return SceneRecord("imgset0000", "synthetic", list(frames), list(masks))


class TestBicubicUpsample:
    def test_constant_image_preserved(self):
        out = baseline.bicubic_upsample(np.full((4, 4), 7.5), 3)
        np.testing.assert_allclose(out, np.full((12, 12), 7.5), rtol=1e-12)

    def test_r1_identity(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 100, size=(5, 5))
        np.testing.assert_array_equal(baseline.bicubic_upsample(img, 1), img)

    def test_separable_matches_direct_2d(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 100, size=(6, 6))
        out = baseline.bicubic_upsample(img, 2)
        # direct 2-D tap evaluation at an interior output pixel
        iy, wy = baseline._cubic_taps(6, 2)
        ix, wx = baseline._cubic_taps(6, 2)
        for oy, ox in [(5, 6), (4, 4)]:
            val = 0.0
            for a in range(4):
                for b in range(4):
                    val += wy[oy, a] * wx[ox, b] * img[iy[oy, a], ix[ox, b]]
            np.testing.assert_allclose(out[oy, ox], val, rtol=1e-12)


class TestBicubicAverage:
    def test_single_constant_frame(self):
        frame = np.full((4, 4), 1200.0)
        out = baseline.bicubic_average(make_scene([frame], [np.ones((4, 4), dtype=bool)]), r=3)
        np.testing.assert_allclose(out, np.full((12, 12), 1200.0), rtol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        frames = [rng.uniform(0, 60000, size=(6, 6)) for _ in range(4)]
        masks = [rng.random((6, 6)) > 0.2 for _ in range(4)]
        base = baseline.bicubic_average(make_scene(frames, masks), r=3)
        for _ in range(5):
            perm = rng.permutation(4)
            out = baseline.bicubic_average(
                make_scene([frames[i] for i in perm], [masks[i] for i in perm]), r=3
            )
            np.testing.assert_allclose(out, base, atol=1e-6)

    def test_matches_per_pixel_masked_mean_oracle(self):
        rng = np.random.default_rng(3)
        frames = [rng.uniform(0, 60000, size=(5, 5)) for _ in range(3)]
        masks = [rng.random((5, 5)) > 0.3 for _ in range(3)]
        out = baseline.bicubic_average(make_scene(frames, masks), r=2)
        ups = [baseline.bicubic_upsample(f, 2) for f in frames]
        mups = [baseline.upsample_mask_nearest(m, 2) for m in masks]
        for y in range(10):
            for x in range(10):
                vals = [u[y, x] for u, m in zip(ups, mups) if m[y, x]]
                expected = np.mean(vals) if vals else np.mean([u[y, x] for u in ups])
                np.testing.assert_allclose(out[y, x], expected, rtol=1e-6)

    def test_fully_occluded_pixel_falls_back_to_unmasked_mean(self):
        rng = np.random.default_rng(4)
        frames = [rng.uniform(0, 60000, size=(4, 4)) for _ in range(2)]
        masks = [np.ones((4, 4), dtype=bool) for _ in range(2)]
        for m in masks:
            m[1, 1] = False
        out = baseline.bicubic_average(make_scene(frames, masks), r=1)
        expected = np.mean([frames[0][1, 1], frames[1][1, 1]])
        np.testing.assert_allclose(out[1, 1], expected, rtol=1e-12)
        assert np.isfinite(out).all()

    def test_on_synthetic_scene_reasonable_range(self):
        cfg = data.SynthConfig(n_scenes=1, frames=4, lr_size=16)
        scene = data.generate_synthetic(cfg, seed=5)[0]
        out = baseline.bicubic_average(scene, r=3)
        assert out.shape == (48, 48)
        assert out.min() >= -5000 and out.max() <= 70000
