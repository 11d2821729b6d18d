"""cPSNR / cSSIM oracle tests and report round-trips."""

import math

import numpy as np
import pytest

from tempsr import metrics
from tempsr.losses import EmptyMaskError, ShiftSearchConfig
from tempsr.metrics import MAX_INTENSITY


def cpsnr_oracle(sr, hr, mask, cfg):
    """Explicit 49-shift brute force straight from the metric definition."""
    c, s = cfg.crop, cfg.max_shift
    h = sr.shape[0] - 2 * c
    w = sr.shape[1] - 2 * c
    sr_c = sr[c : c + h, c : c + w]
    best = None
    for u in range(s + 1):
        for v in range(s + 1):
            hr_w = hr[u : u + h, v : v + w]
            m_w = mask[u : u + h, v : v + w]
            n = m_w.sum()
            if n == 0:
                continue
            b = ((hr_w - sr_c) * m_w).sum() / n
            mse = (((hr_w - (sr_c + b)) * m_w) ** 2).sum() / n
            value = math.inf if mse == 0 else 10 * math.log10(MAX_INTENSITY**2 / mse)
            if best is None or value > best[0]:
                best = (value, u, v, b)
    return best


def random_images(rng, size=20):
    sr = rng.uniform(0, MAX_INTENSITY, size=(size, size))
    hr = rng.uniform(0, MAX_INTENSITY, size=(size, size))
    mask = (rng.random((size, size)) > 0.25).astype(float)
    return sr, hr, mask


class TestCpsnr:
    def test_perfect_reconstruction_up_to_bias_is_inf(self):
        # integer-valued intensities, as in real 16-bit data, keep the bias
        # arithmetic exact so a bias-only error yields MSE exactly 0
        rng = np.random.default_rng(0)
        hr = rng.integers(2000, MAX_INTENSITY, size=(16, 16)).astype(np.float64)
        res = metrics.cpsnr(hr - 1234.0, hr, np.ones_like(hr))
        assert res.value_db == math.inf
        # zero relative displacement sits at window offset (crop, crop)
        assert (res.u, res.v) == (3, 3)
        np.testing.assert_allclose(res.bias, 1234.0, rtol=1e-9)

    def test_zero_db_identity(self):
        # alternating ±MAX residual has zero mean, so the bias vanishes and
        # every window MSE is exactly MAX², i.e. 0 dB
        size = 16
        hr = np.zeros((size, size))
        sr = np.fromfunction(lambda i, j: ((i + j) % 2 * 2 - 1) * float(MAX_INTENSITY), (size, size))
        res = metrics.cpsnr(sr, hr, np.ones_like(hr))
        np.testing.assert_allclose(res.value_db, 0.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_equals_brute_force_oracle(self, seed):
        rng = np.random.default_rng(300 + seed)
        sr, hr, mask = random_images(rng)
        cfg = ShiftSearchConfig()
        res = metrics.cpsnr(sr, hr, mask, cfg)
        value, u, v, b = cpsnr_oracle(sr, hr, mask, cfg)
        assert res.value_db == value
        assert (res.u, res.v) == (u, v)
        assert res.bias == b

    def test_max_property(self):
        rng = np.random.default_rng(1)
        sr, hr, mask = random_images(rng)
        cfg = ShiftSearchConfig()
        res = metrics.cpsnr(sr, hr, mask, cfg)
        c = cfg.crop
        h = sr.shape[0] - 2 * c
        sr_c = sr[c : c + h, c : c + h]
        for u in range(cfg.max_shift + 1):
            for v in range(cfg.max_shift + 1):
                hr_w = hr[u : u + h, v : v + h]
                m_w = mask[u : u + h, v : v + h]
                n = m_w.sum()
                b = ((hr_w - sr_c) * m_w).sum() / n
                mse = (((hr_w - (sr_c + b)) * m_w) ** 2).sum() / n
                assert res.value_db >= 10 * math.log10(MAX_INTENSITY**2 / mse) - 1e-12

    def test_invariant_to_constant_offset(self):
        rng = np.random.default_rng(2)
        sr, hr, mask = random_images(rng)
        a = metrics.cpsnr(sr, hr, mask)
        b = metrics.cpsnr(sr + 1000.0, hr, mask)
        assert abs(a.value_db - b.value_db) < 1e-9

    def test_empty_mask_raises(self):
        z = np.zeros((16, 16))
        with pytest.raises(EmptyMaskError):
            metrics.cpsnr(z, z, np.zeros_like(z))

    def test_inf_renders_as_inf_string(self):
        assert f"{math.inf}" == "inf"
        assert repr(math.inf) == "inf"


class TestCssim:
    def test_identical_images_score_one(self):
        rng = np.random.default_rng(3)
        hr = rng.uniform(0, MAX_INTENSITY, size=(24, 24))
        value = metrics.cssim(hr.copy(), hr, np.ones_like(hr))
        np.testing.assert_allclose(value, 1.0, atol=1e-9)

    def test_anticorrelated_patches_negative(self):
        size = 24
        checker = np.fromfunction(lambda i, j: ((i + j) % 2 * 2 - 1) * 20000.0, (size, size))
        a = 30000.0 + checker
        b = 30000.0 - checker
        value = metrics.ssim_map(a, b).mean()
        assert value < 0

    def test_matches_direct_windowed_statistics_oracle(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0, MAX_INTENSITY, size=(18, 18))
        b = a + rng.normal(scale=2000.0, size=(18, 18))
        smap = metrics.ssim_map(a, b)
        # direct 2-D windowed statistics at a few positions
        g = metrics._gaussian_window(11, 1.5)
        w2 = np.outer(g, g)
        c1 = (0.01 * MAX_INTENSITY) ** 2
        c2 = (0.03 * MAX_INTENSITY) ** 2
        for i, j in [(0, 0), (3, 5), (7, 2)]:
            wa = a[i : i + 11, j : j + 11]
            wb = b[i : i + 11, j : j + 11]
            mu_a = (w2 * wa).sum()
            mu_b = (w2 * wb).sum()
            var_a = (w2 * wa * wa).sum() - mu_a**2
            var_b = (w2 * wb * wb).sum() - mu_b**2
            cov = (w2 * wa * wb).sum() - mu_a * mu_b
            expected = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            np.testing.assert_allclose(smap[i, j], expected, rtol=1e-6)

    def test_value_in_range(self):
        rng = np.random.default_rng(5)
        sr, hr, mask = random_images(rng, size=24)
        value = metrics.cssim(sr, hr, mask)
        assert -1.0 <= value <= 1.0

    def test_small_image_rejected(self):
        z = np.zeros((8, 8))
        with pytest.raises(ValueError, match="window"):
            metrics.ssim_map(z, z)


class TestEvalReport:
    def test_csv_round_trip(self, tmp_path):
        report = metrics.EvalReport(
            band="synthetic",
            scores=[
                metrics.SceneScore("imgset0000", 47.25, 0.981, 2, 3, 15.5),
                metrics.SceneScore("imgset0001", math.inf, 1.0, 0, 0, 0.0),
            ],
        )
        path = tmp_path / "report.csv"
        report.write_csv(path)
        text = path.read_text()
        assert "inf" in text
        back = metrics.EvalReport.read_csv(path, band="synthetic")
        assert back.scores[0].scene_id == "imgset0000"
        assert back.scores[0].cpsnr == 47.25
        assert back.scores[1].cpsnr == math.inf

    def test_aggregates(self):
        report = metrics.EvalReport(
            band="x",
            scores=[metrics.SceneScore("a", 40.0, 0.9, 0, 0, 0.0), metrics.SceneScore("b", 50.0, 1.0, 0, 0, 0.0)],
        )
        assert report.mean_cpsnr() == 45.0
        np.testing.assert_allclose(report.mean_cssim(), 0.95)
