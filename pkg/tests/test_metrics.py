import math

import numpy as np
import pytest

from selfsvd.core import Frame
from selfsvd.errors import InvalidConfig
from selfsvd.flow import BlockMatchingBackend, ExternalBackend
from selfsvd.metrics import (
    EvalReport,
    aligned_psnr,
    aligned_ssim,
    make_eval_target,
    smoke_density_proxy,
)

BACKEND = BlockMatchingBackend(search_radius=4, block_size=8)


def identity_backend():
    return ExternalBackend(lambda a, b: (np.zeros(a.shape[:2]), np.zeros(a.shape[:2])))


class TestAlignedPSNR:
    def test_identical_capped_at_100(self, rng):
        img = rng.random((32, 32, 3))
        assert aligned_psnr(img, img, BACKEND) == 100.0

    def test_uniform_error_formula(self, rng):
        target = (rng.random((32, 32, 3)) * 0.8).astype(np.float64)
        result = target + 0.1
        psnr = aligned_psnr(result, target, identity_backend())
        assert math.isclose(psnr, 20.0, abs_tol=1e-9)  # 10*log10(1/0.01)

    def test_shift_equals_unshifted_on_valid_region(self, rng):
        target = rng.random((48, 48, 3))
        noisy = np.clip(target + rng.normal(0, 0.05, target.shape), 0, 1)
        base = aligned_psnr(noisy, target, BACKEND)
        shifted = np.roll(noisy, 2, axis=1)
        moved = aligned_psnr(shifted, target, BACKEND)
        assert abs(base - moved) <= 0.1
        # alignment recovers what plain PSNR loses on the misaligned pair
        plain = 10 * math.log10(1.0 / float(((shifted - target) ** 2).mean()))
        assert moved > plain

    def test_all_invalid_is_nan(self, rng):
        img = rng.random((16, 16, 3))

        def far_flow(a, b):
            return np.full(a.shape[:2], 50.0), np.full(a.shape[:2], 50.0)

        out = aligned_psnr(img, img * 0.5, ExternalBackend(far_flow))
        assert math.isnan(out)


class TestAlignedSSIM:
    def test_identical_is_one(self, rng):
        img = rng.random((32, 32, 3))
        assert aligned_ssim(img, img, BACKEND) == 1.0

    def test_matches_reference_implementation(self, rng):
        pytest.importorskip("skimage")
        from skimage.metrics import structural_similarity

        target = rng.random((48, 48, 3))
        inverted = 1.0 - target
        got = aligned_ssim(inverted, target, identity_backend())
        assert got < 1.0
        luma = np.array([0.299, 0.587, 0.114])
        ref = structural_similarity(
            inverted @ luma,
            target @ luma,
            win_size=11,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=1.0,
        )
        assert abs(got - ref) <= 1e-7

    def test_constant_images_closed_form(self):
        a = np.full((32, 32, 3), 0.4)
        b = np.full((32, 32, 3), 0.5)
        got = aligned_ssim(a, b, identity_backend())
        c1 = 0.01**2
        lum = (2 * 0.4 * 0.5 + c1) / (0.4**2 + 0.5**2 + c1)
        assert math.isclose(got, lum, rel_tol=1e-9)

    def test_symmetric_under_identity_alignment(self, rng):
        a = rng.random((32, 32, 3))
        b = rng.random((32, 32, 3))
        be = identity_backend()
        assert math.isclose(aligned_ssim(a, b, be), aligned_ssim(b, a, be), rel_tol=1e-12)


class TestDensityProxy:
    def test_pure_airlight(self):
        frame = np.full((32, 32, 3), 0.85)
        frame[..., 2] = 0.88
        assert math.isclose(smoke_density_proxy(frame), 0.85, rel_tol=1e-9)

    def test_zero_channel(self, rng):
        frame = rng.random((32, 32, 3))
        frame[..., 0] = 0.0
        assert smoke_density_proxy(frame) == 0.0

    def test_smoke_lifts_proxy(self):
        from selfsvd.smoke import SmokeParams, random_clean_clip, synth_smoke

        clean = random_clean_clip(32, 32, 6, seed=4)
        smoky = synth_smoke(
            clean, SmokeParams(density_peak=0.6, temporal_profile=(0, 2, 5, 8), seed=4)
        )
        clean_proxy = smoke_density_proxy(clean.frames[3].data)
        smoky_proxy = smoke_density_proxy(smoky.frames[2].data)  # same content, smoked
        assert smoky_proxy > clean_proxy


class TestEvalTarget:
    def test_original_ps_identity(self, rng):
        ps = Frame(rng.random((32, 32, 3)).astype(np.float32))
        assert make_eval_target(ps, "original-ps") is ps

    def test_enhanced_ps_with_identity_model(self, rng):
        from selfsvd.network import DesmokeNet, NetworkConfig

        ps = Frame(rng.random((32, 32, 3)).astype(np.float32))
        model = DesmokeNet(NetworkConfig.tiny())  # zero-init final conv
        out = make_eval_target(ps, "enhanced-ps", model=model, flow_backend=BACKEND)
        np.testing.assert_array_equal(out.data, ps.data)

    def test_synthetic_gt_returns_clean(self, rng):
        ps = Frame(rng.random((32, 32, 3)).astype(np.float32))
        clean = Frame(rng.random((32, 32, 3)).astype(np.float32))
        assert make_eval_target(ps, "synthetic-gt", clean=clean) is clean

    def test_missing_model_rejected(self, rng):
        ps = Frame(rng.random((32, 32, 3)).astype(np.float32))
        with pytest.raises(InvalidConfig):
            make_eval_target(ps, "enhanced-ps")
        with pytest.raises(InvalidConfig):
            make_eval_target(ps, "synthetic-gt")
        with pytest.raises(InvalidConfig):
            make_eval_target(ps, "no-such-mode")


class TestEvalReport:
    def test_aggregate_is_mean_of_clip_means(self):
        report = EvalReport(target_mode="original-ps")
        report.add("a", 1, 10.0, 0.5, 0.1)
        report.add("a", 2, 20.0, 0.7, 0.1)
        report.add("b", 1, 30.0, 0.9, 0.2)
        agg = report.aggregate()
        assert math.isclose(agg["psnr"], (15.0 + 30.0) / 2)
        assert agg["clips"] == 2

    def test_nan_rows_flagged_not_averaged(self):
        report = EvalReport(target_mode="original-ps")
        report.add("a", 1, float("nan"), float("nan"), 0.1)
        report.add("a", 2, 20.0, 0.5, 0.1)
        per = report.per_clip()
        assert per["a"]["undefined_frames"] == 1
        assert math.isclose(per["a"]["psnr"], 20.0)

    def test_csv_and_summary_files(self, tmp_path):
        report = EvalReport(target_mode="synthetic-gt")
        report.add("a", 1, 25.0, 0.8, 0.3)
        report.write_csv(tmp_path / "report.csv")
        report.write_summary(tmp_path / "summary.json")
        header = (tmp_path / "report.csv").read_text().splitlines()[0]
        assert header == "clip_id,frame,psnr,ssim,density"
        assert "aggregate" in (tmp_path / "summary.json").read_text()
