"""Projection objective terms, learning-rate schedule, gradient checking,
and the projection driver contracts (frozen weights, class guard)."""

import math

import numpy as np
import pytest
import torch

from prlx import gan, projection


class TestPerceptualLoss:
    def test_zero_on_identical(self, extractor):
        x = torch.rand(2, 1, 64, 64) * 2 - 1
        loss = projection.perceptual_loss_t(x, x.clone(), extractor)
        assert loss.shape == (2,)
        assert loss.abs().max() < 1e-10

    def test_positive_on_different(self, extractor):
        g = torch.Generator().manual_seed(0)
        a = torch.rand(1, 1, 64, 64, generator=g) * 2 - 1
        b = torch.rand(1, 1, 64, 64, generator=g) * 2 - 1
        assert projection.perceptual_loss_t(a, b, extractor)[0] > 0

    def test_shape_mismatch_rejected(self, extractor):
        with pytest.raises(ValueError, match="mismatch"):
            projection.perceptual_loss_t(torch.zeros(1, 1, 64, 64),
                                         torch.zeros(1, 1, 32, 32), extractor)

    def test_batch_equals_per_sample(self, extractor):
        g = torch.Generator().manual_seed(1)
        a = torch.rand(3, 1, 64, 64, generator=g) * 2 - 1
        b = torch.rand(3, 1, 64, 64, generator=g) * 2 - 1
        batched = projection.perceptual_loss_t(a, b, extractor)
        singles = torch.stack([
            projection.perceptual_loss_t(a[i:i + 1], b[i:i + 1], extractor)[0]
            for i in range(3)])
        torch.testing.assert_close(batched, singles)


class TestNoiseReg:
    def test_constant_map_closed_form(self):
        # A degenerate constant map passes normalization unchanged; its
        # x- and y-shift autocorrelations are each (mean of c^2)^2, and the
        # 64 -> 8 pyramid has 4 levels, so the total is 8 * c^4.
        c = 0.7
        maps = [np.full((64, 64), c)]
        expected = 8 * c ** 4
        assert projection.noise_reg(maps) == pytest.approx(expected, rel=1e-9)

    def test_all_ones_over_default_resolutions(self):
        # One map per synthesis resolution, all ones: level counts are
        # 1 (8x8), 2 (16), 3 (32), 4 (64); each level adds 2 * 1.
        maps = [np.ones((res, res)) for res in gan.NOISE_RESOLUTIONS]
        assert projection.noise_reg(maps) == pytest.approx(2 * (1 + 2 + 3 + 4))

    def test_white_noise_small_after_normalization(self):
        rng = np.random.default_rng(2)
        maps = [rng.normal(size=(64, 64))]
        assert projection.noise_reg(maps) < 0.05

    def test_correlated_map_penalized(self):
        # Smooth (spatially correlated) content scores far above white noise.
        rng = np.random.default_rng(3)
        smooth = np.repeat(np.repeat(rng.normal(size=(8, 8)), 8, 0), 8, 1)
        assert projection.noise_reg([smooth]) > 1.0

    def test_per_sample_batching(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(64, 64))
        b = np.repeat(np.repeat(rng.normal(size=(8, 8)), 8, 0), 8, 1)
        batch = torch.from_numpy(np.stack([a, b])[:, None])
        vals = projection.noise_reg_t([batch])
        assert vals[0] == pytest.approx(projection.noise_reg([a]), rel=1e-6)
        assert vals[1] == pytest.approx(projection.noise_reg([b]), rel=1e-6)


class TestLrSchedule:
    def test_endpoints_and_plateau(self):
        total = 1000
        assert projection._lr_factor(0, total) == 0.0
        assert projection._lr_factor(50, total) == pytest.approx(1.0)
        assert projection._lr_factor(500, total) == pytest.approx(1.0)
        assert projection._lr_factor(750, total) == pytest.approx(1.0)
        assert projection._lr_factor(1000, total) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_ramp_and_decay(self):
        total = 1000
        ramp = [projection._lr_factor(t, total) for t in range(0, 51, 5)]
        assert all(b >= a for a, b in zip(ramp, ramp[1:]))
        decay = [projection._lr_factor(t, total) for t in range(750, 1001, 25)]
        assert all(b <= a for a, b in zip(decay, decay[1:]))


class TestConfig:
    def test_defaults_match_recipe(self):
        config = projection.ProjectionConfig()
        assert config.iterations == 1000
        assert config.alpha == 1e5
        assert config.lr_init == 0.1

    @pytest.mark.parametrize("kwargs, message", [
        (dict(iterations=0), "iterations"),
        (dict(alpha=-1), "alpha"),
        (dict(lr_init=0), "lr_init"),
        (dict(lr_schedule="linear"), "lr_schedule"),
        (dict(w_init="random"), "w_init"),
    ])
    def test_validation(self, kwargs, message):
        with pytest.raises(ValueError, match=message):
            projection.ProjectionConfig(**kwargs)


class TestPsnr:
    def test_known_value(self):
        a = np.zeros((1, 64, 64))
        b = np.full((1, 64, 64), 0.2)
        # mse = 0.04, psnr = 10 log10(4 / 0.04) = 20 dB
        assert projection.psnr(a, b) == pytest.approx(20.0)

    def test_identical_is_infinite(self):
        a = np.ones((1, 64, 64))
        assert projection.psnr(a, a) == math.inf


class TestGradcheck:
    def test_quadratic_exact(self):
        def objective(p):
            return (p ** 2).sum()

        err = projection.gradcheck(objective, np.array([1.0, -2.0, 3.0]),
                                   epsilon=1e-6)
        assert err < 1e-7

    def test_detects_wrong_gradient(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, p):
                return (p ** 2).sum()

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(3)  # wrong by construction

        err = projection.gradcheck(lambda p: Wrong.apply(p),
                                   np.array([1.0, -2.0, 3.0]), epsilon=1e-6)
        assert err > 0.1

    def test_index_subset(self):
        def objective(p):
            return (p ** 4).sum()

        err = projection.gradcheck(objective, np.linspace(-1, 1, 10),
                                   epsilon=1e-5, indices=np.array([0, 5, 9]))
        assert err < 1e-6


class TestProjectDriver:
    def test_rejects_non_rim_checkpoint(self, tiny_ckpt, extractor):
        bad = gan.Checkpoint(
            generator=tiny_ckpt.generator,
            discriminator=tiny_ckpt.discriminator, config=tiny_ckpt.config,
            ada=tiny_ckpt.ada, step=0, metric_log=[],
            train_classes=["rim", "nonrim"], extractor_hash="x")
        with pytest.raises(ValueError, match="unambiguous rims"):
            projection.project(np.zeros((1, 64, 64), np.float32), bad,
                               projection.ProjectionConfig(iterations=1),
                               extractor)

    def test_rejects_channel_mismatch(self, tiny_ckpt, extractor):
        x = np.zeros((3, 64, 64), np.float32)
        with pytest.raises(ValueError, match="channels"):
            projection.project(x, tiny_ckpt,
                               projection.ProjectionConfig(iterations=1),
                               extractor)

    def test_short_run_shapes_and_trace(self, tiny_ckpt, extractor):
        rng = np.random.default_rng(5)
        x = rng.uniform(-0.5, 0.5, (2, 1, 64, 64)).astype(np.float32)
        config = projection.ProjectionConfig(iterations=12)
        results = projection.project_batch(x, tiny_ckpt, config, extractor)
        assert len(results) == 2
        for res in results:
            assert res.w_star.shape == (gan.LATENT_DIM,)
            assert len(res.noise_star) == len(gan.NOISE_RESOLUTIONS)
            assert res.x_hat.shape == (1, 64, 64)
            assert res.objective_trace.shape == (12,)
            assert np.all(np.isfinite(res.objective_trace))
            assert res.final_perceptual >= 0
            assert res.final_noise_reg >= 0

    def test_weights_frozen_through_projection(self, tiny_ckpt, extractor):
        from prlx.gan import synthesis_hash

        before = synthesis_hash(tiny_ckpt.generator)
        x = np.zeros((1, 1, 64, 64), np.float32)
        projection.project_batch(x, tiny_ckpt,
                                 projection.ProjectionConfig(iterations=3),
                                 extractor)
        assert synthesis_hash(tiny_ckpt.generator) == before

    def test_denoising_raises_ring_statistic(self, ld_cache, manifest,
                                             corpus_dir):
        # Projections of the ambiguous training records (shared session
        # cache): stripping the inexpressible artifact noise should raise
        # the mean matched-filter score over the parent batch.
        from prlx import corpus as corpus_mod, phantom

        index = manifest.by_id()
        parent_stats, denoised_stats = [], []
        for rec_id, x_hat in ld_cache.denoised.items():
            rec = index[rec_id]
            x_tilde = corpus_mod.load_patches(manifest, corpus_dir, [rec])[0]
            parent_stats.append(phantom.ring_statistic(x_tilde))
            denoised_stats.append(phantom.ring_statistic(x_hat))
        assert len(denoised_stats) >= 100
        assert np.mean(denoised_stats) > np.mean(parent_stats)

    def test_deterministic(self, tiny_ckpt, extractor):
        x = np.random.default_rng(6).uniform(
            -0.5, 0.5, (1, 1, 64, 64)).astype(np.float32)
        config = projection.ProjectionConfig(iterations=8, seed=3)
        a = projection.project_batch(x, tiny_ckpt, config, extractor)[0]
        b = projection.project_batch(x, tiny_ckpt, config, extractor)[0]
        np.testing.assert_array_equal(a.x_hat, b.x_hat)
        np.testing.assert_array_equal(a.w_star, b.w_star)
