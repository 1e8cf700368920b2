"""Generator/discriminator units, the ADA controller property suite, and
a short training smoke run (the full 20k-step run lives in acceptance)."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from prlx import corpus, fid as fid_mod, gan, phantom


class TestAdaController:
    def test_direction_up(self):
        state = gan.AdaState(p=0.5, rt_estimate=0.9)
        new = gan.ada_update(state, np.ones(16))
        assert new.p == pytest.approx(0.51)

    def test_direction_down(self):
        state = gan.AdaState(p=0.5, rt_estimate=-0.9)
        new = gan.ada_update(state, -np.ones(16))
        assert new.p == pytest.approx(0.49)

    def test_fixed_point(self):
        # A logit stream whose sign mean equals the target leaves the EMA,
        # and therefore p, untouched.
        state = gan.AdaState(p=0.3, rt_estimate=gan.ADA_TARGET)
        logits = np.r_[np.ones(8), -np.ones(2)]  # sign mean = 0.6
        new = gan.ada_update(state, logits)
        assert new.rt_estimate == pytest.approx(gan.ADA_TARGET)
        assert new.p == pytest.approx(0.3)

    def test_clamp_low_and_high_1000_step_streams(self):
        # Persistently overfit discriminator (all-positive real logits):
        # p rises and saturates at the clamp. Persistently underfit:
        # p never leaves 0.
        state = gan.AdaState()
        for _ in range(1000):
            state = gan.ada_update(state, np.ones(8))
        assert state.p == pytest.approx(gan.ADA_P_MAX)
        assert state.rt_estimate == pytest.approx(1.0, abs=1e-6)

        state = gan.AdaState()
        for _ in range(1000):
            state = gan.ada_update(state, -np.ones(8))
        assert state.p == 0.0

    def test_ema_closed_form(self):
        # One update from a known estimate matches the EMA recurrence.
        state = gan.AdaState(rt_estimate=0.2)
        logits = np.array([1.0, 1.0, -1.0, 1.0])  # sign mean 0.5
        new = gan.ada_update(state, logits)
        assert new.rt_estimate == pytest.approx(
            gan.ADA_EMA_DECAY * 0.2 + (1 - gan.ADA_EMA_DECAY) * 0.5)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            gan.ada_update(gan.AdaState(), np.zeros(0))

    @settings(max_examples=50, deadline=None)
    @given(p=st.floats(0, gan.ADA_P_MAX), rt=st.floats(-1, 1),
           seed=st.integers(0, 10**6))
    def test_p_always_in_bounds(self, p, rt, seed):
        rng = np.random.default_rng(seed)
        state = gan.AdaState(p=p, rt_estimate=rt)
        state = gan.ada_update(state, rng.normal(size=8))
        assert 0.0 <= state.p <= gan.ADA_P_MAX


class TestModulatedConv:
    def _naive(self, conv, x, w):
        """Per-sample grouped convolution with explicitly modulated and
        demodulated weights: the textbook formulation."""
        style = conv.affine(w)
        outs = []
        for i in range(x.shape[0]):
            wmod = conv.weight * style[i][None, :, None, None]
            if conv.demodulate:
                d = torch.rsqrt(wmod.pow(2).sum(dim=(1, 2, 3)) + 1e-8)
                wmod = wmod * d[:, None, None, None]
            outs.append(F.conv2d(x[i:i + 1], wmod, padding=conv.padding))
        return torch.cat(outs) + conv.bias[None, :, None, None]

    def test_matches_grouped_conv_oracle(self):
        torch.manual_seed(0)
        conv = gan.ModulatedConv2d(6, 4, 3)
        with torch.no_grad():
            conv.affine.weight.normal_(0, 0.3)  # non-trivial styles
        x = torch.randn(5, 6, 8, 8)
        w = torch.randn(5, gan.LATENT_DIM)
        torch.testing.assert_close(conv(x, w), self._naive(conv, x, w),
                                   atol=1e-5, rtol=1e-4)

    def test_no_demodulate_path(self):
        torch.manual_seed(1)
        conv = gan.ModulatedConv2d(3, 2, 1, demodulate=False)
        x = torch.randn(4, 3, 8, 8)
        w = torch.randn(4, gan.LATENT_DIM)
        torch.testing.assert_close(conv(x, w), self._naive(conv, x, w),
                                   atol=1e-5, rtol=1e-4)


class TestNetworks:
    def test_mapping_label_contracts(self):
        m = gan.MappingNet(conditional=False)
        z = torch.randn(2, gan.LATENT_DIM)
        assert m(z).shape == (2, gan.LATENT_DIM)
        with pytest.raises(ValueError, match="unconditional"):
            m(z, torch.zeros(2, dtype=torch.long))
        mc = gan.MappingNet(conditional=True)
        with pytest.raises(ValueError, match="requires a label"):
            mc(z)

    def test_synthesis_output_range(self):
        torch.manual_seed(2)
        net = gan.SynthesisNet()
        w = torch.randn(3, gan.LATENT_DIM)
        out = net(w, gan.sample_noise(3))
        assert out.shape == (3, 1, 64, 64)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_synthesis_three_channel_probability(self):
        torch.manual_seed(3)
        net = gan.SynthesisNet(channels=3)
        out = net(torch.randn(2, gan.LATENT_DIM), gan.sample_noise(2))
        assert out.shape == (2, 3, 64, 64)
        assert out[:, 2].min() >= 0.0 and out[:, 2].max() <= 1.0

    def test_noise_shape_checked(self):
        net = gan.SynthesisNet()
        w = torch.randn(1, gan.LATENT_DIM)
        with pytest.raises(ValueError, match="noise maps"):
            net(w, gan.sample_noise(1)[:-1])
        bad = gan.sample_noise(1)
        bad[1] = torch.zeros(1, 1, 5, 5)
        with pytest.raises(ValueError, match="16x16"):
            net(w, bad)

    def test_reduced_resolution_net(self):
        # The 8x8-only synthesis stack used by the gradcheck acceptance.
        net = gan.SynthesisNet(resolutions=(8,))
        out = net(torch.randn(1, gan.LATENT_DIM), gan.zero_noise(1, (8,)))
        assert out.shape == (1, 1, 8, 8)

    def test_discriminator_projection_conditioning(self):
        torch.manual_seed(4)
        d = gan.Discriminator(conditional=True)
        x = torch.randn(2, 1, 64, 64)
        out0 = d(x, torch.tensor([0, 0]))
        out1 = d(x, torch.tensor([1, 1]))
        assert out0.shape == (2,)
        assert not torch.allclose(out0, out1)
        with pytest.raises(ValueError, match="requires a label"):
            d(x)


class TestAugmentBatch:
    def test_p_zero_identity(self):
        x = torch.randn(4, 1, 64, 64)
        g = torch.Generator().manual_seed(0)
        assert gan.augment_batch(x, 0.0, g) is x

    def test_deterministic_given_generator(self):
        x = torch.randn(6, 1, 64, 64).clamp(-1, 1)
        a = gan.augment_batch(x, 0.7, torch.Generator().manual_seed(5))
        b = gan.augment_batch(x, 0.7, torch.Generator().manual_seed(5))
        torch.testing.assert_close(a, b)

    def test_range_preserved_and_changes_applied(self):
        x = torch.rand(8, 1, 64, 64) * 2 - 1
        out = gan.augment_batch(x, 1.0, torch.Generator().manual_seed(6))
        assert out.min() >= -1.0 and out.max() <= 1.0
        assert not torch.allclose(out, x)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        torch.manual_seed(7)
        gen = gan.Generator()
        disc = gan.Discriminator()
        config = gan.GanTrainConfig(total_steps=10)
        path = tmp_path / "g.ckpt"
        gan.save_checkpoint(path, gen, disc, config, gan.AdaState(p=0.2),
                            step=10, metric_log=[(0, 1.5)],
                            train_classes=["rim"], extractor_hash="abc")
        back = gan.load_checkpoint(path)
        assert back.step == 10
        assert back.train_classes == ["rim"]
        assert back.ada.p == pytest.approx(0.2)
        assert back.metric_log == [(0, 1.5)]
        z = torch.randn(2, gan.LATENT_DIM)
        noise = gan.zero_noise(2)
        with torch.no_grad():
            torch.testing.assert_close(gen(z, noise),
                                       back.generator(z, noise))

    def test_tamper_detected(self, tmp_path):
        torch.manual_seed(8)
        path = tmp_path / "g.ckpt"
        gan.save_checkpoint(path, gan.Generator(), gan.Discriminator(),
                            gan.GanTrainConfig(), gan.AdaState(), 0, [],
                            ["rim"], "abc")
        payload = torch.load(path, weights_only=True)
        payload["states"]["mapping"]["layers.0.bias"] += 1.0
        torch.save(payload, path)
        with pytest.raises(ValueError, match="checksum"):
            gan.load_checkpoint(path)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="channels"):
            gan.GanTrainConfig(channels=2)
        with pytest.raises(ValueError, match="positive"):
            gan.GanTrainConfig(total_steps=0)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small-corpus")
    manifest = phantom.generate_corpus(26, 26, 4, False, 11, root)
    return manifest, root


@pytest.fixture(scope="module")
def small_extractor(small_corpus):
    manifest, root = small_corpus
    return fid_mod.fit_feature_net(manifest, root, seed=0, epochs=2)


class TestTrainingSmoke:
    def test_short_run_artifacts(self, small_corpus, small_extractor,
                                 tmp_path):
        manifest, root = small_corpus
        config = gan.GanTrainConfig(total_steps=48, batch_size=4,
                                    fid_eval_interval=24,
                                    fid_eval_samples=24, seed=0)
        result = gan.train(config, manifest, root, small_extractor, tmp_path)
        assert result.best_checkpoint.exists()
        assert result.final_checkpoint.exists()
        curve_lines = (tmp_path / "fid_curve.txt").read_text().splitlines()
        assert len(curve_lines) == len(result.curve)
        assert result.curve[0][0] == 0
        back = gan.load_checkpoint(result.best_checkpoint)
        assert back.train_classes == ["rim"]
        assert back.extractor_hash == small_extractor.content_hash

    def test_leaky_manifest_rejected(self, small_corpus, small_extractor,
                                     tmp_path):
        manifest, root = small_corpus
        leaky_records = list(manifest.records)
        parent = next(r for r in leaky_records
                      if r.label == "rim" and r.split == "train")
        leaky_records.append(corpus.LesionRecord(
            id="leak", file=parent.file, label="rim", split="test",
            source="phantom", parent_id=parent.id))
        leaky = corpus.Manifest(channels=1, records=leaky_records)
        with pytest.raises(ValueError, match="leakage"):
            gan.train(gan.GanTrainConfig(total_steps=4), leaky, root,
                      small_extractor, tmp_path)

    def test_conditional_needs_both_classes(self, small_extractor, tmp_path):
        manifest = phantom.generate_corpus(8, 0, 0, False, 2, tmp_path / "c")
        with pytest.raises(ValueError, match="nonrim"):
            gan.train(gan.GanTrainConfig(total_steps=4, conditional=True),
                      manifest, tmp_path / "c", small_extractor,
                      tmp_path / "g")


class TestSample:
    def test_provenance_and_determinism(self, tiny_ckpt):
        a = gan.sample(tiny_ckpt, 5, seed=3)
        b = gan.sample(tiny_ckpt, 5, seed=3)
        np.testing.assert_array_equal(a.patches, b.patches)
        np.testing.assert_array_equal(a.z, b.z)
        assert a.patches.shape == (5, 1, 64, 64)
        assert a.z.shape == (5, gan.LATENT_DIM)
        assert a.w.shape == (5, gan.LATENT_DIM)
        assert a.labels is None

    def test_label_contracts(self, tiny_ckpt):
        with pytest.raises(ValueError, match="unconditional"):
            gan.sample(tiny_ckpt, 2, seed=0, label="rim")
