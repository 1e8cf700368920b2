"""Classifier training sanity, metric identities, and Grad-CAM."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prlx import classifier, corpus, phantom


@pytest.fixture(scope="module")
def balanced_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clf-corpus")
    manifest = phantom.generate_corpus(52, 52, 0, False, 17, root)
    return manifest, root


@pytest.fixture(scope="module")
def trained(balanced_corpus):
    manifest, root = balanced_corpus
    config = classifier.ClassifierConfig(epochs=6, seed=0)
    return classifier.train_classifier(manifest, root, config)


class TestTraining:
    def test_separable_phantoms_high_accuracy(self, balanced_corpus, trained):
        manifest, root = balanced_corpus
        metrics = classifier.evaluate(trained, manifest, root)
        assert metrics.accuracy >= 0.95

    def test_shuffled_labels_chance_level(self, balanced_corpus):
        manifest, root = balanced_corpus
        rng = np.random.default_rng(0)
        shuffled_records = []
        labels = [r.label for r in manifest.records]
        perm = rng.permutation(len(labels))
        for rec, j in zip(manifest.records, perm):
            shuffled_records.append(corpus.LesionRecord(
                id=rec.id, file=rec.file, label=labels[j], split=rec.split,
                source=rec.source))
        shuffled = corpus.Manifest(channels=1, records=shuffled_records)
        config = classifier.ClassifierConfig(epochs=6, seed=0)
        ckpt = classifier.train_classifier(shuffled, root, config)
        metrics = classifier.evaluate(ckpt, shuffled, root)
        assert 0.25 <= metrics.accuracy <= 0.75

    def test_learning_curve_and_fingerprint(self, trained):
        assert len(trained.learning_curve) == trained.config.epochs
        assert trained.learning_curve[0][1] > trained.learning_curve[-1][1]
        assert len(trained.train_fingerprint) == 16

    def test_single_class_rejected(self, tmp_path):
        manifest = phantom.generate_corpus(8, 0, 0, False, 1, tmp_path)
        with pytest.raises(ValueError, match="both classes"):
            classifier.train_classifier(
                manifest, tmp_path, classifier.ClassifierConfig(epochs=1))

    def test_save_load_roundtrip(self, balanced_corpus, trained, tmp_path):
        manifest, root = balanced_corpus
        classifier.save_classifier(trained, tmp_path / "c.pt")
        back = classifier.load_classifier(tmp_path / "c.pt")
        assert back.train_fingerprint == trained.train_fingerprint
        patches = corpus.load_patches(manifest, root,
                                      manifest.select("rim", "test"))
        np.testing.assert_array_equal(classifier.predict(back, patches),
                                      classifier.predict(trained, patches))


class TestEvaluate:
    def test_refuses_contaminated_test_set(self, balanced_corpus, trained):
        manifest, root = balanced_corpus
        # Move a training record into test: the fingerprint guard trips.
        records = []
        moved = None
        for rec in manifest.records:
            if moved is None and rec.split == "train" and rec.label == "rim":
                moved = corpus.LesionRecord(
                    id=rec.id, file=rec.file, label=rec.label, split="test",
                    source=rec.source)
                records.append(moved)
            else:
                records.append(rec)
        bad = corpus.Manifest(channels=1, records=records)
        with pytest.raises(ValueError, match="seen during training"):
            classifier.evaluate(trained, bad, root)


class TestMetrics:
    def test_hand_case(self):
        m = classifier.metrics_from_counts(tp=8, fp=2, fn=1, tn=9)
        assert m.accuracy == pytest.approx(17 / 20)
        assert m.precision == pytest.approx(8 / 10)
        assert m.sensitivity == pytest.approx(8 / 9)
        assert m.undefined == []

    def test_zero_denominators_flagged(self):
        m = classifier.metrics_from_counts(tp=0, fp=0, fn=0, tn=5)
        assert m.precision is None and "precision" in m.undefined
        assert m.sensitivity is None and "sensitivity" in m.undefined
        assert m.accuracy == 1.0
        empty = classifier.metrics_from_counts(0, 0, 0, 0)
        assert empty.undefined == ["accuracy", "precision", "sensitivity"]

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(1, 200))
    def test_identities_vs_bruteforce(self, seed, n):
        # Brute-force confusion counting on random prediction/label pairs
        # must agree exactly with the closed-form metrics.
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, n)
        p = rng.integers(0, 2, n)
        tp = int(np.sum((y == 1) & (p == 1)))
        fp = int(np.sum((y == 0) & (p == 1)))
        fn = int(np.sum((y == 1) & (p == 0)))
        tn = int(np.sum((y == 0) & (p == 0)))
        m = classifier.metrics_from_counts(tp, fp, fn, tn)
        assert m.accuracy == np.mean(y == p)
        if tp + fp:
            assert m.precision == np.mean(y[p == 1] == 1)
        if tp + fn:
            assert m.sensitivity == np.mean(p[y == 1] == 1)


class TestGradCam:
    def test_ring_localization(self, trained):
        # Strong-ring rims: CAM mass should sit on the ring, not background.
        hits = 0
        for seed in range(20):
            lesion = phantom.generate_rim(
                phantom.LesionParams(ring_contrast=1.0), seed)
            cam = classifier.gradcam(trained, lesion.patch, class_index=1)
            assert cam.values.shape == (64, 64)
            assert 0.0 <= cam.values.min() and cam.values.max() <= 1.0
            if (cam.values[lesion.ring_mask].mean()
                    > cam.values[lesion.background_mask].mean()):
                hits += 1
        assert hits >= 18

    def test_invalid_class_rejected(self, trained):
        with pytest.raises(ValueError, match="class index"):
            classifier.gradcam(trained, np.zeros((1, 64, 64), np.float32), 2)

    def test_normalized_or_flagged(self, trained):
        lesion = phantom.sample_lesion("nonrim", 0)
        cam = classifier.gradcam(trained, lesion.patch, class_index=1)
        if cam.all_zero:
            assert not cam.values.any()
        else:
            assert cam.values.max() == pytest.approx(1.0)
