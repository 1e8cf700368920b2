"""Shared fixtures. Heavy artifacts (phantom corpus, feature extractor,
the 20k-step GAN run, the denoised-patch cache) are session-scoped and
cached under tests/.cache keyed by their configuration, so a warm rerun
of the suite is fast while a cold run still builds everything from seed.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from prlx import augment as augment_mod
from prlx import corpus as corpus_mod
from prlx import fid as fid_mod
from prlx import gan as gan_mod
from prlx import phantom as phantom_mod
from prlx import projection as proj_mod

CACHE_ROOT = Path(__file__).parent / ".cache"

CORPUS_SPEC = dict(n_rim=260, n_nonrim=520, n_ambiguous=177,
                   multi_contrast=False, seed=0)
GAN_STEPS = 20000
LD_CACHE_SIZE = 120  # denoised candidates; ablation draws 100 per seed


def _cache_dir(name: str, spec: dict) -> tuple[Path, bool]:
    """(path, is_complete); a `done.json` matching `spec` marks completion."""
    path = CACHE_ROOT / name
    marker = path / "done.json"
    if marker.exists():
        if json.loads(marker.read_text()) == spec:
            return path, True
        shutil.rmtree(path)
    elif path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path, False


def _mark_done(path: Path, spec: dict) -> None:
    (path / "done.json").write_text(json.dumps(spec, sort_keys=True))


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    path, done = _cache_dir("corpus", CORPUS_SPEC)
    if not done:
        phantom_mod.generate_corpus(out_dir=path, **CORPUS_SPEC)
        _mark_done(path, CORPUS_SPEC)
    return path


@pytest.fixture(scope="session")
def manifest(corpus_dir) -> corpus_mod.Manifest:
    return corpus_mod.load_manifest(corpus_dir / "manifest.json")


@pytest.fixture(scope="session")
def extractor(corpus_dir, manifest) -> fid_mod.FeatureExtractor:
    spec = dict(seed=0, epochs=8, corpus=CORPUS_SPEC)
    path, done = _cache_dir("extractor", spec)
    target = path / "featnet.pt"
    if not done:
        ext = fid_mod.fit_feature_net(manifest, corpus_dir, seed=0)
        fid_mod.save_extractor(ext, target)
        _mark_done(path, spec)
    return fid_mod.load_extractor(target)


@pytest.fixture(scope="session")
def rim_gan_dir(corpus_dir, manifest, extractor) -> Path:
    """Full 20k-step unconditional run on the 200 train rims."""
    spec = dict(steps=GAN_STEPS, seed=0, corpus=CORPUS_SPEC,
                extractor=extractor.content_hash)
    path, done = _cache_dir("gan-rim", spec)
    if not done:
        config = gan_mod.GanTrainConfig(total_steps=GAN_STEPS, seed=0)
        gan_mod.train(config, manifest, corpus_dir, extractor, path,
                      progress=True)
        _mark_done(path, spec)
    return path


@pytest.fixture(scope="session")
def rim_ckpt(rim_gan_dir) -> gan_mod.Checkpoint:
    return gan_mod.load_checkpoint(rim_gan_dir / "best.ckpt")


@pytest.fixture(scope="session")
def rim_curve(rim_gan_dir) -> list[tuple[int, float]]:
    rows = []
    for line in (rim_gan_dir / "fid_curve.txt").read_text().splitlines():
        step, value = line.split()
        rows.append((int(step), float(value)))
    return rows


@pytest.fixture(scope="session")
def ld_cache(corpus_dir, manifest, rim_ckpt, extractor) -> augment_mod.LdCache:
    """Denoised patches for the first LD_CACHE_SIZE train ambiguous records."""
    spec = dict(limit=LD_CACHE_SIZE, proj=dict(iterations=1000, alpha=1e5),
                corpus=CORPUS_SPEC, gan_steps=GAN_STEPS)
    path, done = _cache_dir("ld-cache", spec)
    target = path / "denoised.npz"
    if not done:
        cache = augment_mod.build_ld_cache(manifest, corpus_dir, rim_ckpt,
                                           extractor, limit=LD_CACHE_SIZE)
        np.savez(target, **cache.denoised)
        _mark_done(path, spec)
    payload = np.load(target)
    return augment_mod.LdCache(denoised={k: payload[k] for k in payload.files})


@pytest.fixture(scope="session")
def tiny_ckpt() -> gan_mod.Checkpoint:
    """Untrained rim-class checkpoint for fast projection/unit tests."""
    torch.manual_seed(7)
    gen = gan_mod.Generator()
    disc = gan_mod.Discriminator()
    gen.eval()
    disc.eval()
    return gan_mod.Checkpoint(
        generator=gen, discriminator=disc, config=gan_mod.GanTrainConfig(),
        ada=gan_mod.AdaState(), step=0, metric_log=[],
        train_classes=["rim"], extractor_hash="0" * 16)
