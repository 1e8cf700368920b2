"""Rim/non-rim convolutional classifier, detection metrics, and Grad-CAM
class activation maps."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Manifest, load_patches, split_leakage_check

CONV_WIDTHS = (16, 16, 32, 32, 64, 64)
POOL_AFTER = (2, 4, 6)  # 1-based conv unit indices followed by 2x2 max pool


@dataclass
class ClassifierConfig:
    epochs: int = 25
    learning_rate: float = 1e-3
    batch_size: int = 32
    channels: int = 1
    seed: int = 0


class RimClassifier(nn.Module):
    """6 conv units (3x3 conv -> BN -> ReLU), pooling after units 2/4/6,
    then global average pooling and a fully connected layer to 2 logits.

    The GAP head keeps the class logits linear in the channel means of
    the final feature maps, so Grad-CAM's mean-gradient weights recover
    the head weights exactly and the maps localize the evidence."""

    def __init__(self, channels: int = 1):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = channels
        for i, width in enumerate(CONV_WIDTHS, start=1):
            # momentum=None -> cumulative running stats, which stay
            # reliable even when an epoch holds only a handful of batches.
            layers += [nn.Conv2d(in_ch, width, 3, padding=1),
                       nn.BatchNorm2d(width, momentum=None), nn.ReLU()]
            if i in POOL_AFTER:
                layers.append(nn.MaxPool2d(2))
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(CONV_WIDTHS[-1], 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).mean(dim=(2, 3)))


def _data_fingerprint(ids: list[str]) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()[:16]


@dataclass
class ClassifierCheckpoint:
    net: RimClassifier
    config: ClassifierConfig
    train_ids: list[str]
    train_fingerprint: str
    learning_curve: list[tuple[int, float]]  # (epoch, mean train loss)


def save_classifier(ckpt: ClassifierCheckpoint, path: str | Path) -> None:
    torch.save({
        "state": ckpt.net.state_dict(),
        "config": asdict(ckpt.config),
        "train_ids": ckpt.train_ids,
        "train_fingerprint": ckpt.train_fingerprint,
        "learning_curve": ckpt.learning_curve,
    }, path)


def load_classifier(path: str | Path) -> ClassifierCheckpoint:
    payload = torch.load(path, weights_only=True)
    config = ClassifierConfig(**payload["config"])
    net = RimClassifier(channels=config.channels)
    net.load_state_dict(payload["state"])
    net.eval()
    return ClassifierCheckpoint(
        net=net, config=config, train_ids=list(payload["train_ids"]),
        train_fingerprint=payload["train_fingerprint"],
        learning_curve=[tuple(row) for row in payload["learning_curve"]])


def train_classifier(manifest: Manifest, corpus_root: str | Path,
                     config: ClassifierConfig) -> ClassifierCheckpoint:
    """Cross-entropy training on the train split (rim = class 1)."""
    violations = split_leakage_check(manifest)
    if violations:
        raise ValueError(f"manifest fails leakage check: {violations[:3]}")
    # Ambiguous records are trained as rim only when a strategy put them
    # there deliberately; by default they are excluded.
    rim_recs = manifest.select(label="rim", split="train")
    non_recs = manifest.select(label="nonrim", split="train")
    if not rim_recs or not non_recs:
        raise ValueError("training needs both classes present")
    rims = load_patches(manifest, corpus_root, rim_recs)
    nons = load_patches(manifest, corpus_root, non_recs)

    x = torch.from_numpy(np.concatenate([rims, nons]).astype(np.float32))
    y = torch.from_numpy(np.r_[np.ones(len(rims)), np.zeros(len(nons))]).long()

    torch.manual_seed(config.seed)
    net = RimClassifier(channels=manifest.channels)
    if manifest.channels != config.channels:
        config = ClassifierConfig(**{**asdict(config),
                                     "channels": manifest.channels})
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    curve = []
    net.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:  # BatchNorm needs at least 2 samples
                continue
            loss = F.cross_entropy(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        curve.append((epoch, float(np.mean(losses))))
    # Cumulative running stats were averaged over the whole run, including
    # early epochs with very different weights; refresh them with a single
    # pass under the final weights so eval mode matches training behavior.
    for module in net.modules():
        if isinstance(module, nn.BatchNorm2d):
            module.reset_running_stats()
    with torch.no_grad():
        for start in range(0, len(x), config.batch_size):
            batch = x[start:start + config.batch_size]
            if len(batch) >= 2:
                net(batch)
    net.eval()
    ids = [r.id for r in rim_recs + non_recs]
    return ClassifierCheckpoint(net=net, config=config, train_ids=ids,
                                train_fingerprint=_data_fingerprint(ids),
                                learning_curve=curve)


@dataclass
class Metrics:
    accuracy: float | None
    precision: float | None
    sensitivity: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    undefined: list[str] = field(default_factory=list)


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> Metrics:
    """Accuracy/precision/sensitivity with explicit zero-denominator flags."""
    undefined = []
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else None
    if total == 0:
        undefined.append("accuracy")
    precision = tp / (tp + fp) if (tp + fp) else None
    if tp + fp == 0:
        undefined.append("precision")
    sensitivity = tp / (tp + fn) if (tp + fn) else None
    if tp + fn == 0:
        undefined.append("sensitivity")
    return Metrics(accuracy=accuracy, precision=precision,
                   sensitivity=sensitivity, tp=tp, fp=fp, fn=fn, tn=tn,
                   undefined=undefined)


def predict(ckpt: ClassifierCheckpoint, patches: np.ndarray,
            batch_size: int = 64) -> np.ndarray:
    preds = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            x = torch.from_numpy(np.asarray(patches[start:start + batch_size],
                                            np.float32))
            preds.append(ckpt.net(x).argmax(dim=1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def evaluate(ckpt: ClassifierCheckpoint, manifest: Manifest,
             corpus_root: str | Path) -> Metrics:
    """Test-split metrics with rim as the positive class; refuses test
    records that appear in the training fingerprint."""
    rim_recs = manifest.select(label="rim", split="test")
    non_recs = manifest.select(label="nonrim", split="test")
    train_set = set(ckpt.train_ids)
    leaked = [r.id for r in rim_recs + non_recs if r.id in train_set]
    if leaked:
        raise ValueError(f"test records seen during training: {leaked[:5]}")
    rims = load_patches(manifest, corpus_root, rim_recs)
    nons = load_patches(manifest, corpus_root, non_recs)
    rim_pred = predict(ckpt, rims)
    non_pred = predict(ckpt, nons)
    tp = int((rim_pred == 1).sum())
    fn = int((rim_pred == 0).sum())
    fp = int((non_pred == 1).sum())
    tn = int((non_pred == 0).sum())
    return metrics_from_counts(tp, fp, fn, tn)


@dataclass
class CamMap:
    values: np.ndarray  # 64 x 64 in [0, 1]
    class_index: int
    all_zero: bool


def gradcam(ckpt: ClassifierCheckpoint, patch: np.ndarray,
            class_index: int) -> CamMap:
    """Grad-CAM over the final conv unit's feature maps, ReLU'd, bilinear
    upsampled to the patch size and max-normalized."""
    if class_index not in (0, 1):
        raise ValueError(f"invalid class index {class_index}")
    net = ckpt.net
    x = torch.from_numpy(np.asarray(patch, np.float32))[None]
    activations: list[torch.Tensor] = []

    # Final conv unit = everything up to and including the last ReLU.
    last_relu = max(i for i, m in enumerate(net.features)
                    if isinstance(m, nn.ReLU))
    feat = x
    for i, module in enumerate(net.features):
        feat = module(feat)
        if i == last_relu:
            feat.retain_grad()
            activations.append(feat)
    logits = net.head(feat.mean(dim=(2, 3)))
    net.zero_grad()
    logits[0, class_index].backward()

    act = activations[0]
    weights = act.grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear",
                        align_corners=False)[0, 0].detach().numpy()
    peak = cam.max()
    if peak <= 0:
        return CamMap(values=np.zeros_like(cam), class_index=class_index,
                      all_zero=True)
    return CamMap(values=cam / peak, class_index=class_index, all_zero=False)
