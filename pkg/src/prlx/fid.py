"""Frechet distance between corpora in a learned feature space.

The conventional pretrained natural-image extractor is replaced by a
small rim/non-rim convolutional net trained on phantoms (DomainFeatureNet),
so absolute distances are not comparable to published tables; only
orderings carry over. Every report records the extractor's content hash
to guard row comparability.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import Manifest, load_patches

FEATURE_DIM = 64


class DomainFeatureNet(nn.Module):
    """4-block conv net; penultimate 64-d features, rim/non-rim logits.

    Blocks 1-4 double as the perceptual-loss feature stack.
    """

    def __init__(self):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(1, 16, 3, padding=1), nn.ReLU())
        self.block2 = nn.Sequential(nn.Conv2d(16, 32, 3, padding=1), nn.ReLU())
        self.block3 = nn.Sequential(nn.Conv2d(32, 48, 3, padding=1), nn.ReLU())
        self.block4 = nn.Sequential(nn.Conv2d(48, 64, 3, padding=1), nn.ReLU())
        self.pool = nn.AvgPool2d(2)
        self.head = nn.Linear(FEATURE_DIM, 2)

    def layer_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-block feature maps (channel 0 only for multi-contrast input)."""
        if x.shape[1] > 1:
            x = x[:, :1]
        f1 = self.block1(x)
        f2 = self.block2(self.pool(f1))
        f3 = self.block3(self.pool(f2))
        f4 = self.block4(self.pool(f3))
        return [f1, f2, f3, f4]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        f4 = self.layer_features(x)[-1]
        return f4.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def _content_hash(net: nn.Module) -> str:
    buf = io.BytesIO()
    for name, tensor in sorted(net.state_dict().items()):
        buf.write(name.encode())
        buf.write(tensor.detach().cpu().numpy().astype("<f8").tobytes())
    return hashlib.sha256(buf.getvalue()).hexdigest()[:16]


@dataclass
class FeatureExtractor:
    net: DomainFeatureNet
    content_hash: str

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)


def fit_feature_net(manifest: Manifest, corpus_root: str | Path, seed: int,
                    epochs: int = 8, batch_size: int = 32,
                    lr: float = 1e-3) -> FeatureExtractor:
    """Train the extractor rim-vs-nonrim on train-split phantoms, then freeze."""
    rims = load_patches(manifest, corpus_root, manifest.select("rim", "train"))
    nons = load_patches(manifest, corpus_root, manifest.select("nonrim", "train"))
    if len(rims) == 0 or len(nons) == 0:
        raise ValueError("feature net needs both rim and non-rim training samples")

    x = torch.from_numpy(np.concatenate([rims, nons])[:, :1])
    y = torch.from_numpy(np.r_[np.ones(len(rims)), np.zeros(len(nons))]).long()

    torch.manual_seed(seed)
    net = DomainFeatureNet()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    net.train()
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            logits = net(x[idx])
            loss = nn.functional.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return FeatureExtractor(net=net, content_hash=_content_hash(net))


def save_extractor(extractor: FeatureExtractor, path: str | Path) -> None:
    torch.save({"state": extractor.net.state_dict(),
                "hash": extractor.content_hash}, path)


def load_extractor(path: str | Path) -> FeatureExtractor:
    payload = torch.load(path, weights_only=True)
    net = DomainFeatureNet()
    net.load_state_dict(payload["state"])
    extractor = FeatureExtractor(net=net, content_hash=_content_hash(net))
    if extractor.content_hash != payload["hash"]:
        raise ValueError(f"{path}: extractor hash mismatch")
    return extractor


def extract_features(patches: np.ndarray, extractor: FeatureExtractor,
                     batch_size: int = 64) -> np.ndarray:
    """N x F feature matrix, deterministic batch order."""
    feats = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            x = torch.from_numpy(np.asarray(patches[start:start + batch_size],
                                            dtype=np.float32))
            feats.append(extractor.net.features(x).numpy())
    if not feats:
        return np.zeros((0, FEATURE_DIM), np.float64)
    return np.concatenate(feats).astype(np.float64)


@dataclass
class FidStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def compute_stats(features: np.ndarray) -> FidStats:
    """Gaussian moments of a feature matrix; covariance uses n-1."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise ValueError("need at least 2 feature vectors")
    mu = features.mean(axis=0)
    centered = features - mu
    sigma = centered.T @ centered / (len(features) - 1)
    asym = np.abs(sigma - sigma.T).max()
    if asym >= 1e-6:
        raise ValueError(f"covariance asymmetry {asym:.2e} exceeds tolerance")
    sigma = (sigma + sigma.T) / 2
    return FidStats(mu=mu, sigma=sigma, n=len(features))


def stats_for_patches(patches: np.ndarray,
                      extractor: FeatureExtractor) -> FidStats:
    return compute_stats(extract_features(patches, extractor))


def _psd_sqrt(sigma: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FidStats, b: FidStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term is computed as the trace sqrt of the symmetrized
    product S_a^{1/2} S_b S_a^{1/2} via eigendecomposition with
    eigenvalue clamping, which is deterministic and PSD-safe.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    for stats in (a, b):
        if not (np.all(np.isfinite(stats.mu)) and np.all(np.isfinite(stats.sigma))):
            raise ValueError("non-finite FID stats")
    diff = a.mu - b.mu
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    vals = np.linalg.eigh((inner + inner.T) / 2)[0]
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    dist = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_cross
    if dist < -1e-6:
        raise ValueError(f"Frechet distance {dist} below numerical floor")
    return float(max(dist, 0.0))


@dataclass
class FidTableRow:
    name: str
    fid: float
    n: int


@dataclass
class FidTable:
    rows: list[FidTableRow]
    reference_name: str
    reference_n: int
    extractor_hash: str

    def render(self) -> str:
        lines = [
            f"# FID vs reference '{self.reference_name}' "
            f"(n={self.reference_n}, extractor={self.extractor_hash})",
            f"{'dataset':<28}{'fid':>12}{'n':>8}",
        ]
        for row in self.rows:
            lines.append(f"{row.name:<28}{row.fid:>12.4f}{row.n:>8d}")
        lines.append("# domain extractor: absolute values not comparable to "
                     "published FID tables; orderings only")
        return "\n".join(lines) + "\n"


def fid_table(named_patch_sets: list[tuple[str, np.ndarray]],
              reference: tuple[str, np.ndarray],
              extractor: FeatureExtractor) -> FidTable:
    """One row per dataset vs the shared reference, sorted descending."""
    ref_stats = stats_for_patches(reference[1], extractor)
    rows = []
    for name, patches in named_patch_sets:
        stats = stats_for_patches(patches, extractor)
        rows.append(FidTableRow(name=name,
                                fid=frechet_distance(stats, ref_stats),
                                n=stats.n))
    rows.sort(key=lambda r: -r.fid)
    return FidTable(rows=rows, reference_name=reference[0],
                    reference_n=ref_stats.n,
                    extractor_hash=extractor.content_hash)
