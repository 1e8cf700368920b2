"""Latent projection denoising: find the w in a rim-trained generator's
intermediate space whose decoding is perceptually closest to a given
(possibly ambiguous) patch, with autocorrelation regularization keeping
signal out of the optimized noise maps.

The synthesis weights stay strictly frozen; only w and the per-layer
noise maps move. The feature stack for the perceptual term is the shared
DomainFeatureNet rather than a pretrained natural-image network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .fid import FeatureExtractor
from .gan import Checkpoint, sample_noise, synthesis_hash

MIN_PYRAMID_RES = 8


@dataclass
class ProjectionConfig:
    iterations: int = 1000
    alpha: float = 1e5
    lr_init: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    lr_schedule: str = "cosine_ramp"
    w_init: str = "w_avg"
    seed: int = 0
    restarts: int = 1  # multi-start: keep the lowest-objective run

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be > 0")
        if self.lr_schedule != "cosine_ramp":
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.w_init != "w_avg":
            raise ValueError(f"unknown w_init {self.w_init!r}")


@dataclass
class ProjectionResult:
    w_star: np.ndarray
    noise_star: list[np.ndarray]
    x_hat: np.ndarray
    objective_trace: np.ndarray  # total objective per iteration
    final_perceptual: float
    final_noise_reg: float


def _unit_normalize(feat: torch.Tensor) -> torch.Tensor:
    return feat * torch.rsqrt(feat.pow(2).sum(dim=1, keepdim=True) + 1e-8)


def perceptual_loss_t(a: torch.Tensor, b: torch.Tensor,
                      extractor: FeatureExtractor) -> torch.Tensor:
    """Per-sample perceptual loss: sum over feature layers of the mean
    squared difference of channel-unit-normalized feature maps."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    total = torch.zeros(a.shape[0], dtype=a.dtype, device=a.device)
    for fa, fb in zip(extractor.net.layer_features(a),
                      extractor.net.layer_features(b)):
        diff = _unit_normalize(fa) - _unit_normalize(fb)
        total = total + diff.pow(2).mean(dim=(1, 2, 3))
    return total


def perceptual_loss(a: np.ndarray, b: np.ndarray,
                    extractor: FeatureExtractor) -> float:
    with torch.no_grad():
        return float(perceptual_loss_t(
            torch.from_numpy(np.asarray(a, np.float32))[None],
            torch.from_numpy(np.asarray(b, np.float32))[None], extractor)[0])


def _normalize_map(n: torch.Tensor) -> torch.Tensor:
    """Zero-mean unit-variance per map; degenerate (constant) maps pass
    through so the closed-form correlated-map value stays well defined."""
    mean = n.mean(dim=(1, 2, 3), keepdim=True)
    std = n.std(dim=(1, 2, 3), keepdim=True, unbiased=False)
    ok = std > 1e-6
    return torch.where(ok, (n - mean) / std.clamp_min(1e-6), n)


def noise_reg_t(noise: list[torch.Tensor],
                normalize: bool = True) -> torch.Tensor:
    """Per-sample shift-autocorrelation penalty summed over an average-
    pooling pyramid down to 8x8."""
    batch = noise[0].shape[0]
    total = torch.zeros(batch, dtype=noise[0].dtype, device=noise[0].device)
    for n in noise:
        v = _normalize_map(n) if normalize else n
        while True:
            total = total + n_corr(v, -1) + n_corr(v, -2)
            if v.shape[-1] <= MIN_PYRAMID_RES:
                break
            v = F.avg_pool2d(v, 2)
    return total


def n_corr(v: torch.Tensor, dim: int) -> torch.Tensor:
    return (v * torch.roll(v, 1, dims=dim)).mean(dim=(1, 2, 3)).pow(2)


def noise_reg(noise: list[np.ndarray], normalize: bool = True) -> float:
    maps = [torch.from_numpy(np.asarray(n, np.float64)).reshape(1, 1, *np.asarray(n).shape[-2:])
            for n in noise]
    with torch.no_grad():
        return float(noise_reg_t(maps, normalize=normalize)[0])


def _lr_factor(t: int, total: int) -> float:
    """Cosine ramp-up over the first 5% of iterations, cosine decay over
    the final 25%."""
    frac = t / max(total, 1)
    up = min(frac / 0.05, 1.0)
    factor = 0.5 - 0.5 * math.cos(math.pi * up)
    down = min(max((frac - 0.75) / 0.25, 0.0), 1.0)
    factor *= 0.5 + 0.5 * math.cos(math.pi * down)
    return factor


def project_batch(x_tilde: np.ndarray, checkpoint: Checkpoint,
                  config: ProjectionConfig, extractor: FeatureExtractor,
                  ) -> list[ProjectionResult]:
    """Project a batch of patches independently (shared Adam state is
    elementwise, so this equals per-patch runs)."""
    if checkpoint.train_classes != ["rim"]:
        raise ValueError(
            "projection requires a checkpoint trained on unambiguous rims "
            f"only, got classes {checkpoint.train_classes}")
    x = torch.from_numpy(np.asarray(x_tilde, np.float32))
    if x.ndim == 3:
        x = x[None]
    gen = checkpoint.generator
    if x.shape[1] != gen.channels:
        raise ValueError(
            f"patch channels {x.shape[1]} != checkpoint channels {gen.channels}")

    best: list[ProjectionResult | None] = [None] * x.shape[0]
    for restart in range(config.restarts):
        results = _project_once(x, gen, config, extractor,
                                seed=config.seed + restart)
        for i, res in enumerate(results):
            cur = best[i]
            if cur is None or res.objective_trace[-1] < cur.objective_trace[-1]:
                best[i] = res
    return [r for r in best if r is not None]


def _project_once(x: torch.Tensor, gen, config: ProjectionConfig,
                  extractor: FeatureExtractor, seed: int,
                  ) -> list[ProjectionResult]:
    batch = x.shape[0]
    synth_hash_before = synthesis_hash(gen)
    for p in gen.parameters():
        p.requires_grad_(False)

    noise_gen = torch.Generator().manual_seed(seed)
    w = gen.w_avg.detach().clone()[None].repeat(batch, 1).requires_grad_(True)
    noise = [n.requires_grad_(True)
             for n in sample_noise(batch, noise_gen,
                                   gen.synthesis.resolutions)]
    opt = torch.optim.Adam([w] + noise, lr=config.lr_init,
                           betas=(config.beta1, config.beta2))

    trace = np.zeros((config.iterations, batch))
    perceptual = noise_pen = None
    for it in range(config.iterations):
        for group in opt.param_groups:
            group["lr"] = config.lr_init * _lr_factor(it, config.iterations)
        x_hat = gen.synthesize(w, noise)
        perceptual = perceptual_loss_t(x, x_hat, extractor)
        noise_pen = noise_reg_t(noise)
        loss_vec = perceptual + config.alpha * noise_pen
        loss = loss_vec.sum()
        if not torch.isfinite(loss):
            trace = trace[:it + 1]
            raise RuntimeError(
                f"non-finite projection objective at iteration {it}; "
                f"trace of shape {trace.shape} retained")
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            for n in noise:
                n.copy_(_normalize_map(n))
        trace[it] = loss_vec.detach().numpy()

    with torch.no_grad():
        x_hat = gen.synthesize(w, noise)
        perceptual = perceptual_loss_t(x, x_hat, extractor)
        noise_pen = noise_reg_t(noise)
    if synthesis_hash(gen) != synth_hash_before:
        raise RuntimeError("synthesis weights drifted during projection")

    results = []
    for i in range(batch):
        results.append(ProjectionResult(
            w_star=w[i].detach().numpy().copy(),
            noise_star=[n[i].detach().numpy().copy() for n in noise],
            x_hat=x_hat[i].numpy().copy(),
            objective_trace=trace[:, i].copy(),
            final_perceptual=float(perceptual[i]),
            final_noise_reg=float(noise_pen[i]),
        ))
    return results


def project(x_tilde: np.ndarray, checkpoint: Checkpoint,
            config: ProjectionConfig,
            extractor: FeatureExtractor) -> ProjectionResult:
    return project_batch(x_tilde[None] if x_tilde.ndim == 3 else x_tilde,
                         checkpoint, config, extractor)[0]


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB over the [-1, 1] patch range."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(data_range ** 2 / mse)


def gradcheck(objective, point: np.ndarray, epsilon: float,
              indices: np.ndarray | None = None) -> float:
    """Compare autograd gradients of `objective` against central finite
    differences at `point`.

    `objective` maps a 1-d float64 tensor to a scalar tensor. Returns the
    max coordinate error relative to the largest analytic gradient
    magnitude (over the checked subset).
    """
    point = np.asarray(point, np.float64)
    p = torch.tensor(point, requires_grad=True)
    value = objective(p)
    value.backward()
    analytic = p.grad.numpy()

    if indices is None:
        indices = np.arange(point.size)
    numeric = np.zeros(len(indices))
    with torch.no_grad():
        for k, i in enumerate(indices):
            for sign, slot in ((1.0, 0), (-1.0, 1)):
                shifted = point.copy()
                shifted[i] += sign * epsilon
                val = float(objective(torch.tensor(shifted)))
                numeric[k] += sign * val
            numeric[k] /= 2 * epsilon
    scale = max(np.abs(analytic[indices]).max(), 1e-8)
    return float(np.abs(analytic[indices] - numeric).max() / scale)
