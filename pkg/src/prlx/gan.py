"""Style-based generator (mapping + synthesis), discriminator, adaptive
discriminator augmentation, and the training loop.

Desk-scale shrink of the StyleGAN2-ADA recipe: the mapping/synthesis
decomposition, per-layer noise injection, style modulation, and the
r_t-targeted augmentation controller are kept; capacity and resolution
are cut down to 64-d latents and 64x64 patches so everything runs on a
single CPU. Losses are non-saturating logistic with lazy R1 on reals.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Manifest, load_patches, split_leakage_check
from . import fid as fid_mod

LATENT_DIM = 64
BASE_RES = 8
NOISE_RESOLUTIONS = (8, 16, 32, 64)
SYNTH_CHANNELS = (48, 24, 12, 8)  # per noise resolution
LABEL_INDEX = {"rim": 0, "nonrim": 1}

ADA_TARGET = 0.6
ADA_P_MAX = 0.85
ADA_P_STEP = 0.01
ADA_EMA_DECAY = 0.9


@dataclass
class AdaState:
    p: float = 0.0
    rt_estimate: float = 0.0
    rt_target: float = ADA_TARGET


def ada_update(state: AdaState, disc_real_logits: np.ndarray) -> AdaState:
    """EMA the sign of real logits toward r_t; nudge p toward the target."""
    logits = np.asarray(disc_real_logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("ada_update needs a non-empty logit batch")
    rt = ADA_EMA_DECAY * state.rt_estimate + (1 - ADA_EMA_DECAY) * float(
        np.sign(logits).mean())
    p = state.p
    if rt > state.rt_target:
        p += ADA_P_STEP
    elif rt < state.rt_target:
        p -= ADA_P_STEP
    p = min(max(p, 0.0), ADA_P_MAX)
    return AdaState(p=p, rt_estimate=rt, rt_target=state.rt_target)


class MappingNet(nn.Module):
    """4-layer fully connected mapping m: z (optionally + label) -> w."""

    def __init__(self, conditional: bool = False):
        super().__init__()
        self.conditional = conditional
        in_dim = LATENT_DIM * 2 if conditional else LATENT_DIM
        if conditional:
            self.embed = nn.Embedding(2, LATENT_DIM)
        dims = [in_dim] + [LATENT_DIM] * 4
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(4))

    def forward(self, z: torch.Tensor,
                label: torch.Tensor | None = None) -> torch.Tensor:
        if self.conditional and label is None:
            raise ValueError("conditional mapping requires a label")
        if not self.conditional and label is not None:
            raise ValueError("label supplied to unconditional mapping")
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        if self.conditional:
            x = torch.cat([x, self.embed(label)], dim=1)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        return x


class ModulatedConv2d(nn.Module):
    """Weight-modulated convolution with optional demodulation."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 demodulate: bool = True):
        super().__init__()
        self.weight = nn.Parameter(
            torch.randn(out_ch, in_ch, kernel, kernel)
            / math.sqrt(in_ch * kernel * kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(LATENT_DIM, in_ch)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)
        self.demodulate = demodulate
        self.padding = kernel // 2

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        # Modulating the input by the style and rescaling the output is
        # algebraically identical to convolving with modulated weights,
        # but avoids CPU-hostile per-sample grouped convolutions.
        style = self.affine(w)  # (B, in)
        out = F.conv2d(x * style[:, :, None, None], self.weight,
                       padding=self.padding)
        if self.demodulate:
            decoef = torch.rsqrt(
                (self.weight.pow(2).sum(dim=(2, 3))[None]
                 * style.pow(2)[:, None, :]).sum(dim=2) + 1e-8)
            out = out * decoef[:, :, None, None]
        return out + self.bias[None, :, None, None]


class SynthesisNet(nn.Module):
    """Learned 8x8 constant plus three upsampling stages to 64x64.

    Each stage: (upsample) -> modulated 3x3 conv -> noise injection ->
    leaky ReLU; a 1x1 modulated conv maps to output channels with tanh
    (probability channel sigmoid in 3-channel mode).
    """

    def __init__(self, channels: int = 1,
                 resolutions: tuple[int, ...] = NOISE_RESOLUTIONS):
        super().__init__()
        self.out_channels = channels
        self.resolutions = resolutions
        chans = SYNTH_CHANNELS[:len(resolutions)]
        self.const = nn.Parameter(torch.randn(chans[0], BASE_RES, BASE_RES))
        convs = []
        for i in range(len(resolutions)):
            in_ch = chans[max(i - 1, 0)]
            convs.append(ModulatedConv2d(in_ch, chans[i], 3))
        self.convs = nn.ModuleList(convs)
        self.noise_strength = nn.Parameter(torch.zeros(len(resolutions)))
        self.to_out = ModulatedConv2d(chans[-1], channels, 1,
                                      demodulate=False)

    def forward(self, w: torch.Tensor,
                noise: list[torch.Tensor]) -> torch.Tensor:
        if len(noise) != len(self.resolutions):
            raise ValueError(f"expected {len(self.resolutions)} noise maps")
        x = self.const[None].expand(w.shape[0], -1, -1, -1)
        for i, res in enumerate(self.resolutions):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="bilinear",
                                  align_corners=False)
            if noise[i].shape[-2:] != (res, res):
                raise ValueError(
                    f"noise map {i} must be {res}x{res}, got {tuple(noise[i].shape[-2:])}")
            x = self.convs[i](x, w)
            x = x + self.noise_strength[i] * noise[i]
            x = F.leaky_relu(x, 0.2)
        out = self.to_out(x, w)
        if self.out_channels == 3:
            return torch.cat([torch.tanh(out[:, :2]),
                              torch.sigmoid(out[:, 2:])], dim=1)
        return torch.tanh(out)


def sample_noise(batch: int, generator: torch.Generator | None = None,
                 resolutions: tuple[int, ...] = NOISE_RESOLUTIONS,
                 ) -> list[torch.Tensor]:
    """Fresh N(0,1) noise maps, one per synthesis resolution."""
    return [torch.randn(batch, 1, res, res, generator=generator)
            for res in resolutions]


def zero_noise(batch: int,
               resolutions: tuple[int, ...] = NOISE_RESOLUTIONS,
               ) -> list[torch.Tensor]:
    return [torch.zeros(batch, 1, res, res) for res in resolutions]


class Discriminator(nn.Module):
    """Mirror of the synthesis net; projection conditioning when conditional."""

    def __init__(self, channels: int = 1, conditional: bool = False):
        super().__init__()
        self.conditional = conditional
        self.body = nn.Sequential(
            nn.Conv2d(channels, 12, 3, padding=1), nn.LeakyReLU(0.2),
            nn.AvgPool2d(2),
            nn.Conv2d(12, 24, 3, padding=1), nn.LeakyReLU(0.2),
            nn.AvgPool2d(2),
            nn.Conv2d(24, 32, 3, padding=1), nn.LeakyReLU(0.2),
            nn.AvgPool2d(2),
            nn.Conv2d(32, 48, 3, padding=1), nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(48 * BASE_RES * BASE_RES, LATENT_DIM)
        self.head = nn.Linear(LATENT_DIM, 1)
        if conditional:
            self.embed = nn.Embedding(2, LATENT_DIM)

    def forward(self, x: torch.Tensor,
                label: torch.Tensor | None = None) -> torch.Tensor:
        feat = F.leaky_relu(self.fc(self.body(x).flatten(1)), 0.2)
        out = self.head(feat).squeeze(1)
        if self.conditional:
            if label is None:
                raise ValueError("conditional discriminator requires a label")
            out = out + (self.embed(label) * feat).sum(dim=1)
        return out


class Generator(nn.Module):
    """g = s o m with a running w average for projection initialization."""

    def __init__(self, channels: int = 1, conditional: bool = False):
        super().__init__()
        self.mapping = MappingNet(conditional=conditional)
        self.synthesis = SynthesisNet(channels=channels)
        self.conditional = conditional
        self.channels = channels
        self.register_buffer("w_avg", torch.zeros(LATENT_DIM))

    def map(self, z: torch.Tensor,
            label: torch.Tensor | None = None) -> torch.Tensor:
        return self.mapping(z, label)

    def synthesize(self, w: torch.Tensor,
                   noise: list[torch.Tensor]) -> torch.Tensor:
        return self.synthesis(w, noise)

    def forward(self, z: torch.Tensor, noise: list[torch.Tensor],
                label: torch.Tensor | None = None) -> torch.Tensor:
        return self.synthesize(self.map(z, label), noise)


def augment_batch(x: torch.Tensor, p: float,
                  generator: torch.Generator) -> torch.Tensor:
    """ADA pipeline: flip, 90-degree rotation, integer translation <= 8 px,
    intensity scale +-20%; each transform gated per sample with prob p."""
    if p <= 0:
        return x
    b = x.shape[0]

    def gate() -> torch.Tensor:
        return torch.rand(b, generator=generator) < p

    flip = gate()
    if flip.any():
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)

    rot = gate()
    ks = torch.randint(1, 4, (b,), generator=generator)
    if rot.any():
        out = x.clone()
        for k in range(1, 4):
            sel = rot & (ks == k)
            if sel.any():
                out[sel] = torch.rot90(x[sel], k, dims=(-2, -1))
        x = out

    trans = gate()
    shifts = torch.randint(-8, 9, (b, 2), generator=generator)
    if trans.any():
        out = x.clone()
        for i in torch.nonzero(trans).flatten().tolist():
            out[i] = torch.roll(x[i], (int(shifts[i, 0]), int(shifts[i, 1])),
                                dims=(-2, -1))
        x = out

    scale = gate()
    factors = 1.0 + 0.4 * (torch.rand(b, generator=generator) - 0.5)
    if scale.any():
        f = torch.where(scale, factors, torch.ones(b))
        x = (x * f[:, None, None, None]).clamp(-1.0, 1.0)
    return x


@dataclass
class GanTrainConfig:
    learning_rate: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 8
    total_steps: int = 20000
    conditional: bool = False
    channels: int = 1
    r1_gamma: float = 1.0
    r1_interval: int = 16
    ada_update_interval: int = 16
    fid_eval_interval: int = 1000
    fid_eval_samples: int = 200
    ema_decay: float = 0.999  # generator weight EMA used for eval/sampling
    seed: int = 0

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if min(self.learning_rate, self.batch_size, self.total_steps) <= 0:
            raise ValueError("rates and counts must be positive")


def _tensor_checksum(state_dicts: dict[str, dict]) -> str:
    digest = hashlib.sha256()
    for name in sorted(state_dicts):
        for key in sorted(state_dicts[name]):
            digest.update(f"{name}.{key}".encode())
            digest.update(state_dicts[name][key].detach().cpu().numpy()
                          .astype("<f8").tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str | Path, generator: Generator,
                    discriminator: Discriminator, config: GanTrainConfig,
                    ada: AdaState, step: int, metric_log: list[tuple[int, float]],
                    train_classes: list[str], extractor_hash: str) -> None:
    states = {
        "mapping": generator.mapping.state_dict(),
        "synthesis": generator.synthesis.state_dict(),
        "discriminator": discriminator.state_dict(),
    }
    torch.save({
        "version": 1,
        "config": asdict(config),
        "states": states,
        "w_avg": generator.w_avg.clone(),
        "ada": asdict(ada),
        "step": step,
        "metric_log": metric_log,
        "train_classes": train_classes,
        "extractor_hash": extractor_hash,
        "checksum": _tensor_checksum(states),
    }, path)


@dataclass
class Checkpoint:
    generator: Generator
    discriminator: Discriminator
    config: GanTrainConfig
    ada: AdaState
    step: int
    metric_log: list[tuple[int, float]]
    train_classes: list[str]
    extractor_hash: str


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(path, weights_only=True)
    config = GanTrainConfig(**payload["config"])
    if _tensor_checksum(payload["states"]) != payload["checksum"]:
        raise ValueError(f"{path}: checkpoint checksum mismatch")
    gen = Generator(channels=config.channels, conditional=config.conditional)
    gen.mapping.load_state_dict(payload["states"]["mapping"])
    gen.synthesis.load_state_dict(payload["states"]["synthesis"])
    gen.w_avg.copy_(payload["w_avg"])
    disc = Discriminator(channels=config.channels,
                         conditional=config.conditional)
    disc.load_state_dict(payload["states"]["discriminator"])
    gen.eval()
    disc.eval()
    return Checkpoint(
        generator=gen, discriminator=disc, config=config,
        ada=AdaState(**payload["ada"]), step=payload["step"],
        metric_log=[tuple(row) for row in payload["metric_log"]],
        train_classes=list(payload["train_classes"]),
        extractor_hash=payload["extractor_hash"],
    )


def synthesis_hash(generator: Generator) -> str:
    return _tensor_checksum({"synthesis": generator.synthesis.state_dict()})


@dataclass
class TrainResult:
    best_checkpoint: Path
    final_checkpoint: Path
    curve: list[tuple[int, float]]  # (step, domain FID)
    loss_log: list[tuple[int, float, float]]  # (step, d_loss, g_loss)
    best_fid: float
    initial_fid: float


def _training_patches(manifest: Manifest, corpus_root, config: GanTrainConfig
                      ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if config.conditional:
        classes = ["rim", "nonrim"]
    else:
        classes = ["rim"]
    patches, labels = [], []
    for cls in classes:
        recs = manifest.select(label=cls, split="train")
        if not recs:
            raise ValueError(f"no train-split {cls} records in manifest")
        arr = load_patches(manifest, corpus_root, recs)
        patches.append(arr)
        labels.append(np.full(len(arr), LABEL_INDEX[cls], np.int64))
    return np.concatenate(patches), np.concatenate(labels), classes


def train(config: GanTrainConfig, manifest: Manifest, corpus_root: str | Path,
          extractor: fid_mod.FeatureExtractor, out_dir: str | Path,
          progress: bool = False) -> TrainResult:
    """Adversarial training with ADA; checkpoints scored by domain FID.

    Unconditional mode trains on the minority rim class only; conditional
    mode consumes rim and non-rim with labels. The best checkpoint is the
    FID argmin over the eval grid; the (step, FID) curve is written as a
    two-column text series.
    """
    violations = split_leakage_check(manifest)
    if violations:
        raise ValueError(f"manifest fails leakage check: {violations[:3]}")
    reals_np, labels_np, classes = _training_patches(manifest, corpus_root,
                                                     config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    gen = Generator(channels=config.channels, conditional=config.conditional)
    disc = Discriminator(channels=config.channels,
                         conditional=config.conditional)
    # Evaluation/sampling use an exponential moving average of the
    # generator weights; the raw weights oscillate with the adversarial
    # game while the average tracks its slow component.
    gen_ema = Generator(channels=config.channels,
                        conditional=config.conditional)
    gen_ema.load_state_dict(gen.state_dict())
    gen_ema.eval()
    for p in gen_ema.parameters():
        p.requires_grad_(False)

    def update_ema():
        with torch.no_grad():
            for p_ema, p in zip(gen_ema.parameters(), gen.parameters()):
                p_ema.mul_(config.ema_decay).add_(
                    p, alpha=1 - config.ema_decay)
            gen_ema.w_avg.copy_(gen.w_avg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate,
                             betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate,
                             betas=(config.beta1, config.beta2))

    reals = torch.from_numpy(reals_np.astype(np.float32))
    labels = torch.from_numpy(labels_np)
    rng = np.random.default_rng(config.seed)
    aug_gen = torch.Generator().manual_seed(config.seed + 1)
    noise_gen = torch.Generator().manual_seed(config.seed + 2)
    ada = AdaState()
    curve: list[tuple[int, float]] = []
    loss_log: list[tuple[int, float, float]] = []
    best_fid = math.inf
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"

    ref_stats = fid_mod.stats_for_patches(reals_np, extractor)

    def eval_fid(step: int) -> float:
        with torch.no_grad():
            n = config.fid_eval_samples
            z = torch.randn(n, LATENT_DIM, generator=noise_gen)
            lab = (labels[rng.integers(0, len(labels), n)]
                   if config.conditional else None)
            fakes = gen_ema(z, sample_noise(n, noise_gen), lab).numpy()
        stats = fid_mod.stats_for_patches(fakes, extractor)
        return fid_mod.frechet_distance(stats, ref_stats)

    initial_fid = eval_fid(0)
    curve.append((0, initial_fid))

    def d_logits(x, lab):
        return disc(augment_batch(x, ada.p, aug_gen), lab)

    gen.train()
    disc.train()
    for step in range(1, config.total_steps + 1):
        idx = torch.from_numpy(rng.integers(0, len(reals), config.batch_size))
        real = reals[idx]
        lab = labels[idx] if config.conditional else None

        z = torch.randn(config.batch_size, LATENT_DIM, generator=noise_gen)
        with torch.no_grad():
            w = gen.map(z, lab)
            gen.w_avg.mul_(0.995).add_(0.005 * w.mean(dim=0))
        fake = gen(z, sample_noise(config.batch_size, noise_gen), lab)

        # Discriminator step (same augmentation pipeline on both branches).
        real_logits = d_logits(real, lab)
        fake_logits = d_logits(fake.detach(), lab)
        d_loss = (F.softplus(-real_logits) + F.softplus(fake_logits)).mean()
        if step % config.r1_interval == 0:
            real_req = real.clone().requires_grad_(True)
            r1_logits = disc(real_req, lab)
            grads = torch.autograd.grad(r1_logits.sum(), real_req,
                                        create_graph=True)[0]
            r1 = grads.pow(2).sum(dim=(1, 2, 3)).mean()
            d_loss = d_loss + (config.r1_gamma / 2) * r1 * config.r1_interval
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # Generator step.
        g_loss = F.softplus(-d_logits(fake, lab)).mean()
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        update_ema()

        loss_log.append((step, float(d_loss.detach()), float(g_loss.detach())))
        if not (math.isfinite(loss_log[-1][1]) and math.isfinite(loss_log[-1][2])):
            save_checkpoint(final_path, gen_ema, disc, config, ada, step, curve,
                            classes, extractor.content_hash)
            raise RuntimeError(f"non-finite loss at step {step}; "
                               f"last checkpoint at {final_path}")

        if step % config.ada_update_interval == 0:
            ada = ada_update(ada, real_logits.detach().numpy())

        if step % config.fid_eval_interval == 0 or step == config.total_steps:
            fid_value = eval_fid(step)
            curve.append((step, fid_value))
            if progress:
                print(f"step {step}: fid {fid_value:.3f} ada_p {ada.p:.2f}")
            if fid_value < best_fid:
                best_fid = fid_value
                save_checkpoint(best_path, gen_ema, disc, config, ada, step,
                                curve, classes, extractor.content_hash)

    save_checkpoint(final_path, gen_ema, disc, config, ada, config.total_steps,
                    curve, classes, extractor.content_hash)
    if not best_path.exists():
        save_checkpoint(best_path, gen_ema, disc, config, ada, config.total_steps,
                        curve, classes, extractor.content_hash)
    curve_path = out_dir / "fid_curve.txt"
    curve_path.write_text(
        "".join(f"{step} {value:.6f}\n" for step, value in curve))
    return TrainResult(best_checkpoint=best_path, final_checkpoint=final_path,
                       curve=curve, loss_log=loss_log,
                       best_fid=min(best_fid, initial_fid),
                       initial_fid=initial_fid)


@dataclass
class SampleSet:
    patches: np.ndarray  # N x C x H x W
    z: np.ndarray
    w: np.ndarray
    labels: np.ndarray | None


def sample(checkpoint: Checkpoint, n: int, seed: int,
           label: str | None = None, batch_size: int = 64) -> SampleSet:
    """Draw n patches with stored (z, w) provenance."""
    gen = checkpoint.generator
    if checkpoint.config.conditional and label is None:
        raise ValueError("conditional checkpoint requires a label")
    if not checkpoint.config.conditional and label is not None:
        raise ValueError("label supplied to unconditional checkpoint")
    g = torch.Generator().manual_seed(seed)
    zs, ws, outs = [], [], []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            b = min(batch_size, n - start)
            z = torch.randn(b, LATENT_DIM, generator=g)
            lab = (torch.full((b,), LABEL_INDEX[label], dtype=torch.long)
                   if label is not None else None)
            w = gen.map(z, lab)
            out = gen.synthesize(w, sample_noise(b, g))
            zs.append(z.numpy())
            ws.append(w.numpy())
            outs.append(out.numpy())
    labels_arr = (np.full(n, LABEL_INDEX[label], np.int64)
                  if label is not None else None)
    return SampleSet(patches=np.concatenate(outs), z=np.concatenate(zs),
                     w=np.concatenate(ws), labels=labels_arr)
