"""Procedural lesion phantoms: rim, non-rim, and ambiguous 64x64 patches.

The phantoms stand in for a clinical susceptibility-map corpus. A rim
lesion is a diamagnetic (negative) core wrapped by a paramagnetic
(positive) ring that may cover only part of the circumference; a non-rim
lesion is a uniformly hyperintense blob; an ambiguous lesion is a faint
or partial ring obscured by artifact streaks. A matched-filter ring
statistic computed from the same analytic geometry acts as the
ground-truth separability oracle for everything downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve

from .corpus import (
    PATCH_SIZE,
    LesionRecord,
    Manifest,
    save_manifest,
    validate_patch,
    write_patch,
)

EDGE_SOFTNESS = 0.7  # px, sigmoid edge width of core/ring profiles
BACKGROUND_SIGMA = 0.05
BACKGROUND_SMOOTH = 1.2
MARGIN_PX = 2.0

# Paper-shaped defaults: 260 rim / 520 non-rim with a 3/13 test fraction
# reproduces the 200/60 and 400/120 train/test counts.
TEST_FRACTION = 3.0 / 13.0


class ParameterError(ValueError):
    """Lesion geometry does not fit the patch with the required margin."""


@dataclass
class LesionParams:
    core_radius_px: float = 6.0
    ring_width_px: float = 2.0
    ring_contrast: float = 1.0
    ring_arc_fraction: float = 1.0
    core_intensity: float = -0.5
    ring_intensity: float = 0.6
    background_texture_seed: int = 0
    center_jitter_px: float = 2.0


@dataclass
class RenderedLesion:
    """A rendered patch plus the analytic masks used to draw it."""

    patch: np.ndarray  # C x 64 x 64 float32
    label: str
    ambiguous: bool
    ring_mask: np.ndarray  # boolean, rendered (arc-limited) ring support
    core_mask: np.ndarray
    background_mask: np.ndarray
    params: LesionParams
    seed: int


def _check_geometry(params: LesionParams) -> None:
    extent = (params.core_radius_px + params.ring_width_px
              + params.center_jitter_px + MARGIN_PX)
    if extent > PATCH_SIZE / 2:
        raise ParameterError(
            f"lesion extent {extent:.1f} px exceeds the patch half-size "
            f"{PATCH_SIZE / 2:.0f} px"
        )
    if not (0.0 <= params.ring_contrast <= 1.0):
        raise ParameterError(f"ring_contrast {params.ring_contrast} outside [0, 1]")
    if not (0.0 < params.ring_arc_fraction <= 1.0):
        raise ParameterError(
            f"ring_arc_fraction {params.ring_arc_fraction} outside (0, 1]"
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _background(rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, BACKGROUND_SIGMA, (PATCH_SIZE, PATCH_SIZE))
    return gaussian_filter(noise, BACKGROUND_SMOOTH).astype(np.float64)


def _render(params: LesionParams, seed: int, *, lesion_kind: str,
            streaks: bool, multi_contrast: bool) -> RenderedLesion:
    """Shared renderer; lesion_kind selects rim-style or blob-style interior."""
    _check_geometry(params)
    rng = np.random.default_rng([seed, params.background_texture_seed])
    bg = _background(rng)

    jitter = rng.uniform(-params.center_jitter_px, params.center_jitter_px, 2)
    cy = PATCH_SIZE / 2 - 0.5 + jitter[0]
    cx = PATCH_SIZE / 2 - 0.5 + jitter[1]
    yy, xx = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE]
    r = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)

    r_core = params.core_radius_px
    r_out = r_core + params.ring_width_px
    core_profile = _sigmoid((r_core - r) / EDGE_SOFTNESS)
    ring_profile = (_sigmoid((r - r_core) / EDGE_SOFTNESS)
                    * _sigmoid((r_out - r) / EDGE_SOFTNESS))

    arc_center = rng.uniform(-math.pi, math.pi)
    ang = np.angle(np.exp(1j * (theta - arc_center)))
    half_arc = math.pi * params.ring_arc_fraction
    arc_profile = _sigmoid((half_arc - np.abs(ang)) / 0.1)
    ring_render = ring_profile * arc_profile

    if lesion_kind == "blob":
        blob_intensity = rng.uniform(0.25, 0.5)
        blob_profile = _sigmoid((r_out - r) / EDGE_SOFTNESS)
        img = bg + blob_intensity * blob_profile
        ring_strength = 0.0
    else:
        img = (bg + params.core_intensity * core_profile
               + params.ring_intensity * params.ring_contrast * ring_render)
        ring_strength = params.ring_contrast

    if streaks:
        # Obscuring artifacts: bands of granular high-frequency noise
        # through the lesion. Zero-mean texture leaves the smooth image
        # content alone but swamps the residual-noise estimate, which is
        # what drags the normalized matched-filter statistic down.
        n_streaks = int(rng.integers(2, 5))
        for _ in range(n_streaks):
            angle = rng.uniform(0, math.pi)
            offset = rng.uniform(-r_out, r_out)
            width = rng.uniform(2.0, 4.0)
            amp = rng.uniform(0.25, 0.45)
            dist = np.abs((xx - cx) * math.cos(angle)
                          + (yy - cy) * math.sin(angle) - offset)
            band = _sigmoid((width - dist) / EDGE_SOFTNESS)
            grain = rng.normal(0.0, 1.0, (PATCH_SIZE, PATCH_SIZE))
            img = img + amp * band * grain

    qsm = np.clip(img, -1.0, 1.0).astype(np.float32)

    # The ring mask reflects what was rendered: blobs have no ring.
    ring_mask = (ring_render > 0.5) if ring_strength > 0 else np.zeros(
        (PATCH_SIZE, PATCH_SIZE), bool)
    core_mask = core_profile > 0.5
    background_mask = r > r_out + 2.0

    if multi_contrast:
        support = _sigmoid((r_out + 1.5 - r) / EDGE_SOFTNESS)
        flair = gaussian_filter(0.5 * support, 1.0)
        flair = np.clip(flair + 0.2 * bg, -1.0, 1.0).astype(np.float32)
        prob = np.clip(ring_render * (ring_strength > 0), 0.0, 1.0)
        prob[core_mask] = 0.0
        prob[prob < 1e-3] = 0.0
        patch = np.stack([qsm, flair, prob.astype(np.float32)])
    else:
        patch = qsm[None]

    validate_patch(patch)
    if lesion_kind == "blob":
        label = "nonrim"
    else:
        label = "ambiguous" if streaks or ring_strength < 0.7 else "rim"
    return RenderedLesion(
        patch=patch,
        label=label,
        ambiguous=label == "ambiguous",
        ring_mask=ring_mask,
        core_mask=core_mask,
        background_mask=background_mask,
        params=params,
        seed=seed,
    )


def generate_rim(params: LesionParams, seed: int,
                 multi_contrast: bool = False) -> RenderedLesion:
    """Render an unambiguous rim lesion; requires ring_contrast >= 0.7."""
    if params.ring_contrast < 0.7:
        raise ParameterError(
            f"unambiguous rim needs ring_contrast >= 0.7, got {params.ring_contrast}"
        )
    return _render(params, seed, lesion_kind="rim", streaks=False,
                   multi_contrast=multi_contrast)


def generate_nonrim(params: LesionParams, seed: int,
                    multi_contrast: bool = False) -> RenderedLesion:
    """Render a uniformly hyperintense non-rim lesion (ring forced off)."""
    params = replace(params, ring_contrast=0.0)
    return _render(params, seed, lesion_kind="blob", streaks=False,
                   multi_contrast=multi_contrast)


def generate_ambiguous(params: LesionParams, seed: int,
                       multi_contrast: bool = False,
                       streaks: bool = True) -> RenderedLesion:
    """Render a faint/partial rim with artifact streaks; label = ambiguous.

    Ring contrast and arc fraction are drawn from the ambiguous regime
    ([0.15, 0.45] and [0.2, 0.5]) using a generator derived from `seed`,
    so the caller-supplied params act as a geometric template only.
    """
    draw = np.random.default_rng([seed, params.background_texture_seed, 0xA3B])
    params = replace(
        params,
        ring_contrast=float(draw.uniform(0.15, 0.45)),
        ring_arc_fraction=float(draw.uniform(0.2, 0.5)),
    )
    return _render(params, seed, lesion_kind="rim", streaks=streaks,
                   multi_contrast=multi_contrast)


def _ring_templates() -> list[np.ndarray]:
    """Zero-mean, unit-norm ring-vs-core kernels over a small radius bank."""
    templates = []
    for radius in (4.0, 5.0, 6.0, 7.0, 8.0):
        for width in (1.5, 2.5):
            size = int(2 * (radius + width) + 5)
            c = (size - 1) / 2
            yy, xx = np.mgrid[0:size, 0:size]
            r = np.hypot(yy - c, xx - c)
            ring = ((r >= radius) & (r <= radius + width)).astype(np.float64)
            core = (r < radius).astype(np.float64)
            t = ring / ring.sum() - core / core.sum()
            t -= t.mean()
            t /= np.linalg.norm(t)
            templates.append(t)
    return templates


_TEMPLATES = _ring_templates()


NOISE_REF = 0.05  # residual scale of a clean patch, for CFAR normalization


def ring_statistic(patch: np.ndarray) -> float:
    """Noise-normalized matched-filter rim score.

    Max ring-template response over positions, divided by a residual
    high-pass noise estimate (constant-false-alarm-rate style), so both
    a missing/faint ring and granular artifact noise depress the score.
    Accepts a patch (C x H x W, channel 0 used) or a bare H x W image.
    High for rim lesions (positive annulus over negative core), near zero
    for non-rim blobs.
    """
    img = np.asarray(patch, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    best = -np.inf
    for t in _TEMPLATES:
        resp = fftconvolve(img, t[::-1, ::-1], mode="valid")
        best = max(best, float(resp.max()))
    sigma_hp = float(np.std(img - gaussian_filter(img, 1.5)))
    return best / math.sqrt(1.0 + (sigma_hp / NOISE_REF) ** 2)


def _default_params(rng: np.random.Generator) -> LesionParams:
    return LesionParams(
        core_radius_px=float(rng.uniform(4.0, 8.0)),
        ring_width_px=float(rng.uniform(1.2, 2.5)),
        ring_contrast=float(rng.uniform(0.75, 1.0)),
        ring_arc_fraction=float(rng.uniform(0.55, 1.0)),
        background_texture_seed=int(rng.integers(0, 2**31)),
    )


def sample_lesion(kind: str, seed: int, multi_contrast: bool = False,
                  param_seed: int | None = None) -> RenderedLesion:
    """Draw randomized geometry for `kind` and render it, all from `seed`."""
    rng = np.random.default_rng([seed if param_seed is None else param_seed, 0x9E1])
    params = _default_params(rng)
    if kind == "rim":
        return generate_rim(params, seed, multi_contrast)
    if kind == "nonrim":
        return generate_nonrim(params, seed, multi_contrast)
    if kind == "ambiguous":
        return generate_ambiguous(params, seed, multi_contrast)
    raise ValueError(f"unknown lesion kind {kind!r}")


def generate_corpus(n_rim: int, n_nonrim: int, n_ambiguous: int,
                    multi_contrast: bool, seed: int,
                    out_dir: str | Path) -> Manifest:
    """Render a labeled corpus to `out_dir` and write its manifest.

    Splits follow the paper-shaped 3/13 test fraction per class (rim
    260 -> 200 train / 60 test); ambiguous lesions all land in train,
    since they exist to be denoised into training data.
    """
    if min(n_rim, n_nonrim, n_ambiguous) < 0:
        raise ValueError("corpus counts must be >= 0")
    out_dir = Path(out_dir)
    patches_dir = out_dir / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)

    channels = 3 if multi_contrast else 1
    records: list[LesionRecord] = []
    next_seed = seed * 1_000_003

    for kind, count in (("rim", n_rim), ("nonrim", n_nonrim),
                        ("ambiguous", n_ambiguous)):
        n_test = 0 if kind == "ambiguous" else round(count * TEST_FRACTION)
        for i in range(count):
            lesion_seed = next_seed + i
            rendered = sample_lesion(kind, lesion_seed, multi_contrast)
            rec_id = f"{kind}-{i:05d}"
            rel = f"patches/{rec_id}.qpat"
            write_patch(rendered.patch, out_dir / rel)
            records.append(LesionRecord(
                id=rec_id,
                file=rel,
                label=kind,
                split="test" if i < n_test else "train",
                source="phantom",
                seed_or_latent_ref=str(lesion_seed),
            ))
        next_seed += count * 7 + 1

    manifest = Manifest(channels=channels, records=records)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
