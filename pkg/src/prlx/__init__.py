"""Rebalancing toolkit for rare-class lesion patches: phantom corpus,
style-based GAN with adaptive discriminator augmentation, latent
projection denoising, Frechet-distance evaluation, classifier ablations,
and a blinded reader-study service."""

__version__ = "0.1.0"
