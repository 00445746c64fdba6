"""Seeded training loop, condition encoding, and end-to-end generation."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .backbone import Denoiser, ModelParams
from .diffusion import Adam, denoise_loss, make_schedule, sample
from .encoders import SurrogateEncoderParams, SurrogateEncoders
from .errors import ContractError, NumericError
from .numcore import Rng


def build_denoiser(cfg):
    """Denoiser + frozen encoders + schedule from one config."""
    encoders = SurrogateEncoders(SurrogateEncoderParams(
        seed=cfg.seed, d_model=cfg.model.d_model,
        latent_channels=cfg.model.latent.channels,
        patch_size=cfg.model.patch_size,
        stride=cfg.data.image_size // cfg.model.latent.h))
    params = ModelParams.init(
        seed=cfg.seed, depth=cfg.model.depth, d_model=cfg.model.d_model,
        n_heads=cfg.model.n_heads, patch_size=cfg.model.patch_size,
        latent_shape=cfg.latent_shape)
    schedule = make_schedule(cfg.diffusion.T, cfg.diffusion.beta_start,
                             cfg.diffusion.beta_end)
    return Denoiser(params, encoders, cfg.diffusion.T), schedule


def encode_conditions(sample_, denoiser, drop=()):
    """All three condition streams for a sample; dropped ones become null."""
    enc = denoiser.encoders
    streams = {
        "text": enc.encode_text(sample_.caption_ids),
        "layout": enc.encode_layout(sample_.mask),
        "embedding": enc.encode_visual(sample_.image),
    }
    for kind in drop:
        streams = denoiser.drop_condition(kind, streams)
    return streams


def prepare_training_set(samples, denoiser, drop=()):
    """Precompute (z0, condition streams) per sample; encoders are frozen."""
    out = []
    for s in samples:
        z0 = denoiser.encoders.encode_image(s.image)
        out.append((z0, encode_conditions(s, denoiser, drop)))
    return out


def train(denoiser, schedule, samples, steps, batch_size, lr=1e-3,
          clip_norm=1.0, seed=0, drop=(), log=None):
    """Seeded epsilon-prediction training; returns the per-step loss list.

    Deterministic given (samples, config, seed). Aborts with the failing
    step index if the loss ever becomes non-finite.
    """
    if not samples:
        raise ContractError("training needs at least one sample")
    prepared = prepare_training_set(samples, denoiser, drop)
    opt = Adam(denoiser.params.named_trainable(), lr=lr, clip_norm=clip_norm)
    rng = Rng(seed).split("train")
    n = len(prepared)
    losses = []
    for step in range(steps):
        srng = rng.split("step", step)
        idx = srng.split("batch").integers(0, n, shape=batch_size)
        ts = srng.split("t").integers(0, schedule.T, shape=batch_size)
        noise_rng = srng.split("noise")
        batch = []
        for j, (i, t) in enumerate(zip(idx, ts)):
            z0, streams = prepared[i]
            eps = noise_rng.split(j).normal(z0.shape)
            batch.append((z0, eps, int(t), streams))
        loss = denoise_loss(denoiser, batch, schedule)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        opt.zero_grad()
        nc.backward(loss)
        opt.step()
        losses.append(value)
        if log is not None:
            log(step, value)
    return losses


def generate(denoiser, schedule, conditioning_samples, seed=0, drop=(),
             embedding_source="image"):
    """Sample one image per conditioning sample; returns pixel-space images.

    embedding_source selects what feeds the visual-embedding stream: the raw
    conditioning image, or its non-overlapping reference patches (their
    encoder tokens stacked).
    """
    if embedding_source not in ("image", "patches"):
        raise ContractError(
            f"embedding_source must be 'image' or 'patches', "
            f"got {embedding_source!r}")
    from .encoders import TokenStream
    from .synthdata import split_patches

    rng = Rng(seed).split("generate")
    images = []
    for i, s in enumerate(conditioning_samples):
        streams = encode_conditions(s, denoiser, drop=())
        if embedding_source == "patches" and "embedding" not in drop:
            half = s.image.shape[1] // 2
            patches = split_patches(s.image, half, half)
            toks = np.concatenate(
                [denoiser.encoders.encode_visual(p).tokens.data
                 for p in patches])
            streams["embedding"] = TokenStream("embedding", nc.Tensor(toks))
        for kind in drop:
            streams = denoiser.drop_condition(kind, streams)
        z = sample(denoiser, streams, schedule, rng.split("sample", i),
                   denoiser.params.latent_shape)
        img = denoiser.encoders.decode_latent(z)
        images.append(np.clip(img, 0.0, 1.0))
    return images
