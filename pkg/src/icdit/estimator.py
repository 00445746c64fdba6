"""Scikit-learn-style wrapper around the training loop and sampler."""

from __future__ import annotations

from .config import Config, config_from_dict
from .errors import ContractError
from .train import build_denoiser, generate, train


class LayoutDiffusionGenerator:
    """Layout-conditioned diffusion image generator with a fit/sample API.

    Parameters mirror the JSON run configuration; the estimator owns a
    denoiser + noise schedule built lazily at fit time.
    """

    def __init__(self, seed=0, depth=2, d_model=32, n_heads=4, patch_size=2,
                 steps=1000, batch_size=8, lr=1e-3, clip_norm=1.0,
                 n_diffusion_steps=200, drop=()):
        self.seed = seed
        self.depth = depth
        self.d_model = d_model
        self.n_heads = n_heads
        self.patch_size = patch_size
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.clip_norm = clip_norm
        self.n_diffusion_steps = n_diffusion_steps
        self.drop = tuple(drop)

    _PARAM_NAMES = ("seed", "depth", "d_model", "n_heads", "patch_size",
                    "steps", "batch_size", "lr", "clip_norm",
                    "n_diffusion_steps", "drop")

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params):
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ContractError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def _config(self):
        return config_from_dict({
            "seed": self.seed,
            "model": {"depth": self.depth, "d_model": self.d_model,
                      "n_heads": self.n_heads,
                      "patch_size": self.patch_size},
            "diffusion": {"T": self.n_diffusion_steps},
            "train": {"steps": self.steps, "batch_size": self.batch_size,
                      "lr": self.lr, "clip_norm": self.clip_norm},
        })

    def fit(self, samples):
        """Train the denoiser on a list of dataset samples."""
        self.denoiser_, self.schedule_ = build_denoiser(self._config())
        self.losses_ = train(
            self.denoiser_, self.schedule_, samples, steps=self.steps,
            batch_size=self.batch_size, lr=self.lr, clip_norm=self.clip_norm,
            seed=self.seed, drop=self.drop)
        return self

    def sample(self, conditioning_samples, seed=None,
               embedding_source="image"):
        """Generate one image per conditioning sample; requires fit()."""
        if not hasattr(self, "denoiser_"):
            raise ContractError("sample() called before fit()")
        return generate(self.denoiser_, self.schedule_, conditioning_samples,
                        seed=self.seed if seed is None else seed,
                        drop=self.drop, embedding_source=embedding_source)
