"""Evaluation metrics: Fréchet feature distance, embedding cosine similarity,
and Dice mask faithfulness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import SurrogateEncoders
from .errors import ContractError, NumericError, ShapeError
from .synthdata import segment_oracle


@dataclass
class FeatureStats:
    """Gaussian fit (mean, covariance) of a feature set."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ContractError(f"feature stats need n >= 2, got {self.n}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-12):
            raise ContractError("covariance must be symmetric")


def feature_stats(images, encoder: SurrogateEncoders):
    """Mean and unbiased covariance of pooled visual-encoder features."""
    if len(images) < 2:
        raise ContractError(f"feature stats need >= 2 images, got {len(images)}")
    feats = np.stack([encoder.visual_feature(img) for img in images])
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (len(images) - 1)
    sigma = (sigma + sigma.T) / 2.0
    return FeatureStats(mu=mu, sigma=sigma, n=len(images))


def _sqrtm_psd(mat):
    """Symmetric PSD square root via eigendecomposition."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if not np.all(np.isfinite(vals)):
        raise NumericError("eigendecomposition produced non-finite values")
    if vals.min() < -1e-6:
        raise NumericError(f"matrix not PSD (min eigenvalue {vals.min():.2e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term uses the symmetric product S_a^{1/2} S_b S_a^{1/2}, whose
    eigenvalues are clamped at zero before the root; the result is reported
    clamped to >= 0.
    """
    if a.mu.shape != b.mu.shape:
        raise ShapeError(
            f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    root_a = _sqrtm_psd(a.sigma)
    inner = root_a @ b.sigma @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if not np.all(np.isfinite(vals)):
        raise NumericError("eigendecomposition failed in frechet_distance")
    vals = np.where(vals < 1e-9, np.clip(vals, 0.0, None), vals)
    trace_sqrt = np.sqrt(vals).sum()
    fd = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma)
               - 2.0 * trace_sqrt)
    return max(fd, 0.0)


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= 1e-12 or nv <= 1e-12:
        raise ContractError("cosine similarity of (near-)zero vector")
    return float(u @ v / (nu * nv))


def dice(a, b):
    """Overlap 2|A∩B| / (|A|+|B|); both-empty defined as 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    for m in (a, b):
        if not np.all((m == 0) | (m == 1)):
            raise ContractError("dice requires binary masks")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * (a * b).sum() / total)


def evaluate_run(real_images, generated_images, layouts, encoder):
    """Aggregate report: FID, paired cosine similarity, layout faithfulness."""
    report = {
        "fid": frechet_distance(feature_stats(real_images, encoder),
                                feature_stats(generated_images, encoder)),
        "n_real": len(real_images),
        "n_gen": len(generated_images),
    }
    if len(real_images) == len(generated_images):
        sims = [cosine_similarity(encoder.visual_feature(r),
                                  encoder.visual_feature(g))
                for r, g in zip(real_images, generated_images)]
        report["mean_cosine"] = float(np.mean(sims))
    else:
        report["mean_cosine"] = None
    if layouts is not None:
        scores = [dice(segment_oracle(g), m)
                  for g, m in zip(generated_images, layouts)]
        report["mean_dice"] = float(np.mean(scores))
    else:
        report["mean_dice"] = None
    return report
