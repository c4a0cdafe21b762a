"""Fréchet distance between Gaussian fits of randomly projected latents.

This is a cheap, dependency-free comparison for toy latents; it is not FID.
"""
from __future__ import annotations

import numpy as np

__all__ = ["StatisticsError", "projection_matrix", "project", "gaussian_stats", "frechet_distance", "desk_fid"]

FEATURE_DIM = 64


class StatisticsError(ValueError):
    """Too few samples to fit a Gaussian."""


def projection_matrix(input_dim: int, proj_seed: int = 0, dim: int = FEATURE_DIM) -> np.ndarray:
    rng = np.random.default_rng(proj_seed)
    return rng.standard_normal((input_dim, dim)) / np.sqrt(input_dim)


def project(latents: np.ndarray, proj_seed: int = 0, dim: int = FEATURE_DIM) -> np.ndarray:
    flat = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    return flat @ projection_matrix(flat.shape[1], proj_seed, dim)


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise StatisticsError(f"need at least 2 feature rows, got shape {features.shape}")
    return features.mean(axis=0), np.cov(features, rowvar=False)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross term uses tr (S1^(1/2) S2 S1^(1/2))^(1/2), which equals
    tr (S1 S2)^(1/2) and stays symmetric; negative eigenvalues are clipped.
    """
    r1 = _psd_sqrt(sigma1)
    cross = np.trace(_psd_sqrt(r1 @ sigma2 @ r1))
    diff = mu1 - mu2
    return max(0.0, float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2 * cross))


def desk_fid(generated: np.ndarray, reference: np.ndarray, proj_seed: int = 0) -> float:
    generated, reference = np.asarray(generated), np.asarray(reference)
    if generated.shape[1:] != reference.shape[1:]:
        raise ValueError(f"sample shapes differ: {generated.shape[1:]} vs {reference.shape[1:]}")
    fg = gaussian_stats(project(generated, proj_seed))
    fr = gaussian_stats(project(reference, proj_seed))
    return frechet_distance(fr[0], fr[1], fg[0], fg[1])
