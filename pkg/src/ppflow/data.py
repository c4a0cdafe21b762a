"""Procedural class-conditional latents.

Every class owns a few oriented anisotropic Gaussian bumps with their own
per-channel amplitudes; samples jitter the bump centres, orientations and
amplitudes and add a little white noise. The whole set is then shifted and
scaled to zero mean and unit variance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ToyDataset", "gen_dataset"]

_BUMPS = 3


@dataclass
class ToyDataset:
    x: np.ndarray  # (N, C, I, I) float32
    labels: np.ndarray  # (N,) int64
    seed: int
    num_classes: int
    n_per_class: int

    def __len__(self) -> int:
        return len(self.labels)

    def class_means(self) -> np.ndarray:
        return np.stack([self.x[self.labels == k].mean(axis=0) for k in range(self.num_classes)])

    def min_class_mean_distance(self) -> float:
        means = self.class_means().reshape(self.num_classes, -1)
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        return float(dist[~np.eye(self.num_classes, dtype=bool)].min())


def _bumps(n, centers, angles, sig, amps, size):
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    out = np.zeros((n, amps.shape[-1], size, size))
    for b in range(centers.shape[1]):
        cy = centers[:, b, 0, None, None]
        cx = centers[:, b, 1, None, None]
        th = angles[:, b, None, None]
        dy, dx = yy[None] - cy, xx[None] - cx
        u = np.cos(th) * dx + np.sin(th) * dy
        v = -np.sin(th) * dx + np.cos(th) * dy
        g = np.exp(-0.5 * ((u / sig[b, 0]) ** 2 + (v / sig[b, 1]) ** 2))
        out += amps[:, b, :, None, None] * g[:, None]
    return out


def gen_dataset(
    seed: int = 0, num_classes: int = 8, n_per_class: int = 64, channels: int = 4, size: int = 32, noise: float = 0.05
) -> ToyDataset:
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    xs, ys = [], []
    for k in range(num_classes):
        proto = np.random.default_rng([seed, 0, k])
        centers = proto.uniform(0.2 * size, 0.8 * size, size=(_BUMPS, 2))
        angles = proto.uniform(0, np.pi, size=_BUMPS)
        sig = np.stack([proto.uniform(0.08, 0.18, _BUMPS), proto.uniform(0.03, 0.07, _BUMPS)], axis=1) * size
        amps = proto.normal(0, 1, size=(_BUMPS, channels))
        rng = np.random.default_rng([seed, 1, k])
        c = centers[None] + rng.normal(0, 0.04 * size, size=(n_per_class, _BUMPS, 2))
        a = angles[None] + rng.normal(0, 0.15, size=(n_per_class, _BUMPS))
        amp = amps[None] * (1 + 0.15 * rng.normal(size=(n_per_class, _BUMPS, 1)))
        x = _bumps(n_per_class, c, a, sig, amp, size)
        x += noise * rng.standard_normal(x.shape)
        xs.append(x)
        ys.append(np.full(n_per_class, k, dtype=np.int64))
    x = np.concatenate(xs)
    x = (x - x.mean()) / x.std()
    return ToyDataset(x.astype(np.float32), np.concatenate(ys), seed, num_classes, n_per_class)
