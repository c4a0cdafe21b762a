"""Stage schedules, per-stage Patchify/Unpatchify and projection conversion.

Patch vectors are flattened channel-major, then row-major inside the patch:
coordinate ``(c, i, j)`` of a ``ph x pw`` patch lands at ``c*ph*pw + i*pw + j``.
Tokens are ordered row-major over the patch grid.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

__all__ = [
    "ConfigurationError",
    "Stage",
    "PatchSchedule",
    "make_schedule",
    "stage_of",
    "patch_dim",
    "grid_shape",
    "patchify",
    "unpatchify",
    "patchify_batch",
    "unpatchify_batch",
    "init_from_pretrained",
    "pos_embed",
]


class ConfigurationError(ValueError):
    """An invalid schedule, patch size or model configuration."""


@dataclass(frozen=True)
class Stage:
    t_lo: float
    t_hi: float
    patch_h: int
    patch_w: int
    cfg_scale: float = 1.0

    @property
    def patch(self) -> tuple[int, int]:
        return (self.patch_h, self.patch_w)


@dataclass(frozen=True)
class PatchSchedule:
    """Ordered stages partitioning [0, 1]; the last interval is closed at 1."""

    stages: tuple[Stage, ...]
    latent_size: int
    _bounds: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_bounds", tuple(s.t_hi for s in self.stages[:-1]))

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, i: int) -> Stage:
        return self.stages[i]

    @property
    def boundaries(self) -> list[float]:
        return list(self._bounds)

    @property
    def patch_sizes(self) -> list[tuple[int, int]]:
        return [s.patch for s in self.stages]

    @property
    def cfg_scales(self) -> list[float]:
        return [s.cfg_scale for s in self.stages]

    def token_count(self, stage: int, latent_size: int | None = None) -> int:
        gh, gw = grid_shape(latent_size or self.latent_size, self.stages[stage].patch)
        return gh * gw

    def to_dict(self) -> dict:
        return {
            "boundaries": self.boundaries,
            "patch_sizes": [list(p) for p in self.patch_sizes],
            "cfg_scales": self.cfg_scales,
            "latent_size": self.latent_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchSchedule":
        return make_schedule(d["boundaries"], [tuple(p) for p in d["patch_sizes"]], d["cfg_scales"], d["latent_size"])

    def with_cfg(self, cfg_scales: Sequence[float]) -> "PatchSchedule":
        return make_schedule(self.boundaries, self.patch_sizes, cfg_scales, self.latent_size)


def make_schedule(
    boundaries: Sequence[float],
    patch_sizes: Sequence[tuple[int, int]],
    cfg_scales: Sequence[float],
    latent_size: int,
) -> PatchSchedule:
    boundaries = [float(b) for b in boundaries]
    patch_sizes = [(int(p[0]), int(p[1])) for p in patch_sizes]
    cfg_scales = [float(c) for c in cfg_scales]
    n = len(patch_sizes)
    if n == 0:
        raise ConfigurationError("a schedule needs at least one stage")
    if len(boundaries) != n - 1 or len(cfg_scales) != n:
        raise ConfigurationError(
            f"inconsistent lengths: {len(boundaries)} boundaries, {n} patch sizes, {len(cfg_scales)} cfg scales"
        )
    if any(not 0.0 < b < 1.0 for b in boundaries) or any(a >= b for a, b in zip(boundaries, boundaries[1:])):
        raise ConfigurationError(f"boundaries must be strictly increasing inside (0, 1): {boundaries}")
    if any(c < 0 for c in cfg_scales):
        raise ConfigurationError("cfg scales must be non-negative")
    for ph, pw in patch_sizes:
        if ph <= 0 or pw <= 0 or latent_size % ph or latent_size % pw:
            raise ConfigurationError(f"patch {ph}x{pw} does not divide latent size {latent_size}")
    areas = [ph * pw for ph, pw in patch_sizes]
    if any(a < b for a, b in zip(areas, areas[1:])):
        raise ConfigurationError(f"patch areas must be non-increasing toward low noise: {patch_sizes}")
    edges = [0.0] + boundaries + [1.0]
    stages = tuple(
        Stage(edges[i], edges[i + 1], ph, pw, cfg_scales[i]) for i, (ph, pw) in enumerate(patch_sizes)
    )
    return PatchSchedule(stages, int(latent_size))


def stage_of(t: float, schedule: PatchSchedule) -> int:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return bisect.bisect_right(schedule._bounds, t)


def patch_dim(channels: int, patch: tuple[int, int]) -> int:
    return channels * patch[0] * patch[1]


def grid_shape(latent_size: int, patch: tuple[int, int]) -> tuple[int, int]:
    ph, pw = patch
    if latent_size % ph or latent_size % pw:
        raise DimensionError(f"patch {ph}x{pw} does not divide latent size {latent_size}")
    return latent_size // ph, latent_size // pw


def _to_patches(x: Tensor, patch: tuple[int, int]) -> Tensor:
    # (N, C, I, I) -> (N, L, C*ph*pw)
    n, c, h, w = x.shape
    ph, pw = patch
    if h % ph or w % pw:
        raise DimensionError(f"patch {ph}x{pw} does not divide spatial size {h}x{w}")
    gh, gw = h // ph, w // pw
    y = T.reshape(x, (n, c, gh, ph, gw, pw))
    y = T.permute(y, (0, 2, 4, 1, 3, 5))
    return T.reshape(y, (n, gh * gw, c * ph * pw))


def _from_patches(y: Tensor, patch: tuple[int, int], channels: int, grid: tuple[int, int]) -> Tensor:
    # (N, L, C*ph*pw) -> (N, C, I, I)
    n = y.shape[0]
    ph, pw = patch
    gh, gw = grid
    if y.shape[1] != gh * gw or y.shape[2] != channels * ph * pw:
        raise DimensionError(f"token block {y.shape} inconsistent with grid {grid} and patch {patch}")
    z = T.reshape(y, (n, gh, gw, channels, ph, pw))
    z = T.permute(z, (0, 3, 1, 4, 2, 5))
    return T.reshape(z, (n, channels, gh * ph, gw * pw))


def patchify_batch(latents: Tensor, patch: tuple[int, int], w_in: Tensor, b_in: Tensor) -> Tensor:
    """(N, C, I, I) -> tokens (N, L, d)."""
    patches = _to_patches(latents, patch)
    if w_in.shape[1] != patches.shape[-1]:
        raise DimensionError(f"projection expects patch dim {w_in.shape[1]}, patch {patch} gives {patches.shape[-1]}")
    return T.linear(patches, w_in, b_in)


def unpatchify_batch(
    tokens: Tensor, patch: tuple[int, int], w_out: Tensor, b_out: Tensor, channels: int, grid: tuple[int, int]
) -> Tensor:
    """tokens (N, L, d) -> (N, C, I, I)."""
    if w_out.shape[1] != tokens.shape[-1]:
        raise DimensionError(f"output projection expects width {w_out.shape[1]}, got {tokens.shape[-1]}")
    return _from_patches(T.linear(tokens, w_out, b_out), patch, channels, grid)


@dataclass
class TokenSeq:
    tokens: Tensor
    grid_h: int
    grid_w: int
    stage: int


def _wrap(a) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(a)


def patchify(latent, stage: int, proj: dict, schedule: PatchSchedule) -> TokenSeq:
    """Project a single (C, I, I) latent into stage tokens.

    ``proj`` maps ``patch.{s}.w_in`` / ``patch.{s}.b_in`` names to arrays or tensors.
    """
    x = _wrap(latent)
    if x.ndim != 3:
        raise DimensionError(f"latent must be (C, I, I), got {x.shape}")
    patch = schedule[stage].patch
    grid = grid_shape(x.shape[1], patch)
    tok = patchify_batch(T.reshape(x, (1,) + x.shape), patch, _wrap(proj[f"patch.{stage}.w_in"]), _wrap(proj[f"patch.{stage}.b_in"]))
    return TokenSeq(T.reshape(tok, tok.shape[1:]), grid[0], grid[1], stage)


def unpatchify(seq: TokenSeq, stage: int, proj: dict, schedule: PatchSchedule, channels: int) -> Tensor:
    patch = schedule[stage].patch
    if seq.stage != stage or seq.tokens.shape[0] != seq.grid_h * seq.grid_w:
        raise DimensionError(f"token grid {seq.grid_h}x{seq.grid_w} (stage {seq.stage}) does not match stage {stage}")
    tok = T.reshape(seq.tokens, (1,) + seq.tokens.shape)
    out = unpatchify_batch(
        tok, patch, _wrap(proj[f"patch.{stage}.w_out"]), _wrap(proj[f"patch.{stage}.b_out"]), channels, (seq.grid_h, seq.grid_w)
    )
    return T.reshape(out, out.shape[1:])


def _source_index(channels: int, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """For each flattened coordinate of a ``dst`` patch: the matching ``src`` coordinate."""
    sh, sw = src
    dh, dw = dst
    c, i, j = np.meshgrid(np.arange(channels), np.arange(dh), np.arange(dw), indexing="ij")
    return (c * sh * sw + (i % sh) * sw + (j % sw)).reshape(-1)


def init_from_pretrained(
    w: np.ndarray,
    b: np.ndarray,
    w_u: np.ndarray,
    b_u: np.ndarray,
    target: tuple[int, int],
    channels: int,
    source: tuple[int, int] = (2, 2),
) -> dict[str, np.ndarray]:
    """Build coarse-stage projections from a uniform-patch pair.

    Patchify columns are averaged over the ``n`` source-size subpatches, so a
    token equals the source projection of the subpatch mean. Unpatchify rows
    and output bias are duplicated, so every subpatch gets the same prediction.
    """
    th, tw = target
    sh, sw = source
    if th % sh or tw % sw:
        raise ConfigurationError(f"target patch {target} is not a multiple of source patch {source}")
    d_src = patch_dim(channels, source)
    if w.shape[1] != d_src or w_u.shape[0] != d_src or b_u.shape != (d_src,):
        raise DimensionError(f"pretrained projections do not match {channels} channels at patch {source}")
    n = (th * tw) // (sh * sw)
    idx = _source_index(channels, source, target)
    return {
        "w_in": np.ascontiguousarray(w[:, idx] / w.dtype.type(n)),
        "b_in": b.copy(),
        "w_out": np.ascontiguousarray(w_u[idx, :]),
        "b_out": np.ascontiguousarray(b_u[idx]),
    }


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000**omega
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


_POS_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def pos_embed(grid_h: int, grid_w: int, d: int) -> np.ndarray:
    """Fixed 2-D sin-cos table of shape (grid_h*grid_w, d), float64."""
    if d % 4:
        raise ConfigurationError(f"positional embedding width {d} must be divisible by 4")
    key = (grid_h, grid_w, d)
    if key not in _POS_CACHE:
        gw, gh = np.meshgrid(np.arange(grid_w, dtype=np.float64), np.arange(grid_h, dtype=np.float64))
        emb = np.concatenate([_sincos_1d(d // 2, gh), _sincos_1d(d // 2, gw)], axis=1)
        emb.setflags(write=False)
        _POS_CACHE[key] = emb
    return _POS_CACHE[key]
