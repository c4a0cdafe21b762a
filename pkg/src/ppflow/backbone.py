"""Shared DiT-style velocity network.

All stages share the conditioning embedders and the transformer blocks; only
the ``patch.{s}.*`` projections (and the optional level table row) differ per
stage. Blocks use adaLN-Zero modulation, so a fresh model's blocks are the
identity and its output head emits zeros.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .patching import (
    ConfigurationError,
    PatchSchedule,
    grid_shape,
    patch_dim,
    patchify_batch,
    pos_embed,
    stage_of,
    unpatchify_batch,
)
from .tensor import DimensionError, Tensor

__all__ = [
    "ModelConfig",
    "ModelState",
    "init_model",
    "timestep_embedding",
    "embed_condition",
    "dit_block",
    "velocity",
    "predict_velocity",
    "block_param_names",
    "param_shapes",
    "TIME_SCALE",
    "FREQ_DIM",
]

FREQ_DIM = 256
TIME_SCALE = 1000.0
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    d: int = 384
    depth: int = 6
    heads: int = 6
    mlp_ratio: int = 4
    num_classes: int = 8
    latent_channels: int = 4
    latent_size: int = 32
    use_level_embed: bool = False

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigurationError(f"width {self.d} is not divisible by {self.heads} heads")
        if self.d % 4:
            raise ConfigurationError(f"width {self.d} must be divisible by 4 for positional tables")
        if self.depth < 0 or self.mlp_ratio <= 0 or self.num_classes <= 0:
            raise ConfigurationError("depth, mlp_ratio and num_classes must be positive")

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelState:
    config: ModelConfig
    schedule: PatchSchedule
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ModelState":
        return ModelState(self.config, self.schedule, {k: v.copy() for k, v in self.params.items()})

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def astype(self, dtype) -> "ModelState":
        return ModelState(self.config, self.schedule, {k: v.astype(dtype) for k, v in self.params.items()})

    def uniform_view(self) -> "ModelState":
        """Single-stage model running only the finest stage, sharing arrays."""
        from .patching import make_schedule

        last = len(self.schedule) - 1
        fine = self.schedule[last]
        schedule = make_schedule([], [fine.patch], [fine.cfg_scale], self.schedule.latent_size)
        params = {k: v for k, v in self.params.items() if not k.startswith(("patch.", "level_embed."))}
        for name in ("w_in", "b_in", "w_out", "b_out"):
            params[f"patch.0.{name}"] = self.params[f"patch.{last}.{name}"]
        if self.config.use_level_embed:
            params["level_embed.table"] = self.params["level_embed.table"][last : last + 1]
        return ModelState(self.config, schedule, params)


def block_param_names(config: ModelConfig) -> list[str]:
    names = []
    for i in range(config.depth):
        for sub in ("adaln", "qkv", "proj", "fc1", "fc2"):
            names += [f"blocks.{i}.{sub}.w", f"blocks.{i}.{sub}.b"]
    return names


def param_shapes(config: ModelConfig, schedule: PatchSchedule) -> dict[str, tuple[int, ...]]:
    d, h = config.d, config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "t_embed.fc1.w": (d, FREQ_DIM),
        "t_embed.fc1.b": (d,),
        "t_embed.fc2.w": (d, d),
        "t_embed.fc2.b": (d,),
        "y_embed.table": (config.num_classes + 1, d),
    }
    if config.use_level_embed:
        shapes["level_embed.table"] = (len(schedule), d)
    for i in range(config.depth):
        shapes.update({
            f"blocks.{i}.adaln.w": (6 * d, d), f"blocks.{i}.adaln.b": (6 * d,),
            f"blocks.{i}.qkv.w": (3 * d, d), f"blocks.{i}.qkv.b": (3 * d,),
            f"blocks.{i}.proj.w": (d, d), f"blocks.{i}.proj.b": (d,),
            f"blocks.{i}.fc1.w": (h, d), f"blocks.{i}.fc1.b": (h,),
            f"blocks.{i}.fc2.w": (d, h), f"blocks.{i}.fc2.b": (d,),
        })
    shapes["final.adaln.w"] = (2 * d, d)
    shapes["final.adaln.b"] = (2 * d,)
    for s, stage in enumerate(schedule.stages):
        ds = patch_dim(config.latent_channels, stage.patch)
        shapes.update({
            f"patch.{s}.w_in": (d, ds), f"patch.{s}.b_in": (d,),
            f"patch.{s}.w_out": (ds, d), f"patch.{s}.b_out": (ds,),
        })
    return shapes


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_model(config: ModelConfig, schedule: PatchSchedule, seed: int = 0, dtype=np.float32) -> ModelState:
    """DiT-style initialization: xavier linears, N(0, 0.02) embedders, zeroed adaLN and heads."""
    if schedule.latent_size != config.latent_size:
        raise ConfigurationError(
            f"schedule latent size {schedule.latent_size} differs from model latent size {config.latent_size}"
        )
    rng = np.random.default_rng(seed)
    d, h = config.d, config.mlp_hidden
    p: dict[str, np.ndarray] = {
        "t_embed.fc1.w": rng.normal(0, 0.02, (d, FREQ_DIM)),
        "t_embed.fc1.b": np.zeros(d),
        "t_embed.fc2.w": rng.normal(0, 0.02, (d, d)),
        "t_embed.fc2.b": np.zeros(d),
        "y_embed.table": rng.normal(0, 0.02, (config.num_classes + 1, d)),
    }
    if config.use_level_embed:
        p["level_embed.table"] = rng.normal(0, 0.02, (len(schedule), d))
    for i in range(config.depth):
        p[f"blocks.{i}.adaln.w"] = np.zeros((6 * d, d))
        p[f"blocks.{i}.adaln.b"] = np.zeros(6 * d)
        p[f"blocks.{i}.qkv.w"] = _xavier(rng, 3 * d, d)
        p[f"blocks.{i}.qkv.b"] = np.zeros(3 * d)
        p[f"blocks.{i}.proj.w"] = _xavier(rng, d, d)
        p[f"blocks.{i}.proj.b"] = np.zeros(d)
        p[f"blocks.{i}.fc1.w"] = _xavier(rng, h, d)
        p[f"blocks.{i}.fc1.b"] = np.zeros(h)
        p[f"blocks.{i}.fc2.w"] = _xavier(rng, d, h)
        p[f"blocks.{i}.fc2.b"] = np.zeros(d)
    p["final.adaln.w"] = np.zeros((2 * d, d))
    p["final.adaln.b"] = np.zeros(2 * d)
    for s, stage in enumerate(schedule.stages):
        ds = patch_dim(config.latent_channels, stage.patch)
        p[f"patch.{s}.w_in"] = _xavier(rng, d, ds)
        p[f"patch.{s}.b_in"] = np.zeros(d)
        p[f"patch.{s}.w_out"] = np.zeros((ds, d))
        p[f"patch.{s}.b_out"] = np.zeros(ds)
    return ModelState(config, schedule, {k: np.ascontiguousarray(v, dtype=dtype) for k, v in p.items()})


def timestep_embedding(t: np.ndarray, dim: int = FREQ_DIM, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``TIME_SCALE * t``; returns (N, dim) float64."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) * TIME_SCALE
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _condition(P: dict[str, Tensor], config: ModelConfig, t, class_ids, stages) -> Tensor:
    dtype = P["t_embed.fc1.w"].dtype
    class_ids = np.asarray(class_ids, dtype=np.intp).reshape(-1)
    if np.any(class_ids < 0) or np.any(class_ids > config.num_classes):
        raise ValueError(f"class ids must lie in [0, {config.num_classes}], got {class_ids}")
    freq = Tensor(timestep_embedding(t).astype(dtype))
    temb = T.linear(T.silu(T.linear(freq, P["t_embed.fc1.w"], P["t_embed.fc1.b"])), P["t_embed.fc2.w"], P["t_embed.fc2.b"])
    c = T.add(temb, T.take(P["y_embed.table"], class_ids))
    if config.use_level_embed:
        c = T.add(c, T.take(P["level_embed.table"], np.asarray(stages, dtype=np.intp).reshape(-1)))
    return c


def embed_condition(t: float, class_id: int, stage: int, model: ModelState) -> np.ndarray:
    """Conditioning vector (d,) for one (t, class, stage)."""
    with T.no_grad():
        c = _condition(model.tensors(), model.config, [t], [class_id], [stage])
    return c.data[0]


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return T.add(T.mul(x, T.add(scale, 1.0)), shift)


def _attention(x: Tensor, P: dict[str, Tensor], prefix: str, heads: int, mask: np.ndarray | None) -> Tensor:
    n, L, d = x.shape
    dh = d // heads
    qkv = T.linear(x, P[prefix + "qkv.w"], P[prefix + "qkv.b"])
    # scaling q (L x dh) is cheaper than scaling the L x L scores
    q = T.permute(T.reshape(T.mul(T.slice_last(qkv, 0, d), 1.0 / math.sqrt(dh)), (n, L, heads, dh)), (0, 2, 1, 3))
    kt = T.permute(T.reshape(T.slice_last(qkv, d, 2 * d), (n, L, heads, dh)), (0, 2, 3, 1))
    v = T.permute(T.reshape(T.slice_last(qkv, 2 * d, 3 * d), (n, L, heads, dh)), (0, 2, 1, 3))
    scores = T.matmul(q, kt)
    attn = T.softmax(scores, None if mask is None else mask[:, None, :, :])
    out = T.reshape(T.permute(T.matmul(attn, v), (0, 2, 1, 3)), (n, L, d))
    return T.linear(out, P[prefix + "proj.w"], P[prefix + "proj.b"])


def dit_block(
    x: Tensor,
    mod: Tensor,
    P: dict[str, Tensor],
    index: int,
    heads: int,
    attn_mask: np.ndarray | None = None,
) -> Tensor:
    """One adaLN-Zero block on tokens (N, L, d).

    ``mod`` is the block's (N, L or 1, 6d) modulation: shift/scale/gate for
    attention followed by shift/scale/gate for the MLP. ``attn_mask`` is a
    boolean (N, L, L) array of allowed attention pairs.
    """
    d = x.shape[-1]
    if mod.shape[-1] != 6 * d:
        raise DimensionError(f"modulation width {mod.shape[-1]} does not match 6*{d}")
    prefix = f"blocks.{index}."
    sh1, sc1, g1, sh2, sc2, g2 = (T.slice_last(mod, k * d, (k + 1) * d) for k in range(6))
    h = _modulate(T.layer_norm(x, eps=LN_EPS), sh1, sc1)
    x = T.add(x, T.mul(g1, _attention(h, P, prefix, heads, attn_mask)))
    h = _modulate(T.layer_norm(x, eps=LN_EPS), sh2, sc2)
    h = T.linear(T.gelu(T.linear(h, P[prefix + "fc1.w"], P[prefix + "fc1.b"])), P[prefix + "fc2.w"], P[prefix + "fc2.b"])
    return T.add(x, T.mul(g2, h))


@dataclass
class _Layout:
    """Where each sample's tokens live inside the (P, T) slot grid."""

    num_packs: int
    pack_len: int
    slot_rows: np.ndarray | None  # (P*T,) rows of the stacked token table; None means identity
    slot_sample: np.ndarray | None  # (P*T,) sample per slot (padding -> 0)
    mask: np.ndarray | None  # (P, T, T)
    sample_slots: list[np.ndarray]  # per sample: flat slot indices of its tokens


def _build_layout(lengths: Sequence[int], row_offsets: Sequence[int], packs, pack_len: int | None) -> _Layout:
    n = len(lengths)
    if packs is None:
        if len(set(lengths)) == 1:
            L = lengths[0]
            slots = [np.arange(i * L, (i + 1) * L) for i in range(n)]
            order = np.concatenate([np.arange(r, r + L) for r in row_offsets])
            ident = np.array_equal(order, np.arange(n * L))
            return _Layout(n, L, None if ident else order, None, None, slots)
        packs = [[i] for i in range(n)]
    packs = [list(p) for p in packs]
    T_ = pack_len if pack_len is not None else max(sum(lengths[i] for i in p) for p in packs)
    pad_row = int(sum(lengths))
    slot_rows = np.full(len(packs) * T_, pad_row, dtype=np.intp)
    slot_sample = np.zeros(len(packs) * T_, dtype=np.intp)
    seg = np.empty((len(packs), T_), dtype=np.intp)
    seg[:] = -1 - np.arange(T_)[None, :]
    sample_slots: list[np.ndarray | None] = [None] * n
    seen = set()
    for p, members in enumerate(packs):
        off = 0
        for m, i in enumerate(members):
            if i in seen:
                raise ValueError(f"sample {i} appears in more than one pack")
            seen.add(i)
            L = lengths[i]
            if off + L > T_:
                raise ValueError(f"pack {p} exceeds its length {T_}")
            flat = p * T_ + off + np.arange(L)
            slot_rows[flat] = row_offsets[i] + np.arange(L)
            slot_sample[flat] = i
            seg[p, off : off + L] = m
            sample_slots[i] = flat
            off += L
    if len(seen) != n:
        raise ValueError("every sample must belong to exactly one pack")
    if all(len(p) == 1 and lengths[p[0]] == T_ for p in packs):
        mask = None  # one unpadded sample per pack: nothing to hide
    else:
        mask = seg[:, :, None] == seg[:, None, :]
    return _Layout(len(packs), T_, slot_rows, slot_sample, mask, sample_slots)  # type: ignore[arg-type]


def velocity(
    P: dict[str, Tensor],
    config: ModelConfig,
    schedule: PatchSchedule,
    latents,
    t,
    class_ids,
    *,
    stages: Sequence[int] | None = None,
    packs: Sequence[Sequence[int]] | None = None,
    pack_len: int | None = None,
) -> Tensor:
    """Differentiable batched velocity prediction (N, C, I, I).

    Each sample is patchified with its own stage. ``packs`` lists sample
    indices sharing one attention sequence of ``pack_len`` slots; samples in a
    pack attend only within themselves. Without packs, same-length samples
    are batched directly and mixed lengths are padded one per pack.
    """
    x = latents if isinstance(latents, Tensor) else Tensor(np.asarray(latents, dtype=P["t_embed.fc1.w"].dtype))
    if x.ndim != 4 or x.shape[1] != config.latent_channels or x.shape[2] != x.shape[3]:
        raise DimensionError(f"latents must be (N, {config.latent_channels}, I, I), got {x.shape}")
    n, C, I = x.shape[0], x.shape[1], x.shape[2]
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError(f"{t.shape[0]} timesteps for {n} latents")
    if stages is None:
        stages = [stage_of(float(ti), schedule) for ti in t]
    stages = list(stages)
    d = config.d
    dtype = x.dtype

    groups = [[i for i in range(n) if stages[i] == s] for s in range(len(schedule))]
    grids = [grid_shape(I, schedule[s].patch) for s in range(len(schedule))]
    lengths = [grids[stages[i]][0] * grids[stages[i]][1] for i in range(n)]

    rows: list[Tensor] = []
    row_offsets = [0] * n
    off = 0
    for s, members in enumerate(groups):
        if not members:
            continue
        xs = x if len(members) == n else T.take(x, np.array(members))
        tok = patchify_batch(xs, schedule[s].patch, P[f"patch.{s}.w_in"], P[f"patch.{s}.b_in"])
        tok = T.add(tok, pos_embed(grids[s][0], grids[s][1], d).astype(dtype))
        L = tok.shape[1]
        rows.append(T.reshape(tok, (len(members) * L, d)))
        for r, i in enumerate(members):
            row_offsets[i] = off + r * L
        off += len(members) * L

    layout = _build_layout(lengths, row_offsets, packs, pack_len)
    table = rows[0] if len(rows) == 1 else T.concat(rows, axis=0)
    if layout.slot_rows is not None:
        if layout.mask is not None:
            table = T.concat([table, Tensor(np.zeros((1, d), dtype=dtype))], axis=0)
        table = T.take(table, layout.slot_rows)
    h = T.reshape(table, (layout.num_packs, layout.pack_len, d))

    c = T.silu(_condition(P, config, t, class_ids, stages))

    def per_slot(m: Tensor) -> Tensor:
        if layout.slot_sample is None:
            return T.reshape(m, (layout.num_packs, 1, m.shape[-1]))
        return T.reshape(T.take(m, layout.slot_sample), (layout.num_packs, layout.pack_len, m.shape[-1]))

    for i in range(config.depth):
        mod = per_slot(T.linear(c, P[f"blocks.{i}.adaln.w"], P[f"blocks.{i}.adaln.b"]))
        h = dit_block(h, mod, P, i, config.heads, layout.mask)

    fmod = per_slot(T.linear(c, P["final.adaln.w"], P["final.adaln.b"]))
    h = _modulate(T.layer_norm(h, eps=LN_EPS), T.slice_last(fmod, 0, d), T.slice_last(fmod, d, 2 * d))
    flat = T.reshape(h, (layout.num_packs * layout.pack_len, d))

    outs: list[Tensor] = []
    order: list[int] = []
    for s, members in enumerate(groups):
        if not members:
            continue
        gh, gw = grids[s]
        slots = np.concatenate([layout.sample_slots[i] for i in members])
        if layout.slot_rows is None and len(members) == n:
            tok = flat
        else:
            tok = T.take(flat, slots)
        tok = T.reshape(tok, (len(members), gh * gw, d))
        outs.append(
            unpatchify_batch(tok, schedule[s].patch, P[f"patch.{s}.w_out"], P[f"patch.{s}.b_out"], C, (gh, gw))
        )
        order += members
    out = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
    if order != list(range(n)):
        out = T.take(out, np.argsort(np.array(order)))
    return out


def predict_velocity(latent: np.ndarray, t: float, class_id: int, model: ModelState) -> np.ndarray:
    """Velocity (C, I, I) for a single latent; no graph is recorded."""
    latent = np.asarray(latent)
    if latent.ndim != 3:
        raise DimensionError(f"latent must be (C, I, I), got {latent.shape}")
    with T.no_grad():
        out = velocity(model.tensors(), model.config, model.schedule, latent[None].astype(model.dtype), [t], [class_id])
    return out.data[0]
