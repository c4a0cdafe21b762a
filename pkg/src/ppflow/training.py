"""Flow-matching training with stage-aware packing.

Each sample draws t ~ U[0, 1], is noised along x_t = t*x1 + (1-t)*x0 and
patchified with the stage that owns t. Variable-length token sequences are
packed first-fit-decreasing into fixed-budget rows with block-diagonal
attention masks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .backbone import ModelConfig, ModelState, init_model, param_shapes, velocity
from .checkpoint import Checkpoint
from .flops import model_macs
from .patching import ConfigurationError, PatchSchedule, init_from_pretrained, stage_of
from .tensor import DimensionError, Tensor

__all__ = [
    "TrainConfig",
    "PackedBatch",
    "TrainBatch",
    "ConversionError",
    "fm_interpolate",
    "fm_loss",
    "pack_batch",
    "optimizer_step",
    "ema_update",
    "make_batch",
    "iter_epoch",
    "train_step",
    "train",
    "new_checkpoint",
    "convert_checkpoint",
]

logger = logging.getLogger(__name__)


class ConversionError(ValueError):
    """The pretrained checkpoint cannot be converted to the requested schedule."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 8
    ema_decay: float = 0.9999
    steps: int = 1000
    token_budget: int = 256
    seed: int = 0
    class_dropout: float = 0.1
    pack_mode: str = "mixed"  # "mixed" or "by_stage"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must lie in (0, 1)")
        if self.pack_mode not in ("mixed", "by_stage"):
            raise ConfigurationError(f"unknown pack_mode {self.pack_mode!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size must be positive and steps non-negative")


def fm_interpolate(x1: np.ndarray, x0: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """x_t = t*x1 + (1-t)*x0 and the target velocity u_t = x1 - x0.

    ``t`` may be a scalar or one value per leading-axis sample.
    """
    x1, x0 = np.asarray(x1), np.asarray(x0)
    if x1.shape != x0.shape:
        raise DimensionError(f"endpoint shapes differ: {x1.shape} vs {x0.shape}")
    t = np.asarray(t, dtype=x1.dtype)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x1.ndim - 1))
    return t * x1 + (1 - t) * x0, x1 - x0


def fm_loss(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target_arr.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target_arr.shape} differ")
    diff = T.sub(pred, target_arr)
    return T.mean(T.mul(diff, diff))


@dataclass
class PackedBatch:
    """Packs of sample indices laid out in rows of ``token_budget`` slots."""

    packs: list[list[int]]
    lengths: list[int]
    token_budget: int
    metadata: list[Any] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.packs)

    def segment_ids(self) -> np.ndarray:
        """(P, T) member index per slot; padding is -1."""
        seg = np.full((len(self.packs), self.token_budget), -1, dtype=np.intp)
        for p, members in enumerate(self.packs):
            off = 0
            for m, i in enumerate(members):
                seg[p, off : off + self.lengths[i]] = m
                off += self.lengths[i]
        return seg

    def padding(self) -> np.ndarray:
        return self.segment_ids() < 0

    def mask(self) -> np.ndarray:
        """(P, T, T) allowed attention pairs; padding slots see only themselves."""
        seg = self.segment_ids()
        seg = np.where(seg < 0, -1 - np.arange(self.token_budget)[None, :], seg)
        return seg[:, :, None] == seg[:, None, :]


def pack_batch(samples: Sequence[tuple[int, Any]], token_budget: int) -> PackedBatch:
    """Greedy first-fit-decreasing packing; ties keep input order."""
    lengths = [int(s[0]) for s in samples]
    meta = [s[1] for s in samples]
    for i, L in enumerate(lengths):
        if L > token_budget:
            raise ConfigurationError(f"sample {i} has {L} tokens, budget is {token_budget}")
    order = sorted(range(len(lengths)), key=lambda i: -lengths[i])
    packs: list[list[int]] = []
    fill: list[int] = []
    for i in order:
        for p in range(len(packs)):
            if fill[p] + lengths[i] <= token_budget:
                packs[p].append(i)
                fill[p] += lengths[i]
                break
        else:
            packs.append([i])
            fill.append(lengths[i])
    return PackedBatch(packs, lengths, token_budget, meta)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, dict],
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """AdamW with bias correction, in place.

    Only parameters present in ``grads`` are touched, so projections of
    stages absent from a batch keep their values and moment estimates.
    """
    b1, b2 = betas
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        st = state.get(name)
        if st is None:
            st = state[name] = {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
        st["t"] += 1
        t = st["t"]
        m, v = st["m"], st["v"]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        if weight_decay:
            p *= 1 - lr * weight_decay
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def ema_update(ema: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> None:
    for name, p in params.items():
        e = ema[name]
        if e.shape != p.shape:
            raise DimensionError(f"EMA entry {name} has shape {e.shape}, parameter {p.shape}")
        e *= decay
        e += (1 - decay) * p


@dataclass
class TrainBatch:
    x_t: np.ndarray
    u_t: np.ndarray
    t: np.ndarray
    class_ids: np.ndarray
    stages: list[int]
    packed: list[PackedBatch]
    indices: np.ndarray


def make_batch(
    x1: np.ndarray,
    labels: np.ndarray,
    indices: np.ndarray,
    rng: np.random.Generator,
    schedule: PatchSchedule,
    config: ModelConfig,
    train_config: TrainConfig,
) -> TrainBatch:
    n = len(indices)
    data = x1[indices]
    t = rng.uniform(0.0, 1.0, size=n)
    x0 = rng.standard_normal(data.shape).astype(data.dtype)
    cls = np.asarray(labels[indices], dtype=np.intp).copy()
    drop = rng.uniform(size=n) < train_config.class_dropout
    cls[drop] = config.null_class
    x_t, u_t = fm_interpolate(data, x0, t)
    stages = [stage_of(float(ti), schedule) for ti in t]
    lengths = [schedule.token_count(s) for s in stages]
    samples = [(L, {"index": int(indices[i]), "t": float(t[i]), "stage": stages[i]}) for i, L in enumerate(lengths)]
    if train_config.pack_mode == "mixed":
        packed = [pack_batch(samples, train_config.token_budget)]
    else:
        packed = []
        for s in range(len(schedule)):
            sub = [i for i in range(n) if stages[i] == s]
            if sub:
                pb = pack_batch([samples[i] for i in sub], train_config.token_budget)
                pb.packs = [[sub[j] for j in p] for p in pb.packs]
                pb.lengths = lengths
                pb.metadata = [m for _, m in samples]
                packed.append(pb)
    return TrainBatch(x_t, u_t, t, cls, stages, packed, np.asarray(indices))


def iter_epoch(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index batches over one shuffled pass; the last batch may be short."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def batch_macs(batch: TrainBatch, config: ModelConfig, schedule: PatchSchedule) -> int:
    """Forward+backward MACs of a batch (backward counted as twice the forward)."""
    return 3 * sum(model_macs(config, schedule.token_count(s)) for s in batch.stages)


def train_step(ckpt: Checkpoint, batch: TrainBatch, train_config: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    """One optimizer step; returns (loss, gradients actually produced)."""
    model = ckpt.model
    P = model.tensors(requires_grad=True)
    total = None
    n = len(batch.stages)
    for pb in batch.packed:
        members = sorted(i for p in pb.packs for i in p)
        pos = {i: k for k, i in enumerate(members)}
        packs = [[pos[i] for i in p] for p in pb.packs]
        out = velocity(
            P,
            model.config,
            model.schedule,
            batch.x_t[members],
            batch.t[members],
            batch.class_ids[members],
            stages=[batch.stages[i] for i in members],
            packs=packs,
            pack_len=pb.token_budget,
        )
        # weight by member count so the total is the mean over the whole batch
        part = T.mul(fm_loss(out, batch.u_t[members]), len(members) / n)
        total = part if total is None else T.add(total, part)
    total.backward()
    grads = {k: t.grad for k, t in P.items() if t.grad is not None}
    optimizer_step(
        model.params,
        grads,
        ckpt.opt,
        train_config.learning_rate,
        train_config.weight_decay,
        train_config.betas,
        train_config.adam_eps,
    )
    if ckpt.ema is not None:
        ema_update(ckpt.ema, model.params, train_config.ema_decay)
    ckpt.step += 1
    return total.item(), grads


def new_checkpoint(config: ModelConfig, schedule: PatchSchedule, seed: int = 0, dtype=np.float32) -> Checkpoint:
    model = init_model(config, schedule, seed=seed, dtype=dtype)
    return Checkpoint(model, {k: v.copy() for k, v in model.params.items()}, {}, 0, {})


def train(
    ckpt: Checkpoint,
    x1: np.ndarray,
    labels: np.ndarray,
    train_config: TrainConfig,
    log: Callable[[dict], None] | None = None,
) -> list[float]:
    """Run ``train_config.steps`` optimizer steps over shuffled epochs of (x1, labels)."""
    rng = np.random.default_rng(train_config.seed)
    model = ckpt.model
    x1 = np.asarray(x1, dtype=model.dtype)
    losses: list[float] = []
    epoch = 0
    batches = iter_epoch(len(x1), train_config.batch_size, rng)
    for _ in range(train_config.steps):
        idx = next(batches, None)
        if idx is None:
            epoch += 1
            batches = iter_epoch(len(x1), train_config.batch_size, rng)
            idx = next(batches)
        batch = make_batch(x1, labels, idx, rng, model.schedule, model.config, train_config)
        loss, _ = train_step(ckpt, batch, train_config)
        losses.append(loss)
        if log is not None:
            log({"step": ckpt.step, "epoch": epoch, "loss": loss, "macs": batch_macs(batch, model.config, model.schedule)})
        if ckpt.step % 100 == 0:
            logger.info("step %d loss %.5f", ckpt.step, loss)
    return losses


def convert_checkpoint(
    pretrained: Checkpoint, schedule: PatchSchedule, use_level_embed: bool | None = None
) -> Checkpoint:
    """Turn a uniform single-stage checkpoint into a pyramidal one.

    Shared weights and the finest stage's projections are copied verbatim,
    coarse stages are built by averaging/duplication, a level table (if
    enabled) starts at zero. Optimizer moments carry over for copied tensors.
    """
    src = pretrained.model
    if len(src.schedule) != 1:
        raise ConversionError(f"pretrained model must be single-stage, has {len(src.schedule)} stages")
    if src.config.use_level_embed:
        raise ConversionError("pretrained model must not carry a level embedding")
    if schedule.latent_size != src.config.latent_size:
        raise ConversionError(f"schedule latent size {schedule.latent_size} != model {src.config.latent_size}")
    base_patch = src.schedule[0].patch
    if schedule[len(schedule) - 1].patch != base_patch:
        raise ConversionError(f"finest stage must use the pretrained patch {base_patch}")
    for st in schedule.stages:
        if st.patch_h % base_patch[0] or st.patch_w % base_patch[1]:
            raise ConversionError(f"stage patch {st.patch} is not a multiple of {base_patch}")
    level = src.config.use_level_embed if use_level_embed is None else use_level_embed
    config = replace(src.config, use_level_embed=level)
    fine = len(schedule) - 1
    C = config.latent_channels

    def build(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {k: v.copy() for k, v in params.items() if not k.startswith("patch.")}
        for s, st in enumerate(schedule.stages):
            if s == fine:
                for name in ("w_in", "b_in", "w_out", "b_out"):
                    out[f"patch.{s}.{name}"] = params[f"patch.0.{name}"].copy()
            else:
                conv = init_from_pretrained(
                    params["patch.0.w_in"], params["patch.0.b_in"], params["patch.0.w_out"], params["patch.0.b_out"],
                    st.patch, C, base_patch,
                )
                out.update({f"patch.{s}.{k}": v for k, v in conv.items()})
        if level:
            out["level_embed.table"] = np.zeros((len(schedule), config.d), dtype=params["patch.0.w_in"].dtype)
        shapes = param_shapes(config, schedule)
        return {k: out[k] for k in shapes}

    model = ModelState(config, schedule, build(src.params))
    ema = build(pretrained.ema) if pretrained.ema is not None else None
    rename = {"patch.0." + n: f"patch.{fine}." + n for n in ("w_in", "b_in", "w_out", "b_out")}
    opt = {}
    for name, st in pretrained.opt.items():
        new = rename.get(name, name)
        opt[new] = {"m": st["m"].copy(), "v": st["v"].copy(), "t": st["t"]}
    meta = dict(pretrained.meta, converted_from_step=pretrained.step)
    if len(schedule) == 1 and not level:
        meta = dict(pretrained.meta)
    return Checkpoint(model, ema, opt, pretrained.step, meta)
