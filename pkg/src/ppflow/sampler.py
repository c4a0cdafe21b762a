"""Staged Euler sampling with stage-wise classifier-free guidance.

The latent keeps its full (C, I, I) shape for every step; moving between
stages only switches which Patchify/Unpatchify projections the network uses.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .backbone import ModelState, velocity
from .patching import PatchSchedule, stage_of
from .tensor import DimensionError

__all__ = ["SampleConfig", "cfg_velocity", "trace_stages", "euler_sample", "initial_noise"]


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    class_id: int | Sequence[int] = 0
    seed: int = 0
    schedule: PatchSchedule | None = None
    use_ema: bool = True
    num_samples: int = 1
    t_start: float = 0.0  # integrate over [t_start, 1]; x0 is then the state at t_start

    def __post_init__(self):
        if not 0.0 <= self.t_start < 1.0:
            raise ValueError("t_start must lie in [0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, w: float) -> np.ndarray:
    if v_cond.shape != v_uncond.shape:
        raise DimensionError(f"guidance branches differ in shape: {v_cond.shape} vs {v_uncond.shape}")
    return v_uncond + w * (v_cond - v_uncond)


def trace_stages(cfg: SampleConfig, schedule: PatchSchedule | None = None) -> list[tuple[float, int, float]]:
    """(t_k, stage, cfg_scale) for each step of the uniform grid t_k = t_start + (1 - t_start) k/K."""
    schedule = schedule or cfg.schedule
    out = []
    for k in range(cfg.steps):
        t = cfg.t_start + (1.0 - cfg.t_start) * k / cfg.steps
        s = stage_of(t, schedule)
        out.append((t, s, schedule[s].cfg_scale))
    return out


def initial_noise(seed: int, n: int, channels: int, size: int, dtype=np.float32) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, channels, size, size)).astype(dtype)


VelocityFn = Callable[[np.ndarray, float, np.ndarray, int], np.ndarray]


def _model_velocity(model: ModelState, schedule: PatchSchedule) -> VelocityFn:
    P = model.tensors()

    def fn(x: np.ndarray, t: float, class_ids: np.ndarray, stage: int) -> np.ndarray:
        n = x.shape[0]
        return velocity(P, model.config, schedule, x, np.full(n, t), class_ids, stages=[stage] * n).data

    return fn


def euler_sample(
    model: ModelState | None,
    cfg: SampleConfig,
    *,
    velocity_fn: VelocityFn | None = None,
    x0: np.ndarray | None = None,
    trajectory: list | None = None,
    eval_log: list | None = None,
    skip_uncond_at_unit_scale: bool = True,
) -> np.ndarray:
    """Integrate dx/dt = v from Gaussian noise at t=0 to t=1.

    Returns (N, C, I, I). ``velocity_fn(x, t, class_ids, stage)`` replaces the
    network when given. ``trajectory`` collects all K+1 states; ``eval_log``
    collects one ``(stage, batch_size)`` record per network evaluation. The
    conditional and null branches run as one batched evaluation each step;
    at guidance scale 1 the null branch is skipped.
    """
    schedule = cfg.schedule or model.schedule
    if model is not None and len(schedule) != len(model.schedule):
        raise ValueError("sampling schedule must have the model's stage count")
    fn = velocity_fn or _model_velocity(model, schedule)
    if x0 is None:
        c, size = model.config.latent_channels, model.config.latent_size
        x0 = initial_noise(cfg.seed, cfg.num_samples, c, size, model.dtype)
    x = np.array(x0, copy=True)
    n = x.shape[0]
    labels = np.broadcast_to(np.asarray(cfg.class_id, dtype=np.intp), (n,)).copy()
    null = model.config.null_class if model is not None else -1
    dt = (1.0 - cfg.t_start) / cfg.steps
    if trajectory is not None:
        trajectory.append(x.copy())
    for t, s, w in trace_stages(cfg, schedule):
        if w == 1.0 and skip_uncond_at_unit_scale:
            v = fn(x, t, labels, s)
            if eval_log is not None:
                eval_log.append((s, n))
        else:
            both = fn(np.concatenate([x, x]), t, np.concatenate([labels, np.full(n, null)]), s)
            if eval_log is not None:
                eval_log += [(s, n), (s, n)]
            v = cfg_velocity(both[:n], both[n:], w)
        x = x + dt * v
        if trajectory is not None:
            trajectory.append(x.copy())
    return x


def sample_model(ckpt_or_model, cfg: SampleConfig) -> np.ndarray:
    """Sample with a checkpoint's EMA weights (when requested) or a bare model."""
    from .checkpoint import Checkpoint

    if isinstance(ckpt_or_model, Checkpoint):
        model = ckpt_or_model.ema_model() if cfg.use_ema else ckpt_or_model.model
    else:
        model = ckpt_or_model
    with T.no_grad():
        return euler_sample(model, cfg)
