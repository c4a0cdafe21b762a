"""End-to-end helpers shared by the CLI and the estimator."""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import gen_dataset
from .metrics import desk_fid
from .sampler import SampleConfig, euler_sample
from .training import TrainConfig, new_checkpoint, train

__all__ = ["format_record", "train_run", "generate", "reference_set", "evaluate", "checksum"]


def format_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        parts.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def train_run(
    ckpt: Checkpoint, train_config: TrainConfig, data_seed: int, n_per_class: int, log: Callable[[str], None] | None = None
) -> list[float]:
    cfg = ckpt.model.config
    ds = gen_dataset(data_seed, cfg.num_classes, n_per_class, cfg.latent_channels, cfg.latent_size)
    ckpt.meta.update({"data_seed": data_seed, "n_per_class": n_per_class})
    sink = (lambda rec: log(format_record(rec))) if log else None
    return train(ckpt, ds.x, ds.labels, train_config, sink)


def generate(
    ckpt: Checkpoint,
    class_ids,
    seed: int,
    steps: int = 50,
    use_ema: bool = True,
    batch: int = 16,
    t_start: float = 0.0,
) -> np.ndarray:
    """Sample one latent per entry of ``class_ids``; batch j uses noise seed ``seed + j``."""
    class_ids = np.asarray(class_ids, dtype=np.intp).reshape(-1)
    model = ckpt.ema_model() if use_ema else ckpt.model
    outs = []
    with T.no_grad():
        for j, start in enumerate(range(0, len(class_ids), batch)):
            ids = class_ids[start : start + batch]
            cfg = SampleConfig(steps=steps, class_id=ids, seed=seed + j, schedule=model.schedule, num_samples=len(ids),
                               t_start=t_start)
            outs.append(euler_sample(model, cfg))
    return np.concatenate(outs)


def reference_set(ckpt: Checkpoint) -> np.ndarray:
    cfg = ckpt.model.config
    meta = ckpt.meta
    ds = gen_dataset(int(meta.get("data_seed", 0)), cfg.num_classes, int(meta.get("n_per_class", 64)),
                     cfg.latent_channels, cfg.latent_size)
    return ds.x


def evaluate(
    ckpt: Checkpoint,
    num_per_class: int = 16,
    seed: int = 1000,
    proj_seed: int = 0,
    steps: int = 50,
    use_ema: bool = True,
    batch: int = 16,
) -> float:
    classes = np.repeat(np.arange(ckpt.model.config.num_classes), num_per_class)
    samples = generate(ckpt, classes, seed, steps, use_ema, batch)
    return desk_fid(samples, reference_set(ckpt), proj_seed)


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
