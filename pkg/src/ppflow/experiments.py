"""Desk-scale comparison of a uniform baseline against a converted pyramidal model.

Both arms get the same optimizer-step budget. The uniform baseline trains
for ``steps`` steps. The pyramidal arm branches off the baseline at
``steps * convert_at``, is converted to the two-stage schedule, and trains
for the remaining steps. An untrained model gives the reference score.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field

from .backbone import ModelConfig
from .data import gen_dataset
from .patching import make_schedule
from .pipeline import evaluate
from .training import TrainConfig, convert_checkpoint, new_checkpoint, train

__all__ = ["QualitySetup", "quality_comparison"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QualitySetup:
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 10_000
    convert_at: float = 0.5
    batch_size: int = 8
    learning_rate: float = 1e-4
    ema_decay: float = 0.999
    cfg_scale: float = 1.5
    data_seed: int = 0
    n_per_class: int = 64
    eval_per_class: int = 16
    eval_steps: int = 50
    eval_seed: int = 1000


def quality_comparison(setup: QualitySetup, seed: int = 0) -> dict:
    """Train both arms with ``seed`` and return their desk Fréchet distances."""
    cfg = setup.model
    ds = gen_dataset(setup.data_seed, cfg.num_classes, setup.n_per_class, cfg.latent_channels, cfg.latent_size)
    uniform = make_schedule([], [(2, 2)], [setup.cfg_scale], cfg.latent_size)
    pyramid = make_schedule([0.5], [(4, 4), (2, 2)], [setup.cfg_scale] * 2, cfg.latent_size)
    first = int(round(setup.steps * setup.convert_at))

    def tc(steps, offset):
        return TrainConfig(
            learning_rate=setup.learning_rate, batch_size=setup.batch_size, ema_decay=setup.ema_decay,
            steps=steps, seed=seed * 1000 + offset,
        )

    t0 = time.perf_counter()
    base = new_checkpoint(cfg, uniform, seed=seed)
    base.meta.update(data_seed=setup.data_seed, n_per_class=setup.n_per_class)
    untrained = copy.deepcopy(base)
    train(base, ds.x, ds.labels, tc(first, 0))
    ppf = convert_checkpoint(copy.deepcopy(base), pyramid)
    train(base, ds.x, ds.labels, tc(setup.steps - first, 1))
    train(ppf, ds.x, ds.labels, tc(setup.steps - first, 1))
    t_train = time.perf_counter() - t0

    def score(ck):
        return evaluate(ck, setup.eval_per_class, setup.eval_seed, 0, setup.eval_steps)

    out = {
        "seed": seed,
        "fid_untrained": score(untrained),
        "fid_baseline": score(base),
        "fid_pyramidal": score(ppf),
        "train_seconds": t_train,
        "total_seconds": time.perf_counter() - t0,
        "setup": asdict(setup),
    }
    out["ratio"] = out["fid_pyramidal"] / out["fid_baseline"]
    logger.info("quality seed=%d %s", seed, {k: v for k, v in out.items() if k != "setup"})
    return out
