"""scikit-learn style front end over the functional modules."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .backbone import ModelConfig, velocity
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .metrics import desk_fid
from .patching import make_schedule, stage_of
from .pipeline import generate
from .training import TrainConfig, convert_checkpoint, new_checkpoint, train
from .validation import check_labels, check_latents, check_times

__all__ = ["PyramidalFlow"]


class PyramidalFlow(BaseEstimator):
    """Class-conditional flow-matching DiT with a per-interval patch size.

    ``fit(X, y)`` trains on latents X of shape (N, C, I, I). Passing
    ``init=`` (a fitted single-stage estimator or checkpoint) converts
    those weights to this estimator's schedule first and fine-tunes.
    ``predict(X, t, y)`` returns velocities; ``sample`` draws latents;
    ``score`` is the negated desk Fréchet distance of fresh samples to X.
    """

    def __init__(
        self,
        d=384,
        depth=6,
        heads=6,
        mlp_ratio=4,
        num_classes=None,
        boundaries=(),
        patch_sizes=((2, 2),),
        cfg_scales=(1.0,),
        use_level_embed=False,
        steps=1000,
        batch_size=8,
        learning_rate=1e-4,
        weight_decay=0.0,
        ema_decay=0.9999,
        token_budget=256,
        class_dropout=0.1,
        pack_mode="mixed",
        seed=0,
        init_seed=0,
        dtype="float32",
        sample_steps=50,
        use_ema=True,
    ):
        self.d = d
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.num_classes = num_classes
        self.boundaries = boundaries
        self.patch_sizes = patch_sizes
        self.cfg_scales = cfg_scales
        self.use_level_embed = use_level_embed
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.token_budget = token_budget
        self.class_dropout = class_dropout
        self.pack_mode = pack_mode
        self.seed = seed
        self.init_seed = init_seed
        self.dtype = dtype
        self.sample_steps = sample_steps
        self.use_ema = use_ema

    def _schedule(self, size):
        return make_schedule(list(self.boundaries), [tuple(p) for p in self.patch_sizes], list(self.cfg_scales), size)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, weight_decay=self.weight_decay, batch_size=self.batch_size,
            ema_decay=self.ema_decay, steps=self.steps, token_budget=self.token_budget, seed=self.seed,
            class_dropout=self.class_dropout, pack_mode=self.pack_mode,
        )

    def fit(self, X, y, init=None):
        dtype = np.dtype(self.dtype)
        X = check_latents(X, dtype=dtype)
        y = check_labels(y, len(X), self.num_classes)
        n_classes = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        schedule = self._schedule(X.shape[2])
        if init is not None:
            src = init.checkpoint_ if isinstance(init, PyramidalFlow) else init
            if not isinstance(src, Checkpoint):
                raise TypeError("init must be a fitted PyramidalFlow or a Checkpoint")
            ckpt = convert_checkpoint(src, schedule, use_level_embed=self.use_level_embed)
            if ckpt.model.config.num_classes < n_classes:
                raise ValueError("init model has fewer classes than the labels need")
        else:
            config = ModelConfig(
                d=self.d, depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio, num_classes=n_classes,
                latent_channels=X.shape[1], latent_size=X.shape[2], use_level_embed=self.use_level_embed,
            )
            ckpt = new_checkpoint(config, schedule, seed=self.init_seed, dtype=dtype)
        self.loss_curve_ = train(ckpt, X, y, self._train_config())
        self.checkpoint_ = ckpt
        self.n_classes_ = ckpt.model.config.num_classes
        return self

    def _model(self, use_ema=None):
        check_is_fitted(self, "checkpoint_")
        ema = self.use_ema if use_ema is None else use_ema
        return self.checkpoint_.ema_model() if ema else self.checkpoint_.model

    def predict(self, X, t, y, use_ema=None):
        """Velocity field at (X, t) for class labels y; each sample runs in the stage owning its t."""
        model = self._model(use_ema)
        cfg = model.config
        X = check_latents(X, cfg.latent_channels, cfg.latent_size, model.dtype)
        t = check_times(t, len(X))
        y = check_labels(y, len(X), cfg.num_classes + 1)
        stages = [stage_of(float(ti), model.schedule) for ti in t]
        with T.no_grad():
            out = velocity(model.tensors(), cfg, model.schedule, X, t, y, stages=stages)
        return out.data

    def sample(self, y, seed=0, steps=None, use_ema=None):
        check_is_fitted(self, "checkpoint_")
        y = np.atleast_1d(np.asarray(y))
        y = check_labels(y, len(y), self.n_classes_)
        ema = self.use_ema if use_ema is None else use_ema
        return generate(self.checkpoint_, y, seed, steps or self.sample_steps, use_ema=ema)

    def score(self, X, y=None, seed=1000):
        """Negated desk Fréchet distance; samples follow y (or a balanced class split)."""
        X = check_latents(X)
        if y is None:
            y = np.arange(len(X)) % self.n_classes_
        return -desk_fid(self.sample(y, seed=seed), X)

    def save(self, path) -> None:
        check_is_fitted(self, "checkpoint_")
        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def load(cls, path, **params) -> "PyramidalFlow":
        ckpt = load_checkpoint(path)
        c, s = ckpt.model.config, ckpt.model.schedule
        est = cls(
            d=c.d, depth=c.depth, heads=c.heads, mlp_ratio=c.mlp_ratio, num_classes=c.num_classes,
            boundaries=tuple(s.boundaries), patch_sizes=tuple(s.patch_sizes), cfg_scales=tuple(s.cfg_scales),
            use_level_embed=c.use_level_embed, dtype=str(ckpt.model.dtype), **params,
        )
        est.checkpoint_ = ckpt
        est.n_classes_ = c.num_classes
        return est
