"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment. Values are JSON literals
(``384``, ``1e-4``, ``true``, ``[[4, 4], [2, 2]]``, ``"text"``); anything
that does not parse as JSON is kept as a bare string. Keys are namespaced:
``model.*``, ``schedule.*``, ``train.*``, ``sample.*``, ``eval.*``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ModelConfig
from .patching import PatchSchedule, make_schedule
from .sampler import SampleConfig
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "parse_config", "load_config"]


class ConfigError(ValueError):
    """Unknown key, bad value, or malformed line."""


SCHEMA: dict[str, object] = {
    "model.d": 384,
    "model.depth": 6,
    "model.heads": 6,
    "model.mlp_ratio": 4,
    "model.num_classes": 8,
    "model.latent_channels": 4,
    "model.latent_size": 32,
    "model.use_level_embed": False,
    "schedule.boundaries": [],
    "schedule.patch_sizes": [[2, 2]],
    "schedule.cfg_scales": [1.0],
    "train.learning_rate": 1e-4,
    "train.weight_decay": 0.0,
    "train.batch_size": 8,
    "train.ema_decay": 0.9999,
    "train.steps": 1000,
    "train.token_budget": 256,
    "train.seed": 0,
    "train.class_dropout": 0.1,
    "train.pack_mode": "mixed",
    "train.init_seed": 0,
    "train.init": "",
    "train.data_seed": 0,
    "train.n_per_class": 64,
    "train.dtype": "float32",
    "sample.steps": 50,
    "sample.class_id": 0,
    "sample.seed": 0,
    "sample.num_samples": 1,
    "sample.use_ema": True,
    "eval.num_per_class": 16,
    "eval.proj_seed": 0,
    "eval.seed": 1000,
    "eval.batch": 16,
}


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=lambda: dict(SCHEMA))

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict[str, object]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def model(self) -> ModelConfig:
        try:
            return ModelConfig(**self.section("model"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model section: {exc}") from None

    def schedule(self) -> PatchSchedule:
        s = self.section("schedule")
        try:
            return make_schedule(
                s["boundaries"], [tuple(p) for p in s["patch_sizes"]], s["cfg_scales"], int(self["model.latent_size"])
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"schedule section: {exc}") from None

    def train(self) -> TrainConfig:
        s = self.section("train")
        keep = {k: s[k] for k in (
            "learning_rate", "weight_decay", "batch_size", "ema_decay", "steps", "token_budget", "seed",
            "class_dropout", "pack_mode",
        )}
        try:
            return TrainConfig(**keep)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train section: {exc}") from None

    def sample(self, schedule: PatchSchedule | None = None) -> SampleConfig:
        s = self.section("sample")
        try:
            return SampleConfig(
                steps=int(s["steps"]), class_id=s["class_id"], seed=int(s["seed"]), schedule=schedule,
                use_ema=bool(s["use_ema"]), num_samples=int(s["num_samples"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sample section: {exc}") from None


def _value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig(dict(base.values)) if base else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r} (line {lineno})")
        cfg.values[key] = _value(raw)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    return parse_config("\n".join(overrides), cfg) if overrides else cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
