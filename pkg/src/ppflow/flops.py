"""Closed-form compute accounting and a wall-clock benchmark.

Counts are multiply-accumulates per network evaluation of one sample. A block
costs ``12*L*d**2 + 2*L**2*d``: 4Ld^2 for the QKV and output projections,
8Ld^2 for the MLP at ratio 4, and 2L^2d for attention scores and the weighted
sum of values. Softmax, norms and elementwise work are ignored.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .backbone import FREQ_DIM, ModelConfig, ModelState
from .patching import PatchSchedule, grid_shape, make_schedule

__all__ = [
    "block_macs",
    "model_macs",
    "stage_tokens",
    "stage_step_counts",
    "schedule_ratio",
    "schedule_macs",
    "FlopsReport",
    "analyze",
    "BenchReport",
    "bench_wallclock",
    "block_share",
    "B_CONFIG",
    "XL_CONFIG",
    "two_level",
    "three_level",
    "uniform",
]


def block_macs(L: int, d: int, mlp_ratio: int = 4) -> int:
    return 4 * L * d * d + 2 * mlp_ratio * L * d * d + 2 * L * L * d


def _embedder_macs(config: ModelConfig) -> int:
    d = config.d
    # timestep MLP, adaLN modulations of every block and the final layer
    return FREQ_DIM * d + d * d + config.depth * 6 * d * d + 2 * d * d


def model_macs(config: ModelConfig, L: int, latent_size: int | None = None) -> int:
    """MACs of one velocity evaluation with ``L`` tokens."""
    I = latent_size or config.latent_size
    projections = 2 * I * I * config.latent_channels * config.d
    return config.depth * block_macs(L, config.d, config.mlp_ratio) + projections + _embedder_macs(config)


def block_share(config: ModelConfig, L: int) -> float:
    return config.depth * block_macs(L, config.d, config.mlp_ratio) / model_macs(config, L)


def stage_tokens(schedule: PatchSchedule, latent_size: int | None = None) -> list[int]:
    I = latent_size or schedule.latent_size
    out = []
    for st in schedule.stages:
        gh, gw = grid_shape(I, st.patch)
        out.append(gh * gw)
    return out


def stage_step_counts(schedule: PatchSchedule, K: int) -> list[int]:
    """Steps of the uniform grid t_k = k/K (k < K) falling in each stage.

    Stage s owns [lo, hi), so it receives ceil(K*hi) - ceil(K*lo) steps; the
    last stage takes the remainder. Exact rational arithmetic.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    edges = [Fraction(0)] + [Fraction(str(b)) for b in schedule.boundaries] + [Fraction(1)]
    ceil = [-((-K * e.numerator) // e.denominator) for e in edges]
    return [ceil[i + 1] - ceil[i] for i in range(len(schedule))]


MacsFn = Callable[[ModelConfig, int], int]


def schedule_ratio(
    schedule: PatchSchedule, config: ModelConfig, K: int | None = None, macs_fn: MacsFn = model_macs
) -> float:
    """Percent of a uniform finest-stage model's evaluation cost.

    Stages are weighted by interval length, or by step counts when ``K`` is given.
    """
    tokens = stage_tokens(schedule, config.latent_size)
    if K is None:
        weights = [st.t_hi - st.t_lo for st in schedule.stages]
    else:
        weights = [c / K for c in stage_step_counts(schedule, K)]
    fine = macs_fn(config, tokens[-1])
    return 100.0 * sum(w * macs_fn(config, L) for w, L in zip(weights, tokens)) / fine


def schedule_macs(schedule: PatchSchedule, config: ModelConfig, K: int, evals_per_step: int = 1) -> int:
    tokens = stage_tokens(schedule, config.latent_size)
    counts = stage_step_counts(schedule, K)
    return evals_per_step * sum(c * model_macs(config, L) for c, L in zip(counts, tokens))


@dataclass
class FlopsReport:
    tokens: list[int]
    macs_per_eval: list[int]
    steps: list[int]
    K: int
    ratio_vs_uniform: float
    ratio_at_K: float
    block_share: float
    uniform_macs_per_eval: int
    notes: list[str] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [
            f"stages={len(self.tokens)}",
            f"K={self.K}",
            f"uniform_macs_per_eval={self.uniform_macs_per_eval}",
            f"block_share={self.block_share:.6f}",
            f"ratio_vs_uniform={self.ratio_vs_uniform:.4f}",
            f"ratio_at_K={self.ratio_at_K:.4f}",
            f"speedup_predicted={100.0 / self.ratio_vs_uniform:.4f}",
        ]
        for s, (L, m, c) in enumerate(zip(self.tokens, self.macs_per_eval, self.steps)):
            out += [f"stage.{s}.tokens={L}", f"stage.{s}.macs_per_eval={m}", f"stage.{s}.steps={c}"]
        out += [f"note.{i}={n!r}" for i, n in enumerate(self.notes)]
        return out


def analyze(schedule: PatchSchedule, config: ModelConfig, K: int = 50) -> FlopsReport:
    tokens = stage_tokens(schedule, config.latent_size)
    notes = ["MAC convention: block 12Ld^2+2L^2d plus projection and embedder terms; softmax and norms ignored"]
    if config.latent_size != 32:
        notes.append(
            "caveat: at latent size != 32 absolute percentages depend on the counting convention and may differ by a few points"
        )
    return FlopsReport(
        tokens=tokens,
        macs_per_eval=[model_macs(config, L) for L in tokens],
        steps=stage_step_counts(schedule, K),
        K=K,
        ratio_vs_uniform=schedule_ratio(schedule, config),
        ratio_at_K=schedule_ratio(schedule, config, K=K),
        block_share=block_share(config, tokens[-1]),
        uniform_macs_per_eval=model_macs(config, tokens[-1]),
        notes=notes,
    )


@dataclass
class BenchReport:
    pyramidal_per_sample: float
    uniform_per_sample: float
    pyramidal_per_step: float
    uniform_per_step: float
    speedup: float
    repeats: int
    threads: int | None

    def lines(self) -> list[str]:
        return [
            f"pyramidal_sec_per_sample={self.pyramidal_per_sample:.6f}",
            f"uniform_sec_per_sample={self.uniform_per_sample:.6f}",
            f"pyramidal_sec_per_step={self.pyramidal_per_step:.6f}",
            f"uniform_sec_per_step={self.uniform_per_step:.6f}",
            f"speedup={self.speedup:.4f}",
            f"repeats={self.repeats}",
            f"threads={self.threads}",
        ]


def _time_sampling(model: ModelState, K: int, repeats: int, class_id: int) -> list[float]:
    from .sampler import SampleConfig, euler_sample

    cfg = SampleConfig(steps=K, class_id=class_id, seed=0, schedule=model.schedule)
    euler_sample(model, cfg)  # warmup
    times = []
    for r in range(repeats):
        t0 = time.perf_counter()
        euler_sample(model, SampleConfig(steps=K, class_id=class_id, seed=r, schedule=model.schedule))
        times.append(time.perf_counter() - t0)
    return times


def bench_wallclock(
    model: ModelState,
    schedule: PatchSchedule | None = None,
    K: int = 50,
    repeats: int = 5,
    class_id: int = 0,
    threads: int | None = 1,
    baseline: ModelState | None = None,
) -> BenchReport:
    """Median per-image sampling time under ``schedule`` vs the finest stage alone.

    Both runs share the same weights; the baseline defaults to ``model.uniform_view()``.
    """
    if repeats < 5:
        raise ValueError("repeats must be at least 5")
    if schedule is not None and schedule != model.schedule:
        model = ModelState(model.config, schedule, model.params)
    base = baseline if baseline is not None else model.uniform_view()

    def run():
        pyr = _time_sampling(model, K, repeats, class_id)
        uni = _time_sampling(base, K, repeats, class_id)
        return pyr, uni

    used_threads = threads
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            pyr, uni = run()
    except ImportError:  # pragma: no cover
        used_threads = None
        pyr, uni = run()
    p, u = statistics.median(pyr), statistics.median(uni)
    return BenchReport(p, u, p / K, u / K, u / p, repeats, used_threads)


# Reference model and schedule presets used by the analyzer CLI and tests.
B_CONFIG = ModelConfig(d=768, depth=12, heads=12, num_classes=1000, latent_channels=4, latent_size=32)
XL_CONFIG = ModelConfig(d=1152, depth=28, heads=16, num_classes=1000, latent_channels=4, latent_size=32)


def two_level(latent_size: int = 32, cfg: Sequence[float] = (1.5, 3.5)) -> PatchSchedule:
    return make_schedule([0.5], [(4, 4), (2, 2)], cfg, latent_size)


def three_level(latent_size: int = 32, cfg: Sequence[float] = (1.5, 3.5, 4.0)) -> PatchSchedule:
    return make_schedule([0.5, 0.75], [(4, 4), (4, 2), (2, 2)], cfg, latent_size)


def uniform(latent_size: int = 32, cfg: float = 1.0) -> PatchSchedule:
    return make_schedule([], [(2, 2)], [cfg], latent_size)
