from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppflow import flops
from ppflow.backbone import ModelConfig, init_model
from ppflow.flops import (
    B_CONFIG,
    XL_CONFIG,
    analyze,
    bench_wallclock,
    block_macs,
    block_share,
    model_macs,
    schedule_macs,
    schedule_ratio,
    stage_step_counts,
    stage_tokens,
    three_level,
    two_level,
    uniform,
)
from ppflow.patching import make_schedule
from ppflow.sampler import SampleConfig, trace_stages

from conftest import TINY


def macs_oracle(L, d):
    qkv = L * d * 3 * d
    proj = L * d * d
    mlp = 2 * L * d * 4 * d
    attn = 2 * L * L * d
    return qkv + proj + mlp + attn


class TestBlockMacs:
    def test_unit(self):
        assert block_macs(1, 1) == 14

    @pytest.mark.parametrize("L,d,expect", [(256, 768, 1_912_602_624), (64, 768, 459_276_288)])
    def test_values(self, L, d, expect):
        assert block_macs(L, d) == expect == macs_oracle(L, d)


class TestModelMacs:
    def test_xl_block_share(self):
        assert block_share(XL_CONFIG, 256) >= 0.995

    def test_projection_cost_stage_independent(self):
        s = three_level()
        depth0 = replace(B_CONFIG, depth=0)
        costs = {model_macs(depth0, L) - 0 for L in stage_tokens(s)}
        # without blocks, only projections and embedders remain: equal for all stages
        assert len(costs) == 1

    def test_depth_zero(self):
        cfg = replace(B_CONFIG, depth=0)
        assert model_macs(cfg, 256) == model_macs(cfg, 64)
        assert model_macs(cfg, 256) > 0


class TestRatio:
    @pytest.mark.parametrize(
        "config,schedule,expect,tol",
        [
            (B_CONFIG, two_level(), 62.0, 1.0),
            (B_CONFIG, three_level(), 49.1, 1.0),
            (XL_CONFIG, two_level(), 62.6, 1.0),
            (XL_CONFIG, three_level(), 49.4, 1.0),
            (XL_CONFIG, two_level(), 100 - 37.8, 1.0),
            (XL_CONFIG, three_level(), 100 - 50.6, 1.0),
            (replace(XL_CONFIG, latent_size=64), two_level(64), 58.7, 3.0),
            (replace(XL_CONFIG, latent_size=64), three_level(64), 45.4, 3.0),
        ],
    )
    def test_table_values(self, config, schedule, expect, tol):
        assert abs(schedule_ratio(schedule, config) - expect) <= tol

    def test_single_stage_exact(self):
        assert schedule_ratio(uniform(), B_CONFIG) == 100.0

    def test_convention_invariance(self):
        doubled = lambda cfg, L, latent_size=None: 2 * model_macs(cfg, L, latent_size)
        for s in (two_level(), three_level()):
            assert abs(schedule_ratio(s, XL_CONFIG, macs_fn=doubled) - schedule_ratio(s, XL_CONFIG)) < 1e-12

    def test_bounds(self):
        for s in (two_level(), three_level()):
            r = schedule_ratio(s, B_CONFIG)
            coarse = 100 * model_macs(B_CONFIG, stage_tokens(s)[0]) / model_macs(B_CONFIG, stage_tokens(s)[-1])
            assert coarse <= r < 100


class TestStepAccounting:
    def test_step_counts(self):
        assert stage_step_counts(three_level(), 50) == [25, 13, 12]
        assert stage_step_counts(two_level(), 50) == [25, 25]

    @pytest.mark.parametrize("sched", [two_level(), three_level()])
    @pytest.mark.parametrize("K", [4, 8, 50, 7])
    def test_sampler_integrated_equals_analyzer(self, sched, K):
        per_step = sum(model_macs(B_CONFIG, sched.token_count(s)) for _, s, _ in trace_stages(SampleConfig(steps=K, schedule=sched)))
        assert per_step == schedule_macs(sched, B_CONFIG, K)

    @pytest.mark.parametrize("sched,K", [(two_level(), 4), (three_level(), 8), (three_level(), 40)])
    def test_divisible_k_matches_ratio(self, sched, K):
        fine = model_macs(B_CONFIG, sched.token_count(len(sched) - 1))
        pred = K * schedule_ratio(sched, B_CONFIG) * fine / 100
        assert abs(schedule_macs(sched, B_CONFIG, K) - pred) <= 1e-6 * pred

    def test_evals_per_step(self):
        assert schedule_macs(two_level(), B_CONFIG, 10, evals_per_step=2) == 2 * schedule_macs(two_level(), B_CONFIG, 10)


class TestReport:
    def test_lines_parseable(self):
        lines = analyze(two_level(), B_CONFIG).lines()
        kv = dict(line.split("=", 1) for line in lines)
        assert float(kv["ratio_vs_uniform"]) == pytest.approx(62.09, abs=0.01)
        assert kv["stage.0.steps"] == "25"
        assert all("=" in line for line in lines)

    def test_caveat_at_512(self):
        text = "\n".join(analyze(two_level(64), replace(XL_CONFIG, latent_size=64)).lines())
        assert "caveat" in text
        assert "caveat" not in "\n".join(analyze(two_level(), XL_CONFIG).lines())


class TestBench:
    def test_median_and_ratio(self, uniform8, monkeypatch):
        import ppflow.flops as F

        fake = iter([[5.0, 1.0, 2.0, 9.0, 3.0], [4.0, 8.0, 6.0, 100.0, 7.0]])
        monkeypatch.setattr(F, "_time_sampling", lambda model, K, repeats, class_id: next(fake))
        r = bench_wallclock(init_model(TINY, uniform8), K=10, repeats=5)
        assert (r.pyramidal_per_sample, r.uniform_per_sample) == (3.0, 7.0)
        assert r.speedup == pytest.approx(7.0 / 3.0)
        assert r.pyramidal_per_step == pytest.approx(0.3) and r.uniform_per_step == pytest.approx(0.7)

    def test_uniform_self_comparison_runs(self, uniform8):
        # timings this small are noise-dominated; only the report shape is checked
        m = init_model(replace(TINY, d=64, heads=2), uniform8)
        r = bench_wallclock(m, K=4, repeats=5)
        assert r.speedup > 0 and r.uniform_per_sample > 0 and r.pyramidal_per_sample > 0
        assert r.threads == 1 and r.repeats == 5

    def test_repeats_minimum(self, uniform8):
        with pytest.raises(ValueError):
            bench_wallclock(init_model(TINY, uniform8), K=2, repeats=3)


@settings(max_examples=30, deadline=None)
@given(
    b=st.lists(st.sampled_from([0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875]), min_size=1, max_size=2, unique=True)
)
def test_any_pyramid_below_uniform(b):
    b = sorted(b)
    sizes = [(4, 4), (4, 2), (2, 2)][-(len(b) + 1):] if len(b) == 2 else [(4, 4), (2, 2)]
    s = make_schedule(b, sizes, [1.0] * len(sizes), 32)
    assert schedule_ratio(s, B_CONFIG) < 100
