import hashlib
from pathlib import Path

import numpy as np
import pytest

from ppflow.checkpoint import read_tensors
from ppflow.cli import main
from ppflow.config import SCHEMA, ConfigError, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY_CFG = CONFIGS / "tiny.cfg"

PPF_TINY = """
model.d = 32
model.depth = 2
model.heads = 2
model.num_classes = 4
model.latent_channels = 2
model.latent_size = 8
schedule.boundaries = [0.5]
schedule.patch_sizes = [[4, 4], [2, 2]]
schedule.cfg_scales = [1.5, 1.5]
train.steps = 4
train.batch_size = 4
train.n_per_class = 8
train.token_budget = 16
sample.steps = 8
eval.num_per_class = 4
"""


class TestConfig:
    def test_defaults_and_types(self):
        cfg = parse_config("model.d = 64  # width\nmodel.heads = 4\nschedule.cfg_scales = [2.0]\ntrain.pack_mode = by_stage\n")
        assert cfg.model().d == 64 and cfg.model().depth == SCHEMA["model.depth"]
        assert cfg.schedule().cfg_scales == [2.0]
        assert cfg.train().pack_mode == "by_stage"

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="model.width"):
            parse_config("model.width = 3")

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_config("just words")

    def test_invalid_schedule_is_config_error(self):
        with pytest.raises(ConfigError):
            parse_config("schedule.patch_sizes = [[3, 3]]").schedule()

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.stem)
    def test_shipped_configs_parse(self, path):
        cfg = load_config(path)
        cfg.model(), cfg.schedule(), cfg.train(), cfg.sample()


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(text):
    return dict(tok.split("=", 1) for line in text.splitlines() for tok in line.split(" ") if "=" in tok)


class TestCli:
    def test_analyze_b_two_level(self, capsys):
        code, out, _ = run(["analyze", "--config", CONFIGS / "b_two_level.cfg"], capsys)
        assert code == 0 and abs(float(kv(out)["ratio_vs_uniform"]) - 62.0) <= 1.0

    def test_unknown_key_exit(self, capsys, tmp_path):
        (tmp_path / "bad.cfg").write_text("model.d = 32\nfoo.bar = 1\n")
        code, _, err = run(["analyze", "--config", tmp_path / "bad.cfg"], capsys)
        assert code == 2 and err.startswith("error category=config") and "foo.bar" in err
        assert len(err.strip().splitlines()) == 1

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(["eval", tmp_path / "nope.ckpt"], capsys)
        assert code == 3 and "category=io" in err

    def test_corrupt_checkpoint(self, capsys, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"ppflow-tensors 1\nheader-bytes 99\n{")
        code, _, err = run(["sample", tmp_path / "c.ckpt", "--out", tmp_path / "s"], capsys)
        assert code == 4 and "category=format" in err

    def test_pipeline(self, capsys, tmp_path):
        u, p = tmp_path / "u.ckpt", tmp_path / "p.ckpt"
        code, out, _ = run(["train", "--config", TINY_CFG, "--set", "train.steps=5", "--out", u], capsys)
        assert code == 0 and kv(out)["steps"] == "5"
        log = (tmp_path / "u.ckpt.log").read_text().splitlines()
        assert len(log) == 5 and all(set(kv(line)) == {"step", "epoch", "loss", "macs"} for line in log)

        (tmp_path / "ppf.cfg").write_text(PPF_TINY)
        assert run(["convert", u, "--config", tmp_path / "ppf.cfg", "--out", p], capsys)[0] == 0

        # sampling twice is reproducible, file for file
        for name in ("s1", "s2"):
            assert run(["sample", p, "--class", 2, "--seed", 7, "--steps", 6, "--num", 3, "--out", tmp_path / name], capsys)[0] == 0
        assert (tmp_path / "s1").read_bytes() == (tmp_path / "s2").read_bytes()
        header, tensors = read_tensors(tmp_path / "s1")
        assert sorted(tensors) == ["sample/0", "sample/1", "sample/2"] and tensors["sample/0"].shape == (2, 8, 8)

        # fine-stage-only trajectory: converted == uniform
        args = ["--class", 1, "--seed", 3, "--steps", 6, "--t-start", 0.5]
        run(["sample", u, *args, "--out", tmp_path / "fu"], capsys)
        run(["sample", p, *args, "--out", tmp_path / "fp"], capsys)
        a, b = read_tensors(tmp_path / "fu")[1], read_tensors(tmp_path / "fp")[1]
        np.testing.assert_array_equal(a["sample/0"], b["sample/0"])

        code, out, _ = run(["eval", p, "--config", tmp_path / "ppf.cfg"], capsys)
        assert code == 0 and float(kv(out)["desk_fid"]) > 0

        # fine-tune the converted checkpoint through train.init
        code, out, _ = run(["train", "--config", tmp_path / "ppf.cfg", "--set", f'train.init="{p}"',
                            "--out", tmp_path / "p2.ckpt"], capsys)
        assert code == 0

        # a uniform config cannot resume a pyramidal checkpoint without conversion
        code, _, err = run(["train", "--config", TINY_CFG, "--set", f'train.init="{p}"', "--out", tmp_path / "z"], capsys)
        assert code == 5 and "category=conversion" in err

        code, out, _ = run(["bench", p, "--steps", 2, "--repeats", 5], capsys)
        assert code == 0 and {"speedup", "threads", "repeats"} <= set(kv(out))

    def test_convert_rejects_pyramidal_source(self, capsys, tmp_path):
        (tmp_path / "ppf.cfg").write_text(PPF_TINY)
        u, p = tmp_path / "u.ckpt", tmp_path / "p.ckpt"
        run(["train", "--config", TINY_CFG, "--set", "train.steps=1", "--out", u], capsys)
        run(["convert", u, "--config", tmp_path / "ppf.cfg", "--out", p], capsys)
        code, _, err = run(["convert", p, "--config", tmp_path / "ppf.cfg", "--out", tmp_path / "q"], capsys)
        assert code == 5 and "category=conversion" in err
