import json

import numpy as np
import pytest

from ppflow.checkpoint import (
    ConversionRequiredError,
    FormatError,
    LoadError,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from ppflow.data import gen_dataset
from ppflow.patching import make_schedule
from ppflow.training import TrainConfig, new_checkpoint, train

from conftest import TINY


@pytest.fixture
def trained(uniform8):
    ds = gen_dataset(0, 4, 4, channels=2, size=8)
    ck = new_checkpoint(TINY, uniform8, seed=0)
    train(ck, ds.x, ds.labels, TrainConfig(batch_size=4, steps=3, token_budget=16, ema_decay=0.9))
    ck.meta["note"] = "x"
    return ck


def test_roundtrip_bit_identical(trained, tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(trained, p)
    back = load_checkpoint(p)
    assert back.step == 3 and back.meta == {"note": "x"}
    assert back.model.config == trained.model.config and back.model.schedule == trained.model.schedule
    for k, v in trained.model.params.items():
        assert back.model.params[k].dtype == v.dtype
        np.testing.assert_array_equal(back.model.params[k], v)
        np.testing.assert_array_equal(back.ema[k], trained.ema[k])
        np.testing.assert_array_equal(back.opt[k]["v"], trained.opt[k]["v"])
        assert back.opt[k]["t"] == trained.opt[k]["t"]


def test_identical_bytes_on_resave(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_float64_roundtrip(uniform8, tmp_path):
    ck = new_checkpoint(TINY, uniform8, dtype=np.float64)
    save_checkpoint(ck, tmp_path / "d")
    assert load_checkpoint(tmp_path / "d").model.dtype == np.float64


@pytest.mark.parametrize("cut", [5, 30, 400, -1])
def test_truncated(trained, tmp_path, cut):
    p = tmp_path / "a.ckpt"
    save_checkpoint(trained, p)
    raw = p.read_bytes()
    (tmp_path / "t").write_bytes(raw[:cut])
    with pytest.raises(FormatError) as ei:
        load_checkpoint(tmp_path / "t")
    assert ei.value.offset >= 0 and "byte" in str(ei.value)


def test_corrupt_header(trained, tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(trained, p)
    raw = bytearray(p.read_bytes())
    start = raw.index(b"{")
    raw[start] = ord("#")
    (tmp_path / "c").write_bytes(bytes(raw))
    with pytest.raises(FormatError) as ei:
        load_checkpoint(tmp_path / "c")
    assert ei.value.offset == start


def test_bad_magic(tmp_path):
    (tmp_path / "m").write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        read_tensors(tmp_path / "m")


def _rewrite_header(path, edit):
    raw = path.read_bytes()
    nl1 = raw.index(b"\n") + 1
    nl2 = raw.index(b"\n", nl1) + 1
    n = int(raw[nl1:nl2].split()[1])
    header = json.loads(raw[nl2 : nl2 + n])
    edit(header)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(raw[:nl1] + b"header-bytes %d\n" % len(blob) + blob + raw[nl2 + n :])


def test_shape_mismatch_vs_config(trained, tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(trained, p)
    _rewrite_header(p, lambda h: h["model_config"].update(d=64, heads=2))
    with pytest.raises(LoadError):
        load_checkpoint(p)


def test_mismatched_schedule(trained, tmp_path, two_level8):
    p = tmp_path / "a.ckpt"
    save_checkpoint(trained, p)
    with pytest.raises(ConversionRequiredError):
        load_checkpoint(p, expected_schedule=two_level8)


def test_cfg_only_difference_is_not_a_conversion(trained, tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(trained, p)
    want = trained.model.schedule.with_cfg([2.5])
    assert load_checkpoint(p, expected_schedule=want).model.schedule.cfg_scales == [2.5]


def test_write_tensors_dump(tmp_path):
    arrs = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
    write_tensors(tmp_path / "x", arrs, header_extra={"meta": {"k": 1}})
    header, back = read_tensors(tmp_path / "x")
    assert header["kind"] == "tensors" and header["meta"] == {"k": 1}
    for k in arrs:
        np.testing.assert_array_equal(back[k], arrs[k])
    assert not list(tmp_path.glob("*.tmp"))


def test_not_a_checkpoint(tmp_path):
    write_tensors(tmp_path / "x", {"a": np.zeros(2)})
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "x")
