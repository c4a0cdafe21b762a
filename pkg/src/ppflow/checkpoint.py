"""Portable named-tensor container used for checkpoints and latent dumps.

Byte layout::

    b"ppflow-tensors 1\\n"          magic line, format version 1
    b"header-bytes <N>\\n"          decimal length of the JSON header
    <N bytes of UTF-8 JSON>        header (see below)
    <data region>                  raw little-endian buffers, back to back

The header is a JSON object with ``format_version``, ``kind``
(``"checkpoint"`` or ``"tensors"``), optional ``model_config`` and
``schedule`` objects, a free-form ``meta`` object, ``data_bytes`` (length of
the data region) and ``tensors``: a list of ``{name, dtype, shape, offset,
nbytes}`` where ``dtype`` is a numpy type string (``"<f4"``, ``"<f8"``,
``"<i8"``) and ``offset`` is relative to the start of the data region.
Buffers are C-order.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ModelConfig, ModelState, param_shapes
from .patching import PatchSchedule

__all__ = [
    "FORMAT_VERSION",
    "FormatError",
    "LoadError",
    "ConversionRequiredError",
    "Checkpoint",
    "write_tensors",
    "read_tensors",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT_VERSION = 1
_MAGIC = b"ppflow-tensors 1\n"
_DTYPES = {"<f4", "<f8", "<i8"}


class FormatError(ValueError):
    """The file is not a valid container; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class LoadError(ValueError):
    """Container is well-formed but inconsistent with its declared model."""


class ConversionRequiredError(LoadError):
    """Checkpoint schedule differs from the requested one; run ``convert`` first."""


@dataclass
class Checkpoint:
    model: ModelState
    ema: dict[str, np.ndarray] | None = None
    opt: dict[str, dict] = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    def ema_model(self) -> ModelState:
        if self.ema is None:
            return self.model
        return ModelState(self.model.config, self.model.schedule, self.ema)


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
    if arr.dtype.kind == "f":
        target = np.dtype("<f4") if arr.dtype.itemsize == 4 else np.dtype("<f8")
    elif arr.dtype.kind in "iu":
        target = np.dtype("<i8")
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return arr.astype(target, copy=False)


def write_tensors(path, tensors: dict[str, np.ndarray], *, kind: str = "tensors", header_extra: dict | None = None) -> None:
    entries, buffers, offset = [], [], 0
    for name, arr in tensors.items():
        arr = _le(arr)
        buf = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        buffers.append(buf)
        offset += len(buf)
    header = {"format_version": FORMAT_VERSION, "kind": kind, "meta": {}, "tensors": entries, "data_bytes": offset}
    header.update(header_extra or {})
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(b"header-bytes %d\n" % len(blob))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)
    os.replace(tmp, path)


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, tensors); raises FormatError on any structural problem."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise FormatError("bad magic line", 0)
    pos = len(_MAGIC)
    nl = raw.find(b"\n", pos)
    line = raw[pos:nl] if nl >= 0 else b""
    if nl < 0 or not line.startswith(b"header-bytes "):
        raise FormatError("missing header-bytes line", pos)
    try:
        hlen = int(line[len(b"header-bytes "):])
    except ValueError:
        raise FormatError("header length is not an integer", pos) from None
    pos = nl + 1
    if pos + hlen > len(raw):
        raise FormatError(f"header needs {hlen} bytes, file ends early", len(raw))
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", pos) from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise FormatError("unsupported format version", pos)
    base = pos + hlen
    data_bytes = header.get("data_bytes")
    if not isinstance(data_bytes, int) or base + data_bytes != len(raw):
        raise FormatError(f"data region should span {data_bytes} bytes, found {len(raw) - base}", len(raw))
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        try:
            name, dt, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
            off, nbytes = entry["offset"], entry["nbytes"]
        except (KeyError, TypeError):
            raise FormatError(f"malformed tensor entry {entry!r}", pos) from None
        if dt not in _DTYPES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {dt}", pos)
        dtype = np.dtype(dt)
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != nbytes or off < 0 or off + nbytes > data_bytes:
            raise FormatError(f"tensor {name!r} extent is inconsistent", base + max(off, 0))
        arr = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=base + off).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return header, tensors


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors: dict[str, np.ndarray] = {f"model/{k}": v for k, v in ckpt.model.params.items()}
    if ckpt.ema is not None:
        tensors.update({f"ema/{k}": v for k, v in ckpt.ema.items()})
    for name, st in ckpt.opt.items():
        tensors[f"opt/m/{name}"] = st["m"]
        tensors[f"opt/v/{name}"] = st["v"]
        tensors[f"opt/t/{name}"] = np.asarray(st["t"], dtype=np.int64)
    extra = {
        "model_config": ckpt.model.config.to_dict(),
        "schedule": ckpt.model.schedule.to_dict(),
        "meta": dict(ckpt.meta, step=int(ckpt.step)),
    }
    write_tensors(path, tensors, kind="checkpoint", header_extra=extra)


def _layout(s: PatchSchedule) -> tuple:
    return (tuple(s.boundaries), tuple(s.patch_sizes), s.latent_size)


def load_checkpoint(path, expected_schedule: PatchSchedule | None = None) -> Checkpoint:
    header, tensors = read_tensors(path)
    if header.get("kind") != "checkpoint":
        raise LoadError(f"{path} holds {header.get('kind')!r}, not a checkpoint")
    try:
        config = ModelConfig.from_dict(header["model_config"])
        schedule = PatchSchedule.from_dict(header["schedule"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"invalid model description in header: {exc}") from None
    if expected_schedule is not None:
        if _layout(expected_schedule) != _layout(schedule):
            raise ConversionRequiredError(
            f"checkpoint schedule {schedule.patch_sizes}@{schedule.boundaries} differs from requested "
            f"{expected_schedule.patch_sizes}@{expected_schedule.boundaries}; convert the checkpoint first"
            )
        # guidance scales only affect sampling, so the requested ones win
        schedule = expected_schedule
    shapes = param_shapes(config, schedule)
    groups: dict[str, dict[str, np.ndarray]] = {"model": {}, "ema": {}}
    opt: dict[str, dict] = {}
    for name, arr in tensors.items():
        head, _, rest = name.partition("/")
        if head in groups:
            groups[head][rest] = arr
        elif head == "opt":
            kind, _, pname = rest.partition("/")
            opt.setdefault(pname, {})[kind] = arr if kind != "t" else int(arr)
        else:
            raise LoadError(f"unexpected tensor {name!r}")
    for group in ("model", "ema"):
        got = groups[group]
        if group == "ema" and not got:
            continue
        if set(got) != set(shapes):
            missing, extra = sorted(set(shapes) - set(got)), sorted(set(got) - set(shapes))
            raise LoadError(f"{group} tensors do not match config: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, shp in shapes.items():
            if got[k].shape != shp:
                raise LoadError(f"{group}/{k} has shape {got[k].shape}, config implies {shp}")
    for pname, st in opt.items():
        if pname not in shapes or set(st) != {"m", "v", "t"}:
            raise LoadError(f"incomplete optimizer state for {pname!r}")
    meta = dict(header.get("meta", {}))
    step = int(meta.pop("step", 0))
    model = ModelState(config, schedule, {k: groups["model"][k] for k in shapes})
    ema = {k: groups["ema"][k] for k in shapes} if groups["ema"] else None
    return Checkpoint(model, ema, opt, step, meta)
