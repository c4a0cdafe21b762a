"""Command-line entry point: train, convert, sample, analyze, eval, bench.

Failures print a single line ``error category=<cat> message=<text>`` to
stderr and exit nonzero (2 config, 3 io, 4 format, 5 conversion, 1 other).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import ConversionRequiredError, FormatError, LoadError, load_checkpoint, save_checkpoint, write_tensors
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .flops import analyze, bench_wallclock
from .patching import ConfigurationError
from .pipeline import checksum, evaluate, format_record, generate, train_run
from .training import ConversionError, convert_checkpoint, new_checkpoint

_EXIT = {"config": 2, "io": 3, "format": 4, "conversion": 5, "error": 1}


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(cfg, getattr(args, "set", None) or [])


def cmd_train(args) -> None:
    cfg = _config(args)
    init = cfg["train.init"]
    if init:
        ckpt = load_checkpoint(init, expected_schedule=cfg.schedule())
    else:
        dtype = np.dtype(str(cfg["train.dtype"]))
        ckpt = new_checkpoint(cfg.model(), cfg.schedule(), seed=int(cfg["train.init_seed"]), dtype=dtype)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    with open(log_path, "w") as fh:
        losses = train_run(ckpt, cfg.train(), int(cfg["train.data_seed"]), int(cfg["train.n_per_class"]),
                           log=lambda line: fh.write(line + "\n"))
    save_checkpoint(ckpt, args.out)
    print(format_record({"steps": len(losses), "final_loss": losses[-1] if losses else float("nan"),
                         "checkpoint": str(args.out), "log": str(log_path)}))


def cmd_convert(args) -> None:
    cfg = _config(args)
    src = load_checkpoint(args.checkpoint)
    level = cfg["model.use_level_embed"] if args.level_embed is None else args.level_embed
    out = convert_checkpoint(src, cfg.schedule(), use_level_embed=bool(level))
    save_checkpoint(out, args.out)
    print(format_record({"stages": len(out.model.schedule), "checkpoint": str(args.out)}))


def cmd_sample(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    classes = np.full(args.num, args.class_id)
    x = generate(ckpt, classes, args.seed, args.steps, use_ema=not args.no_ema, batch=args.batch, t_start=args.t_start)
    write_tensors(args.out, {f"sample/{i}": x[i] for i in range(len(x))}, kind="tensors",
                  header_extra={"meta": {"class_id": args.class_id, "seed": args.seed, "steps": args.steps,
                                          "t_start": args.t_start}})
    print(format_record({"samples": len(x), "sha256": checksum(x), "out": str(args.out)}))


def cmd_analyze(args) -> None:
    cfg = _config(args)
    report = analyze(cfg.schedule(), cfg.model(), K=args.steps)
    print("\n".join(report.lines()))


def cmd_eval(args) -> None:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    score = evaluate(ckpt, int(cfg["eval.num_per_class"]), int(cfg["eval.seed"]), int(cfg["eval.proj_seed"]),
                     int(cfg["sample.steps"]), bool(cfg["sample.use_ema"]), int(cfg["eval.batch"]))
    print(format_record({"desk_fid": score, "checkpoint": str(args.checkpoint), "step": ckpt.step}))


def cmd_bench(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.ema_model() if not args.no_ema else ckpt.model
    report = bench_wallclock(model, K=args.steps, repeats=args.repeats, threads=args.threads)
    print("\n".join(report.lines()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("train", help="train a model from a config")
    with_config(sp, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("convert", help="uniform checkpoint + schedule -> pyramidal checkpoint")
    sp.add_argument("checkpoint")
    with_config(sp, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--level-embed", dest="level_embed", action="store_true", default=None)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("sample", help="draw latents from a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--class", dest="class_id", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--num", type=int, default=1)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--t-start", dest="t_start", type=float, default=0.0, help="start the trajectory at this t")
    sp.add_argument("--no-ema", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("analyze", help="FLOPs report for a model config and schedule")
    with_config(sp)
    sp.add_argument("--steps", type=int, default=50)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("eval", help="desk Fréchet distance against the regenerated training set")
    sp.add_argument("checkpoint")
    with_config(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="wall-clock sampling: schedule vs finest stage only")
    sp.add_argument("checkpoint")
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--no-ema", action="store_true")
    sp.set_defaults(func=cmd_bench)
    return p


def _fail(category: str, exc: BaseException) -> int:
    msg = json.dumps(str(exc))
    print(f"error category={category} message={msg}", file=sys.stderr)
    return _EXIT[category]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        return _fail("config", exc)
    except (ConversionError, ConversionRequiredError) as exc:
        return _fail("conversion", exc)
    except FormatError as exc:
        return _fail("format", exc)
    except LoadError as exc:
        return _fail("format", exc)
    except OSError as exc:
        return _fail("io", exc)
    except Exception as exc:  # noqa: BLE001 - surface as one line
        return _fail("error", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
