"""Command-line entry point: synth, train, infer, eval, gradcheck, bench.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from mccl import gradcheck
from mccl.data import synth_generate
from mccl.metrics import evaluate_dataset
from mccl.train import TrainConfig, bench, infer, load_inference_model, train

log = logging.getLogger("mccl")

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def read_config(path) -> dict:
    """Parse a ``key=value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(name: str, typ, value):
    typ = str(typ)
    if isinstance(value, str):
        if typ == "bool":
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise UsageError(f"{name}: not a boolean: {value!r}")
            return low in ("1", "true", "yes", "on")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "tuple":
            return tuple(int(v) for v in value.split(","))
    return value


def build_train_config(config_file: Optional[str], overrides: dict) -> TrainConfig:
    types = TrainConfig.field_types()
    values = read_config(config_file) if config_file else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return TrainConfig(**{k: _coerce(k, types[k], v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _config_values(args, keys: Sequence[str]) -> dict:
    """Settings from ``--config`` merged with explicit flags (flags win)."""
    values = read_config(args.config) if args.config else {}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    return values


def cmd_synth(args) -> int:
    v = _config_values(args, ("groups", "per_group", "size", "seed", "out"))
    if "out" not in v:
        raise UsageError("synth: --out is required")
    out = synth_generate(int(v.get("groups", 6)), int(v.get("per_group", 12)), int(v.get("size", 64)),
                         int(v.get("seed", 0)), v["out"])
    print(f"wrote dataset to {out}")
    return 0


TRAIN_FLAGS = {
    "image_size": int, "epochs": int, "lr": float, "n_groups_per_batch": int, "group_cap": int,
    "lr_drop_epochs_from_end": int, "weight_decay": float, "beta": float, "alpha": float,
    "lambda1": float, "lambda2": float, "lambda3": float, "lambda4": float, "lambda5": float,
    "enable_gcam": str, "enable_mcm": str, "enable_ail": str, "mcm_clamp": str, "mcm_normalize": str,
    "channels": str,
    "clip_norm": float, "augment": str,
}


def cmd_train(args) -> int:
    if not args.data:
        raise UsageError("train: --data is required")
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS}
    overrides["seed"] = args.seed
    cfg = build_train_config(args.config, overrides)
    result = train(cfg, args.data, args.out, progress=True)
    print(f"trained {cfg.epochs} epochs in {result.seconds:.1f}s; checkpoint {result.checkpoint}")
    return 0


def cmd_infer(args) -> int:
    v = _config_values(args, ("checkpoint", "data", "out", "image_size"))
    for key in ("checkpoint", "data", "out"):
        if key not in v:
            raise UsageError(f"infer: --{key} is required")
    written = infer(v["checkpoint"], v["data"], v["out"], int(v.get("image_size", 64)))
    print(f"wrote {len(written)} maps to {v['out']}")
    return 0


def cmd_eval(args) -> int:
    v = _config_values(args, ("pred", "gt", "out"))
    if "pred" not in v or "gt" not in v:
        raise UsageError("eval: --pred and --gt are required")
    gt = Path(v["gt"])
    if (gt / "gts").is_dir():
        gt = gt / "gts"
    report = evaluate_dataset(v["pred"], gt, dataset=args.name)
    print(report.table())
    if v.get("out"):
        Path(v["out"]).write_text(report.to_tsv())
    return 0


def cmd_gradcheck(args) -> int:
    ok, text = gradcheck.main_suite(seed=args.seed or 0)
    print(text)
    return 0 if ok else RUNTIME_ERROR


def cmd_bench(args) -> int:
    v = _config_values(args, ("checkpoint", "image_size", "repeats"))
    if "checkpoint" in v:
        ps, cfg = load_inference_model(v["checkpoint"])
    else:
        from mccl.model import ModelConfig, build_params
        cfg = ModelConfig()
        ps = build_params(cfg, seed=args.seed or 0)
    rates = bench(ps, cfg, int(v.get("image_size", 64)), repeats=int(v.get("repeats", 3)), seed=args.seed or 0)
    print(f"{'batch':>5} {'images/s':>10}")
    for bs, r in rates.items():
        print(f"{bs:>5} {r:10.1f}")
    return 0


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="key=value settings file; flags override it")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="mccl", description="Co-salient object detection on a numpy autodiff core.")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    s.add_argument("--groups", type=int)
    s.add_argument("--per-group", dest="per_group", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset root with images/ and gts/")
    t.add_argument("--out", default="run")
    for name, typ in TRAIN_FLAGS.items():
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="write predicted maps")
    i.add_argument("--checkpoint")
    i.add_argument("--data")
    i.add_argument("--out")
    i.add_argument("--image-size", dest="image_size", type=int)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="score maps against ground truth")
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--out", help="optional TSV path for per-group results")
    e.add_argument("--name", default=None, help="dataset label in the printed row")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="run the gradient-check suite")
    g.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="inference throughput")
    b.add_argument("--checkpoint")
    b.add_argument("--image-size", dest="image_size", type=int)
    b.add_argument("--repeats", type=int)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
        return args.fn(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:
        # --help exits 0 from argparse
        return int(exc.code or 0)
    except Exception as exc:
        print(f"mccl: error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
