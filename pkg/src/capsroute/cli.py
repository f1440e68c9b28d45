"""Command-line entry point.

Commands: ``train``, ``eval``, ``gradcheck``, ``gen-multimnist``.  Runtime
configuration is a flat key=value namespace (dotted keys for the routing and
margin sections) resolved in order: built-in defaults, per-dataset defaults,
``--config`` file, then ``--key=value`` flags.  Every run logs the fully
resolved configuration and ``train`` writes it back out as a snapshot that
reproduces the run when re-fed.

Exit codes: 0 success, 1 usage/config, 2 data/format, 3 divergence/numeric.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as data_mod
from . import trainer as trainer_mod
from .errors import ConfigError, DataError, DivergenceError, FormatError
from .gradcheck import run_suite
from .losses import MarginConfig
from .routing import RoutingConfig
from .trainer import TrainConfig

ENV_DATA_DIR = "CAPSROUTE_DATA_DIR"

def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    table = {"on": True, "off": False, "true": True, "false": False,
             "1": True, "0": False, "yes": True, "no": False}
    if v not in table:
        raise ConfigError(f"expected a boolean (on/off/true/false), got {s!r}")
    return table[v]


# key -> (section, attribute, parser)
CONFIG_KEYS = {
    "dataset": ("train", "dataset", str),
    "batch_size": ("train", "batch_size", int),
    "n_b": ("train", "n_b", int),
    "lr": ("train", "lr", float),
    "lr_decay": ("train", "lr_decay", float),
    "lr_interval": ("train", "lr_interval", int),
    "max_iters": ("train", "max_iters", int),
    "eval_interval": ("train", "eval_interval", int),
    "seed": ("train", "seed", int),
    "recon": ("train", "recon", _parse_bool),
    "recon_weight": ("train", "recon_weight", float),
    "optimizer": ("train", "optimizer", str),
    "dtype": ("train", "dtype", str),
    "deterministic": ("train", "deterministic", _parse_bool),
    "train_limit": ("train", "train_limit", int),
    "test_limit": ("train", "test_limit", int),
    "guard_factor": ("train", "guard_factor", float),
    "checkpoint_interval": ("train", "checkpoint_interval", int),
    "conv1_filters": ("train", "conv1_filters", int),
    "primary_types": ("train", "primary_types", int),
    "primary_dim": ("train", "primary_dim", int),
    "digit_dim": ("train", "digit_dim", int),
    "routing.mode": ("routing", "mode", str),
    "routing.lambda": ("routing", "lam", float),
    "routing.gamma": ("routing", "gamma", float),
    "routing.n_r": ("routing", "n_r", int),
    "routing.dynamic_iters": ("routing", "dynamic_iters", int),
    "margin.m_plus": ("margin", "m_plus", float),
    "margin.m_minus": ("margin", "m_minus", float),
    "margin.lambda_prime": ("margin", "lambda_prime", float),
}

DATASET_DEFAULTS = {
    "mnist": {"batch_size": "32", "lr_decay": "0.5", "lr_interval": "1000"},
    "fashion": {"batch_size": "128", "lr": "0.001", "lr_decay": "0.96", "lr_interval": "1000"},
    "multimnist": {"batch_size": "128", "lr": "0.001", "lr_decay": "0.96",
                   "lr_interval": "20000", "routing.lambda": "0.001"},
    "cifar10": {"batch_size": "128", "lr_decay": "0.96", "lr_interval": "1000", "recon": "off"},
    "synthetic": {"batch_size": "32", "lr_decay": "0.96", "lr_interval": "1000"},
}


def read_config_file(path: str) -> dict[str, str]:
    """Parse a key=value config file; '#' starts a comment, blank lines skipped."""
    kv: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    return kv


def apply_overrides(cfg: TrainConfig, kv: dict[str, str]) -> TrainConfig:
    """Apply key=value overrides onto a TrainConfig; unknown keys are rejected."""
    train_kw, routing_kw, margin_kw = {}, {}, {}
    for key, raw in kv.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r} (valid: {', '.join(sorted(CONFIG_KEYS))})")
        section, attr, parse = CONFIG_KEYS[key]
        try:
            value = parse(raw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e
        {"train": train_kw, "routing": routing_kw, "margin": margin_kw}[section][attr] = value
    if routing_kw:
        cfg = replace(cfg, routing=replace(cfg.routing, **routing_kw))
    if margin_kw:
        cfg = replace(cfg, margin=replace(cfg.margin, **margin_kw))
    if train_kw:
        cfg = replace(cfg, **train_kw)
    return cfg


def resolve_config(file_path: str | None, flag_kv: dict[str, str]) -> TrainConfig:
    file_kv = read_config_file(file_path) if file_path else {}
    merged = dict(file_kv)
    merged.update(flag_kv)
    dataset = merged.get("dataset", TrainConfig().dataset)
    cfg = TrainConfig(dataset=dataset)
    cfg = apply_overrides(cfg, DATASET_DEFAULTS.get(dataset, {}))
    cfg = apply_overrides(cfg, file_kv)
    cfg = apply_overrides(cfg, flag_kv)
    return cfg


def resolved_config_lines(cfg: TrainConfig) -> list[str]:
    """Canonical key=value dump covering every config key."""
    values = {
        "dataset": cfg.dataset,
        "batch_size": cfg.batch_size,
        "n_b": cfg.n_b,
        "lr": repr(cfg.lr),
        "lr_decay": repr(cfg.lr_decay),
        "lr_interval": cfg.lr_interval,
        "max_iters": cfg.max_iters,
        "eval_interval": cfg.eval_interval,
        "seed": cfg.seed,
        "recon": "on" if cfg.recon else "off",
        "recon_weight": repr(cfg.recon_weight),
        "optimizer": cfg.optimizer,
        "dtype": cfg.dtype,
        "deterministic": "on" if cfg.deterministic else "off",
        "train_limit": cfg.train_limit,
        "test_limit": cfg.test_limit,
        "guard_factor": repr(cfg.guard_factor),
        "checkpoint_interval": cfg.checkpoint_interval,
        "routing.mode": cfg.routing.mode,
        "routing.lambda": repr(cfg.routing.lam),
        "routing.gamma": repr(cfg.routing.gamma),
        "routing.n_r": cfg.routing.n_r,
        "routing.dynamic_iters": cfg.routing.dynamic_iters,
        "margin.m_plus": repr(cfg.margin.m_plus),
        "margin.m_minus": repr(cfg.margin.m_minus),
        "margin.lambda_prime": repr(cfg.margin.lambda_prime),
    }
    for key, attr in (("conv1_filters", cfg.conv1_filters), ("primary_types", cfg.primary_types),
                      ("primary_dim", cfg.primary_dim), ("digit_dim", cfg.digit_dim)):
        if attr is not None:
            values[key] = attr
    return [f"{k}={v}" for k, v in values.items()]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _split_flag_overrides(extras: list[str]) -> dict[str, str]:
    kv = {}
    for tok in extras:
        if not tok.startswith("--") or "=" not in tok:
            raise _UsageError(f"unrecognized argument {tok!r} (overrides look like --key=value)")
        key, _, value = tok[2:].partition("=")
        kv[key] = value
    return kv


def build_parser() -> _Parser:
    parser = _Parser(prog="capsroute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write metrics/checkpoint")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--data-dir", default=os.environ.get(ENV_DATA_DIR))
    p_train.add_argument("--out-dir", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data-dir", default=os.environ.get(ENV_DATA_DIR))
    p_eval.add_argument("--split", default="test", choices=("train", "test"))
    p_eval.add_argument("--limit", type=int, default=0)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--f64", action="store_true", help="check in float64 (threshold 1e-6)")

    p_gen = sub.add_parser("gen-multimnist", help="synthesize an overlapped-digit dataset")
    p_gen.add_argument("--data-dir", default=os.environ.get(ENV_DATA_DIR))
    p_gen.add_argument("--count", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--split", default="train", choices=("train", "test"))
    return parser


def cmd_train(args, flag_kv: dict[str, str]) -> int:
    cfg = resolve_config(args.config, flag_kv)
    cfg = replace(cfg, data_dir=args.data_dir)
    os.makedirs(args.out_dir, exist_ok=True)
    lines = resolved_config_lines(cfg)
    for line in lines:
        print(f"config {line}")
    with open(os.path.join(args.out_dir, "resolved-config.cfg"), "w") as f:
        f.write("\n".join(lines) + "\n")

    def log(row):
        print(f"iter {row.iteration} loss {row.loss:.6f} eval_error_pct {row.eval_error_pct:.3f}")

    trainer_mod.train(cfg, out_dir=args.out_dir, log=log)
    print(f"wrote {os.path.join(args.out_dir, 'metrics.csv')}")
    return 0


def cmd_eval(args) -> int:
    params, coeffs, arch, meta = trainer_mod.load_model(args.checkpoint)
    cfg = trainer_mod.config_for_eval(meta)
    split = data_mod.load_dataset(cfg.dataset, args.data_dir, args.split,
                                  limit=args.limit, seed=0)
    if split.images.shape[1:] != (arch.in_channels, arch.image_h, arch.image_w):
        raise FormatError(
            f"checkpoint expects images of shape "
            f"({arch.in_channels},{arch.image_h},{arch.image_w}), split has {split.images.shape[1:]}"
        )
    err = trainer_mod.evaluate(params, coeffs, split, cfg, arch)
    print(f"eval_error_pct={err}")
    return 0


def cmd_gradcheck(args) -> int:
    threshold = 1e-6 if args.f64 else 1e-4
    errors = run_suite(args.seed, use_f64=args.f64)
    worst_name, worst = max(errors.items(), key=lambda kv: kv[1])
    ok = True
    for name, err in errors.items():
        status = "ok" if err < threshold else "FAIL"
        ok = ok and err < threshold
        print(f"component={name} max_rel_err={err:.3e} status={status}")
    if not ok:
        print(f"gradcheck failed: {worst_name} at {worst:.3e} >= {threshold:.0e}")
        return 3
    print(f"gradcheck passed: worst {worst_name} at {worst:.3e} < {threshold:.0e}")
    return 0


def cmd_gen_multimnist(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    base = data_mod.load_idx_split(args.data_dir, args.split, source="mnist")
    split = data_mod.make_multimnist(base, args.count, args.seed)
    os.makedirs(args.out, exist_ok=True)
    img_path = os.path.join(args.out, f"{args.split}-multimnist-images-idx3-ubyte")
    lab_path = os.path.join(args.out, f"{args.split}-multimnist-labels.csv")
    data_mod.write_multimnist(split, img_path, lab_path)
    print(f"wrote {img_path} and {lab_path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        flag_kv = _split_flag_overrides(extras)
        if args.command != "train" and flag_kv:
            raise _UsageError(f"unexpected arguments: {' '.join(extras)}")
        if args.command == "train":
            return cmd_train(args, flag_kv)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "gen-multimnist":
            return cmd_gen_multimnist(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except (_UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (FormatError, DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
