"""Command-line entry point: data generation, training, probing, reporting.

Configuration is a flat ``key=value`` namespace covering the model and
training fields (they share no names); a ``--config`` file sets keys,
repeatable ``--set key=value`` flags override it, and dedicated flags
(--variant, --seed, ...) override both.  Every command with an output
directory writes the effective configuration to ``config.echo``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from .data import generate_dataset, load_manifest
from .errors import NumericError, UsageError, ConfigError
from .evaluate import (ProbeReport, STRATEGIES, probe_reconstruction,
                       eval_classification, report_table, write_items_jsonl)
from .model import DualBranchMAE, ModelConfig, count_params
from .training import (Checkpoint, TrainConfig, load_checkpoint,
                       restore_model, run_finetune, run_pretrain,
                       save_checkpoint)

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}

_INT_KEYS = {"n_layers", "embed_dim", "heads", "lem_k", "decoder_depth",
             "patches", "group_size", "num_classes", "epochs", "batch_size",
             "warmup_epochs", "seed"}
_FLOAT_KEYS = {"lem_scale", "mask_ratio", "base_lr", "weight_decay"}
_BOOL_KEYS = {"lem_first"}
_OPT_INT_KEYS = {"max_steps"}
_STR_KEYS = {"variant", "finetune_mode", "augmentation"}


def _coerce(key: str, text: str):
    text = text.strip()
    try:
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
        if key in _BOOL_KEYS:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if key in _OPT_INT_KEYS:
            return None if text.lower() == "none" else int(text)
        if key in _STR_KEYS:
            return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    raise ConfigError(f"unknown configuration key {key!r}")


def _parse_config_file(path) -> dict:
    out = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, value = text.partition("=")
            key = key.strip()
            out[key] = _coerce(key, value)
    return out


def _parse_set_flags(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def _build_configs(args) -> tuple:
    """Assemble (ModelConfig, TrainConfig) from preset, file, and flags."""
    preset = getattr(args, "preset", "toy")
    model_kv = asdict(ModelConfig.toy() if preset == "toy" else ModelConfig.full())
    train_kv = asdict(TrainConfig())
    updates = {}
    if getattr(args, "config", None):
        updates.update(_parse_config_file(args.config))
    updates.update(_parse_set_flags(getattr(args, "set", None)))
    if getattr(args, "variant", None):
        updates["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "mode", None):
        updates["finetune_mode"] = args.mode
    for key, value in updates.items():
        if key in _MODEL_KEYS:
            model_kv[key] = value
        elif key in _TRAIN_KEYS:
            train_kv[key] = value
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    mc = ModelConfig(**model_kv)
    tc = TrainConfig(**train_kv)
    mc.validate()
    tc.validate()
    return mc, tc


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_echo(out_dir, command: str, pairs: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8") as fh:
        fh.write(f"command={command}\n")
        for key in sorted(pairs):
            fh.write(f"{key}={_format_value(pairs[key])}\n")


def _echo_pairs(mc: ModelConfig, tc: TrainConfig, **extra) -> dict:
    pairs = {}
    pairs.update(asdict(mc))
    pairs.update(asdict(tc))
    pairs.update(extra)
    return pairs


def _load_train_clouds(manifest_path, split: str = "train"):
    manifest = load_manifest(manifest_path)
    clouds = manifest.load_split(split)
    if not clouds:
        raise UsageError(f"manifest has no {split!r} items: {manifest_path}")
    return manifest, clouds


# -- subcommands -------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    manifest = generate_dataset(
        args.out, num_classes=args.classes, per_class=args.per_class,
        points=args.points, noise=args.noise, seed=args.seed)
    _write_echo(args.out, "gen-data", {
        "classes": args.classes, "per_class": args.per_class,
        "points": args.points, "noise": args.noise, "seed": args.seed,
        "out": os.path.abspath(args.out)})
    train = len(manifest.split("train"))
    test = len(manifest.split("test"))
    print(f"wrote {len(manifest.entries)} clouds "
          f"({args.classes} classes, {train} train / {test} test) to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    mc, tc = _build_configs(args)
    _, clouds = _load_train_clouds(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = run_pretrain(clouds, mc, tc, resume_from=resume)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "model.ckpt"), result.model,
                    optimizer=result.optimizer, train_config=tc)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,loss_g,loss_l,lr\n")
        for step, loss_g, loss_l, lr in result.metrics:
            fh.write(f"{step},{loss_g!r},{loss_l!r},{lr!r}\n")
    _write_echo(args.out, "pretrain", _echo_pairs(
        mc, tc, data=os.path.abspath(args.data), out=os.path.abspath(args.out)))
    first = result.metrics[0] if result.metrics else None
    last = result.metrics[-1] if result.metrics else None
    if first and last:
        total0 = np.nansum([first[1], first[2]])
        total1 = np.nansum([last[1], last[2]])
        print(f"pretrained variant {mc.variant}: {len(result.metrics)} steps, "
              f"loss {total0:.4f} -> {total1:.4f}")
    return 0


def _cmd_finetune(args) -> int:
    mc, tc = _build_configs(args)
    manifest, clouds = _load_train_clouds(args.data)
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    result = run_finetune(ckpt, clouds, tc,
                          model_config=None if ckpt else mc)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "model.ckpt"), result.model,
                    optimizer=result.optimizer, train_config=tc)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,loss,acc\n")
        for step, loss, acc in result.metrics:
            fh.write(f"{step},{loss!r},{acc!r}\n")
    _write_echo(args.out, "finetune", _echo_pairs(
        result.model.config, tc, data=os.path.abspath(args.data),
        out=os.path.abspath(args.out),
        checkpoint=os.path.abspath(args.checkpoint) if args.checkpoint else "none"))
    train_acc = eval_classification(result.model, manifest, "train")
    test_items = manifest.split("test")
    line = f"fine-tuned ({tc.finetune_mode}): train_acc={train_acc:.3f}"
    if test_items:
        line += f" test_acc={eval_classification(result.model, manifest, 'test'):.3f}"
    print(line)
    return 0


def _cmd_probe(args) -> int:
    manifest = load_manifest(args.data)
    clouds = manifest.load_split(args.split)
    if not clouds:
        raise UsageError(f"manifest has no {args.split!r} items")
    strategies = [s.strip().lower() for s in args.strategies.split(",") if s.strip()]
    if not strategies:
        raise UsageError("need at least one probe strategy")
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}, have {STRATEGIES}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("need at least one probe seed")
    reports = []
    items = []
    for path in args.checkpoint:
        ckpt = load_checkpoint(path)
        model = DualBranchMAE(ckpt.config, seed=0)
        restore_model(model, ckpt)
        row = ProbeReport(
            model_id=os.path.splitext(os.path.basename(path))[0],
            seeds=tuple(seeds))
        for strategy in strategies:
            per_seed = []
            for seed in seeds:
                rng = np.random.default_rng([seed, 23])
                log: list = []
                per_seed.append(probe_reconstruction(
                    model, clouds, strategy, rng, item_log=log))
                for entry in log:
                    entry.update({"model": row.model_id, "seed": seed})
                items.extend(log)
            mean = float(np.mean(per_seed))
            if strategy == "gmpc":
                row.gmpc_cd = mean
            else:
                row.lmpc_cd = mean
        reports.append(row)
    csv_text, aligned = report_table(reports)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    write_items_jsonl(os.path.join(args.out, "items.jsonl"), items)
    _write_echo(args.out, "probe", {
        "checkpoints": ";".join(os.path.abspath(p) for p in args.checkpoint),
        "data": os.path.abspath(args.data), "split": args.split,
        "strategies": ",".join(strategies),
        "seeds": ",".join(str(s) for s in seeds),
        "out": os.path.abspath(args.out)})
    print(aligned, end="")
    return 0


def _cmd_params(args) -> int:
    mc, _ = _build_configs(args)
    model = DualBranchMAE(mc, seed=0)
    count = count_params(model, args.count_mode)
    print(f"variant {mc.variant} {args.count_mode}: {count} parameters "
          f"({count / 1e6:.2f}M)")
    return 0


# -- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Argparse variant that reports bad usage via UsageError (exit code 1)."""

    def error(self, message):
        raise UsageError(message)


def _add_config_flags(sub, with_mode: bool = False):
    sub.add_argument("--config", help="flat key=value configuration file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one configuration key (repeatable)")
    sub.add_argument("--preset", choices=("toy", "full"), default="toy",
                     help="base configuration preset (default: toy)")
    sub.add_argument("--variant", choices=tuple("ABCDEFGH"),
                     help="architecture variant")
    sub.add_argument("--seed", type=int, help="training seed")
    if with_mode:
        sub.add_argument("--mode", choices=("full", "lem_and_head"),
                         help="fine-tuning mode")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcmae",
                     description="Dual-branch masked point-cloud autoencoder")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen-data", parents=[], help="write a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--classes", type=int, default=6)
    gen.add_argument("--per-class", type=int, default=20, dest="per_class")
    gen.add_argument("--points", type=int, default=1024)
    gen.add_argument("--noise", type=float, default=0.01)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=_cmd_gen_data)

    pre = subs.add_parser("pretrain", help="mask-reconstruction pre-training")
    pre.add_argument("--data", required=True, help="manifest file")
    pre.add_argument("--out", required=True)
    pre.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(pre)
    pre.set_defaults(func=_cmd_pretrain)

    fin = subs.add_parser("finetune", help="classification fine-tuning")
    fin.add_argument("--checkpoint", help="pre-trained checkpoint (omit for "
                                          "random initialization)")
    fin.add_argument("--data", required=True, help="manifest file")
    fin.add_argument("--out", required=True)
    _add_config_flags(fin, with_mode=True)
    fin.set_defaults(func=_cmd_finetune)

    prb = subs.add_parser("probe", help="masked-reconstruction probes")
    prb.add_argument("--checkpoint", action="append", required=True,
                     help="checkpoint to probe (repeatable)")
    prb.add_argument("--data", required=True, help="manifest file")
    prb.add_argument("--split", choices=("train", "test"), default="test")
    prb.add_argument("--strategies", default="gmpc,lmpc")
    prb.add_argument("--seeds", default="0")
    prb.add_argument("--out", required=True)
    prb.set_defaults(func=_cmd_probe)

    par = subs.add_parser("params", help="report trainable parameter counts")
    par.add_argument("--mode", dest="count_mode",
                     choices=("pretrain", "finetune"), default="finetune")
    _add_config_flags(par)
    par.set_defaults(func=_cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- boundary: report, exit nonzero
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
