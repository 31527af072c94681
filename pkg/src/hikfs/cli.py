"""Command-line front end: generate, split, train, evaluate, export.

Every training or evaluation run writes its parsed configuration, seed,
and a machine-readable result record into the run directory, and can be
reproduced byte-for-byte by re-running from that echoed config.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric runtime error (non-finite loss, overflow).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from contextlib import contextmanager

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .data import (
    gen_synthetic,
    load_dataset,
    mcfs_split,
    save_dataset,
    save_split_manifest,
)
from .memory import MemoryBank
from .model import EncoderConfig
from .seeding import derive_rng
from .training import (
    TrainConfig,
    build_params,
    encode_dataset,
    evaluate_episodes,
    evaluate_supervised,
    finetune_supervised,
    pretrain_supervised,
    train_meta,
)


class CliError(Exception):
    exit_code = 2


class ConfigError(CliError):
    exit_code = 2


class DataError(CliError):
    exit_code = 3


class NumericError(CliError):
    exit_code = 4


@contextmanager
def _data_phase():
    try:
        yield
    except (OSError, ValueError, RuntimeError) as e:
        raise DataError(str(e)) from e


# guard messages raised by the math layer when values degenerate
_NUMERIC_MARKERS = ("finite", "strictly positive", "zero vector")


@contextmanager
def _numeric_phase():
    """Training / evaluation phase; arithmetic failures map to exit 4."""
    try:
        yield
    except (FloatingPointError, OverflowError, ZeroDivisionError) as e:
        raise NumericError(str(e)) from e
    except (ValueError, RuntimeError) as e:
        if any(marker in str(e) for marker in _NUMERIC_MARKERS):
            raise NumericError(str(e)) from e
        raise DataError(str(e)) from e


# one flat key=value namespace shared by config files, flags, and echoes
_SCHEMA = (
    ("data", "str", ""),
    ("setting", "str", "supervised"),
    ("seed", "int", 0),
    ("epochs", "int", 5),
    ("finetune_epochs", "int", 2),
    ("iterations", "int", 1000),
    ("batch_size", "int", 32),
    ("lr", "float", 0.01),
    ("momentum", "float", 0.9),
    ("weight_decay", "float", 0.0),
    ("optimizer", "str", ""),
    ("schedule", "str", ""),
    ("slots_per_class", "int", 12),
    ("refresh_clusters", "int", 3),
    ("merge_rate", "float", 0.95),
    ("utility_up", "float", 1.05),
    ("utility_down", "float", 0.95),
    ("top_k", "int", 1),
    ("metric", "str", ""),
    ("memory_mode", "str", "mem3"),
    ("way", "int", 5),
    ("shot", "int", 5),
    ("queries", "int", 5),
    ("eval_episodes", "int", 600),
    ("use_hierarchy", "bool", True),
    ("use_attention", "bool", True),
    ("use_mlp", "bool", True),
    ("use_knn", "bool", True),
    ("encoder", "str", "auto"),
    ("encoder_hidden", "str", "32"),
    ("encoder_out", "int", 16),
    ("encoder_channels", "str", "8,8,8,8"),
    ("verbose", "bool", False),
)
_KINDS = {k: kind for k, kind, _ in _SCHEMA}

_ABLATIONS = {
    "hierarchy": "use_hierarchy",
    "attention": "use_attention",
    "mlp": "use_mlp",
    "knn": "use_knn",
    "memory": "memory_mode",
}


def _coerce(key: str, value: str, where: str):
    kind = _KINDS[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if value in ("on", "true", "1"):
                return True
            if value in ("off", "false", "0"):
                return False
            raise ValueError(f"expected on/off, got {value!r}")
        return value
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {e}") from e


def parse_config_file(path: str) -> dict:
    """Flat key=value lines; '#' lines are comments; unknown keys fail."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from e
    out = {}
    for i, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{i}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KINDS:
            raise ConfigError(f"{path}:{i}: unknown config key {key!r}")
        out[key] = _coerce(key, value, f"{path}:{i}")
    return out


def _apply_ablations(cfg: dict, pairs) -> None:
    for chunk in pairs or ():
        for item in chunk.split(","):
            item = item.strip()
            if not item:
                continue
            if "=" not in item:
                raise ConfigError(f"--ablate takes key=value, got {item!r}")
            key, value = (p.strip() for p in item.split("=", 1))
            if key not in _ABLATIONS:
                raise ConfigError(
                    f"unknown ablation {key!r}; choose from "
                    f"{sorted(_ABLATIONS)}")
            target = _ABLATIONS[key]
            cfg[target] = _coerce(target, value, "--ablate")


def assemble_config(args) -> dict:
    """defaults < config file < flags < --ablate, all in one namespace."""
    cfg = {key: default for key, _, default in _SCHEMA}
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for key, _, _ in _SCHEMA:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = _coerce(key, flag, f"--{key.replace('_', '-')}")
    _apply_ablations(cfg, getattr(args, "ablate", None))
    return cfg


def _encoder_from_config(cfg: dict, ds) -> EncoderConfig | None:
    kind = cfg["encoder"]
    if kind == "auto":
        return None
    try:
        if kind == "mlp":
            if ds.is_image:
                raise ValueError("mlp encoder needs flat feature data")
            hidden = tuple(int(s) for s in cfg["encoder_hidden"].split(",")
                           if s.strip())
            return EncoderConfig.mlp(ds.feature_dim, hidden,
                                     cfg["encoder_out"])
        if kind == "conv4":
            if not ds.is_image:
                raise ValueError("conv4 encoder needs raster data")
            h, w = ds.image_shape
            if h != w:
                raise ValueError("conv4 encoder needs square rasters")
            channels = tuple(int(s) for s in cfg["encoder_channels"].split(","))
            return EncoderConfig.conv4(image_size=h, channels=channels)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    raise ConfigError(f"unknown encoder {kind!r} (auto, mlp, or conv4)")


def _train_config(cfg: dict, encoder) -> TrainConfig:
    try:
        return TrainConfig(
            setting=cfg["setting"], epochs=cfg["epochs"],
            finetune_epochs=cfg["finetune_epochs"],
            iterations=cfg["iterations"], batch_size=cfg["batch_size"],
            lr=cfg["lr"], momentum=cfg["momentum"],
            weight_decay=cfg["weight_decay"],
            optimizer=cfg["optimizer"] or None,
            schedule=cfg["schedule"] or None,
            slots_per_class=cfg["slots_per_class"],
            refresh_clusters=cfg["refresh_clusters"],
            merge_rate=cfg["merge_rate"], utility_up=cfg["utility_up"],
            utility_down=cfg["utility_down"], top_k=cfg["top_k"],
            metric=cfg["metric"] or None, memory_mode=cfg["memory_mode"],
            way=cfg["way"], shot=cfg["shot"], queries=cfg["queries"],
            eval_episodes=cfg["eval_episodes"], encoder=encoder,
            use_hierarchy=cfg["use_hierarchy"],
            use_attention=cfg["use_attention"], use_mlp=cfg["use_mlp"],
            use_knn=cfg["use_knn"], seed=cfg["seed"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _format_value(cfg: dict, key: str) -> str:
    value = cfg[key]
    if _KINDS[key] == "bool":
        return "on" if value else "off"
    if _KINDS[key] == "float":
        return repr(float(value))
    return str(value)


def write_config_echo(path: str, cfg: dict, comments) -> None:
    lines = [f"# {c}" for c in comments]
    lines += [f"{key}={_format_value(cfg, key)}" for key, _, _ in _SCHEMA]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _result_line(record: dict) -> str:
    return json.dumps(record)


def _write_result(path: str, record: dict) -> None:
    with open(path, "w") as f:
        f.write(_result_line(record) + "\n")


def _human_table(rows) -> str:
    """rows: list of (label, value) pairs rendered as two aligned columns."""
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label.ljust(width)}  {value}" for label, value in rows)


def cmd_gen(args) -> int:
    with _data_phase():
        ds = gen_synthetic(args.coarse, args.fine_per_coarse, args.dim,
                           args.per_class, coarse_sep=args.coarse_sep,
                           fine_sep=args.fine_sep, noise=args.noise,
                           seed=args.seed, count_jitter=args.count_jitter)
        save_dataset(ds, args.output)
    print(f"wrote {len(ds)} items "
          f"({ds.hierarchy.num_coarse} coarse / {ds.hierarchy.num_fine} fine) "
          f"to {args.output}")
    return 0


def cmd_split(args) -> int:
    try:
        fractions = tuple(float(s) for s in args.fractions.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --fractions: {e}") from e
    with _data_phase():
        ds = load_dataset(args.data)
        result = mcfs_split(ds, args.mode, fractions=fractions,
                            seed=args.seed)
        prefix = args.output or os.path.splitext(args.data)[0]
        written = []
        for tag, part in (("train", result.train), ("val", result.val),
                          ("test", result.test)):
            if len(part):
                path = f"{prefix}.{tag}.txt"
                save_dataset(part, path)
                written.append(f"{path} ({len(part)} items)")
        if result.class_splits is not None:
            manifest = f"{prefix}.splits.txt"
            save_split_manifest(manifest, result.class_splits, args.seed)
            written.append(manifest)
    print("\n".join(f"wrote {w}" for w in written))
    return 0


def _last_metrics(log_lines) -> dict:
    if not log_lines:
        return {"final_loss": None, "final_acc": None, "steps": 0}
    fields = dict(part.split("=", 1) for part in log_lines[-1].split())
    return {"final_loss": float(fields["loss"]),
            "final_acc": float(fields["acc"]),
            "steps": len(log_lines)}


def cmd_train(args) -> int:
    cfg = assemble_config(args)
    if not cfg["data"]:
        raise ConfigError("no dataset: pass --data or a config with data=")
    with _data_phase():
        ds = load_dataset(cfg["data"])
    encoder = _encoder_from_config(cfg, ds)
    tcfg = _train_config(cfg, encoder)
    # pin the per-setting resolutions so the echo is self-contained
    cfg["optimizer"] = tcfg.optimizer
    cfg["schedule"] = tcfg.schedule
    cfg["metric"] = tcfg.metric

    os.makedirs(args.out, exist_ok=True)
    effective = ds.hierarchy.num_coarse if tcfg.use_hierarchy else 1
    write_config_echo(os.path.join(args.out, "config.txt"), cfg,
                      ["hikfs train config",
                       f"coarse_classes_effective={effective}"])

    lines = []
    log_path = os.path.join(args.out, "run.log")
    with open(log_path, "w") as log_file:
        def log(line: str) -> None:
            log_file.write(line + "\n")
            lines.append(line)
            if cfg["verbose"]:
                print(line)

        with _numeric_phase():
            if tcfg.setting == "supervised":
                params = pretrain_supervised(tcfg, ds, log=log)
                bank = None
                if tcfg.use_knn:
                    params, bank = finetune_supervised(tcfg, params, ds,
                                                       log=log)
            else:
                params = train_meta(tcfg, ds, log=log)
                bank = None

    save_arrays(os.path.join(args.out, "model.ckpt"), params.state_arrays())
    if bank is not None:
        save_arrays(os.path.join(args.out, "memory.ckpt"),
                    bank.state_arrays())
    record = _last_metrics(lines)
    record["seed"] = cfg["seed"]
    _write_result(os.path.join(args.out, "train-result.json"), record)
    print(_human_table([("setting", tcfg.setting),
                        ("steps", str(record["steps"])),
                        ("final loss", str(record["final_loss"])),
                        ("final acc", str(record["final_acc"])),
                        ("run dir", args.out)]))
    print(_result_line(record))
    return 0


def _load_run(run_dir: str):
    config_path = os.path.join(run_dir, "config.txt")
    if not os.path.exists(config_path):
        raise DataError(f"{run_dir} has no config.txt; not a run directory")
    cfg = {key: default for key, _, default in _SCHEMA}
    cfg.update(parse_config_file(config_path))
    return cfg


def cmd_eval(args) -> int:
    cfg = _load_run(args.run)
    data_path = args.data or cfg["data"]
    with _data_phase():
        ds = load_dataset(data_path)
    encoder = _encoder_from_config(cfg, ds)
    tcfg = _train_config(cfg, encoder)
    overrides = {}
    if args.way is not None:
        overrides["way"] = args.way
    if args.shot is not None:
        overrides["shot"] = args.shot
    if args.queries is not None:
        overrides["queries"] = args.queries
    if overrides:
        try:
            tcfg = dataclasses.replace(tcfg, **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    episodes = args.episodes if args.episodes is not None else tcfg.eval_episodes
    seed = args.seed if args.seed is not None else tcfg.seed

    with _data_phase():
        params = build_params(tcfg, ds)
        params.load_state(load_arrays(os.path.join(args.run, "model.ckpt")))

    out_dir = args.out or args.run
    os.makedirs(out_dir, exist_ok=True)
    if tcfg.setting == "meta":
        with _numeric_phase():
            result = evaluate_episodes(params, ds, tcfg, n_episodes=episodes,
                                       seed=seed, workers=args.workers)
        record = {"mean_acc": result.mean_acc, "ci95": result.ci95,
                  "episodes": episodes, "way": tcfg.way, "shot": tcfg.shot,
                  "seed": seed}
        table = [("episodes", str(episodes)),
                 ("way", str(tcfg.way)), ("shot", str(tcfg.shot)),
                 ("mean accuracy", f"{result.mean_acc:.4f}"),
                 ("95% interval", f"±{result.ci95:.4f}")]
    else:
        memory_path = os.path.join(args.run, "memory.ckpt")
        bank = None
        if os.path.exists(memory_path):
            with _data_phase():
                bank = MemoryBank.from_state_arrays(load_arrays(memory_path))
        with _numeric_phase():
            fine_acc, coarse_acc = evaluate_supervised(params, bank, ds, tcfg)
        record = {"fine_acc": fine_acc, "coarse_acc": coarse_acc,
                  "items": len(ds), "seed": seed}
        table = [("items", str(len(ds))),
                 ("fine accuracy", f"{fine_acc:.4f}"),
                 ("coarse accuracy", f"{coarse_acc:.4f}")]

    echo = [f"run={args.run}", f"data={data_path}", f"episodes={episodes}",
            f"way={tcfg.way}", f"shot={tcfg.shot}", f"queries={tcfg.queries}",
            f"seed={seed}", f"workers={args.workers}"]
    with open(os.path.join(out_dir, "eval-config.txt"), "w") as f:
        f.write("# hikfs eval config\n" + "\n".join(echo) + "\n")
    _write_result(os.path.join(out_dir, "result.json"), record)
    print(_human_table(table))
    print(_result_line(record))
    return 0


def cmd_export_memory(args) -> int:
    cfg = _load_run(args.run)
    memory_path = os.path.join(args.run, "memory.ckpt")
    if not os.path.exists(memory_path):
        raise DataError(f"{args.run} has no memory snapshot "
                        "(meta or MLP-only run?)")
    with _data_phase():
        bank = MemoryBank.from_state_arrays(load_arrays(memory_path))
    dim = bank.M.shape[2]
    header = ["class", "kind", "utility"] + [f"x{i}" for i in range(dim)]
    rows = []
    for j in range(bank.num_classes):
        for s in range(int(bank.occupancy[j])):
            rows.append([str(j), "mem", repr(float(bank.U[j, s]))]
                        + [repr(float(v)) for v in bank.M[j, s]])
    if args.sample > 0:
        data_path = args.data or cfg["data"]
        with _data_phase():
            ds = load_dataset(data_path)
            tcfg = _train_config(cfg, _encoder_from_config(cfg, ds))
            params = build_params(tcfg, ds)
            params.load_state(
                load_arrays(os.path.join(args.run, "model.ckpt")))
        feats = encode_dataset(params, ds)
        rng = derive_rng(args.seed, "export")
        for j in range(ds.hierarchy.num_fine):
            idx = np.flatnonzero(ds.fine_labels == j)
            take = min(args.sample, len(idx))
            chosen = np.sort(rng.choice(idx, size=take, replace=False))
            for i in chosen:
                rows.append([str(j), "img", ""]
                            + [repr(float(v)) for v in feats[i]])
    with open(args.output, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.output}")
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    # every config key doubles as a flag; None means "not given"
    for key, kind, _ in _SCHEMA:
        if key == "data":
            continue
        flag = "--" + key.replace("_", "-")
        metavar = {"int": "N", "float": "F", "bool": "on|off",
                   "str": "S"}[kind]
        p.add_argument(flag, dest=key, metavar=metavar)
    p.add_argument("--ablate", action="append", metavar="K=V",
                   help="table-style switches: hierarchy/attention/mlp/knn"
                        "=on|off, memory=mem1|mem2|mem3")
    p.add_argument("--config", help="flat key=value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hikfs",
        description="coarse-to-fine hierarchical few-shot classification")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset file")
    g.add_argument("--coarse", type=int, required=True)
    g.add_argument("--fine-per-coarse", type=int, required=True)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--per-class", type=int, default=40)
    g.add_argument("--coarse-sep", type=float, default=10.0)
    g.add_argument("--fine-sep", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.2)
    g.add_argument("--count-jitter", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="split a dataset file")
    s.add_argument("data")
    s.add_argument("--mode", choices=("supervised", "meta"), required=True)
    s.add_argument("--fractions", default="0.6,0.2,0.2")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", help="output path prefix")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train a model into a run directory")
    t.add_argument("--data")
    t.add_argument("--out", required=True, help="run directory")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run")
    e.add_argument("--run", required=True, help="run directory from train")
    e.add_argument("--data", help="dataset file (default: the training data)")
    e.add_argument("--episodes", type=int)
    e.add_argument("--way", type=int)
    e.add_argument("--shot", type=int)
    e.add_argument("--queries", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", help="write results here instead of --run")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-memory",
                       help="dump memory slots and sampled embeddings as CSV")
    x.add_argument("--run", required=True)
    x.add_argument("-o", "--output", required=True)
    x.add_argument("--sample", type=int, default=10,
                   help="embeddings per class (0 for slots only)")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--data", help="dataset file (default: the training data)")
    x.set_defaults(func=cmd_export_memory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
