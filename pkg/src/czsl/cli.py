"""Command-line entry points: gen-data, train, eval, ablate, sweep, plot-weights.

Every run writes its outputs under one directory (``--out``, or a timestamped
directory under ``$CZSL_OUT_ROOT``/``./runs``) together with a ``run.json``
reproducibility header echoing the command, arguments, config, seed, and the
files produced. Exit codes: 0 success, 1 validation/configuration error,
2 runtime abort (non-finite loss and similar).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import generate_synthetic, load_manifest, load_split
from .errors import (
    CLIUsageError,
    ConfigurationError,
    DataValidationError,
    TrainingAborted,
)
from .evaluation import (
    report_for_table,
    score_table,
    write_weight_log,
)
from .training import (
    CHECKPOINT_SCHEMA,
    TrainConfig,
    load_checkpoint,
    parse_config_file,
    restore_model,
    train,
)

ENV_OUT_ROOT = "CZSL_OUT_ROOT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIUsageError(f"{self.prog}: {message}")


def _add_train_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--schedule", choices=("cosine", "constant"))
    p.add_argument("--agg-strategy", dest="strategy",
                   choices=("learned", "standard", "mean", "random", "random-simplex"))
    p.add_argument("--pooling", choices=("attention", "gap"))
    p.add_argument("--focus-loss", dest="focus_loss", choices=("on", "off"))
    p.add_argument("--detach-maps", dest="detach_maps", action="store_const", const=True,
                   help="compute attention maps without the second-order graph "
                        "(the consistency term is monitored, not optimized)")
    p.add_argument("--levels", help="active backbone stages, e.g. 1,2,3")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--target-channels", type=int, dest="target_channels")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--gcn-hidden", type=int, dest="gcn_hidden")
    p.add_argument("--gcn-layers", type=int, dest="gcn_layers")
    p.add_argument("--head-hidden", type=int, dest="head_hidden")
    p.add_argument("--pool-heads", type=int, dest="pool_heads")
    p.add_argument("--freeze-node-init", dest="freeze_node_init",
                   action="store_const", const=True)
    p.add_argument("--fuse", choices=("sum", "softmax"))
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--embedding-source", dest="embedding_source",
                   choices=("seeded", "file"))
    p.add_argument("--embedding-path", dest="embedding_path")
    p.add_argument("--val-grid", type=int, dest="val_grid",
                   help="validation sweep grid size; 0 for exact enumeration")


_CONFIG_FIELDS = (
    "alpha", "tau", "lr", "weight_decay", "epochs", "batch_size", "seed",
    "schedule", "strategy", "pooling", "focus_loss", "detach_maps", "levels",
    "image_size", "target_channels", "embed_dim", "gcn_hidden", "gcn_layers",
    "head_hidden", "pool_heads", "freeze_node_init", "fuse", "dtype",
    "embedding_source", "embedding_path", "val_grid",
)


def _train_config(args, **forced) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "focus_loss":
            value = value == "on"
        elif name == "levels":
            value = tuple(int(t) for t in str(value).replace(",", " ").split())
        values[name] = value
    values.update(forced)
    defaults = TrainConfig()
    kwargs = {f.name: values.get(f.name, getattr(defaults, f.name))
              for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**kwargs)


def _run_dir(args, command, seed):
    if getattr(args, "out", None):
        d = Path(args.out)
    else:
        root = Path(os.environ.get(ENV_OUT_ROOT, "runs"))
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        d = root / f"{command}-{stamp}-seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_run_manifest(run_dir, command, argv, config_echo, seed, outputs,
                        summary=None):
    payload = {
        "command": command,
        "argv": list(argv),
        "config": config_echo,
        "seed": seed,
        "schema": {"checkpoint": CHECKPOINT_SCHEMA, "run": 1},
        "package": __version__,
        "outputs": sorted(outputs),
    }
    if summary is not None:
        payload["summary"] = summary
    (run_dir / "run.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _manifest_path(data):
    path = Path(data)
    return path / "manifest.tsv" if path.is_dir() else path


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args, argv):
    run_dir = _run_dir(args, "gen-data", args.seed)
    manifest = generate_synthetic(
        run_dir,
        n_attrs=args.n_attrs,
        n_objs=args.n_objs,
        seen_fraction=args.seen_fraction,
        images_per_pair=args.images_per_pair,
        image_size=args.image_size,
        seed=args.seed,
    )
    config_echo = {
        "n_attrs": args.n_attrs, "n_objs": args.n_objs,
        "seen_fraction": args.seen_fraction,
        "images_per_pair": args.images_per_pair,
        "image_size": args.image_size, "seed": args.seed,
    }
    _write_run_manifest(
        run_dir, "gen-data", argv, config_echo, args.seed,
        outputs=["manifest.tsv"],
        summary={"records": len(manifest.records)},
    )
    print(f"wrote {len(manifest.records)} records under {run_dir}")
    return 0


def _cmd_train(args, argv):
    config = _train_config(args)
    run_dir = _run_dir(args, "train", config.seed)
    result = train(config, _manifest_path(args.data), run_dir)
    outputs = ["last.npz", "best.npz", "steps.jsonl", "epochs.jsonl"]
    summary = result.epochs[-1] if result.epochs else None
    _write_run_manifest(run_dir, "train", argv, config.to_dict(), config.seed,
                        outputs, summary=summary)
    if summary is not None:
        print(json.dumps(summary, sort_keys=True))
    return 0


def _evaluate_to_dir(run_dir, checkpoint_path, data, split, grid, fuse, branch,
                     batch_size=256):
    ckpt = load_checkpoint(checkpoint_path)
    model = restore_model(ckpt)
    config = ckpt.train_config()
    space, manifest = load_manifest(_manifest_path(data))
    for a, b in zip(
        (space.attributes, space.objects, space.compositions),
        (model.space.attributes, model.space.objects, model.space.compositions),
    ):
        if tuple(a) != tuple(b):
            raise DataValidationError(
                "dataset label space does not match the checkpoint's label space"
            )
    split_arrays = load_split(manifest, space, split)
    if len(split_arrays) == 0:
        raise DataValidationError(f"split '{split}' has no records")
    table, weights = score_table(
        model, split_arrays, space, batch_size=batch_size,
        fuse_mode=fuse or config.fuse, branch=branch,
    )
    extras = {"alpha": config.alpha, "tau": config.tau, "seed": config.seed,
              "split": split, "scores": branch}
    report, curve = report_for_table(table, space, grid=grid, extras=extras)
    report.write_json(run_dir / "report.json")
    outputs = ["report.json", "weights.csv"]
    if curve is not None:
        curve.write_csv(run_dir / "curve.csv")
        outputs.append("curve.csv")
    write_weight_log(run_dir / "weights.csv", weights, config.levels)
    return report, weights, outputs, config


def _cmd_eval(args, argv):
    run_dir = _run_dir(args, "eval", 0)
    report, _weights, outputs, config = _evaluate_to_dir(
        run_dir, args.checkpoint, args.data, args.split, args.grid, args.fuse,
        args.scores, batch_size=args.batch_size,
    )
    _write_run_manifest(run_dir, "eval", argv, config.to_dict(), config.seed,
                        outputs, summary=report.to_json_dict())
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    return 0


def _parse_level_sets(raw):
    sets = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        sets.append(tuple(int(t) for t in chunk.replace(",", " ").split()))
    if not sets:
        raise CLIUsageError("no level sets given")
    return sets


def _cmd_ablate(args, argv):
    base = _train_config(args)
    strategies = args.strategies.split(",") if args.strategies else [base.strategy]
    poolings = args.poolings.split(",") if args.poolings else [base.pooling]
    focus_opts = [f == "on" for f in args.focus.split(",")] if args.focus else [base.focus_loss]
    level_sets = _parse_level_sets(args.level_sets) if args.level_sets else [base.levels]

    run_dir = _run_dir(args, "ablate", base.seed)
    rows = []
    cell = 0
    for strategy in strategies:
        for pooling in poolings:
            for focus in focus_opts:
                for levels in level_sets:
                    config = _train_config(
                        args, strategy=strategy, pooling=pooling,
                        focus_loss=focus, levels=levels, seed=base.seed + cell,
                    )
                    cell_dir = run_dir / f"cell-{cell:03d}"
                    result = train(config, _manifest_path(args.data), cell_dir)
                    space, manifest = result.space, None
                    ckpt = load_checkpoint(result.best_checkpoint)
                    model = restore_model(ckpt)
                    _space, man = load_manifest(_manifest_path(args.data))
                    test = load_split(man, space, "test")
                    table, _w = score_table(model, test, space, fuse_mode=config.fuse)
                    report, _curve = report_for_table(table, space)
                    rows.append((strategy, pooling, focus, levels, report))
                    cell += 1
    lines = ["strategy,pooling,focus,levels,S,U,AUC,HM"]
    for strategy, pooling, focus, levels, report in rows:
        level_txt = "+".join(str(l) for l in levels)
        lines.append(
            f"{strategy},{pooling},{'on' if focus else 'off'},{level_txt},"
            f"{report.best_seen!r},{report.best_unseen!r},{report.auc!r},{report.best_hm!r}"
        )
    (run_dir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_run_manifest(run_dir, "ablate", argv, base.to_dict(), base.seed,
                        ["ablation.csv"], summary={"cells": cell})
    print(f"{cell} cells -> {run_dir / 'ablation.csv'}")
    return 0


def _cmd_sweep(args, argv):
    from .plotting import plot_hyperparameter_sweep

    if args.param not in ("alpha", "tau"):
        raise CLIUsageError(f"cannot sweep '{args.param}'")
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise CLIUsageError("no sweep values given")
    if args.param == "tau" and any(v <= 0 for v in values):
        raise ConfigurationError("tau values must be positive")

    base = _train_config(args)
    run_dir = _run_dir(args, "sweep", base.seed)
    aucs, hms, rows = [], [], []
    for i, value in enumerate(values):
        config = _train_config(args, **{args.param: value})
        cell_dir = run_dir / f"{args.param}-{value:g}"
        result = train(config, _manifest_path(args.data), cell_dir)
        ckpt = load_checkpoint(result.best_checkpoint)
        model = restore_model(ckpt)
        space, manifest = load_manifest(_manifest_path(args.data))
        test = load_split(manifest, space, "test")
        table, _w = score_table(model, test, space, fuse_mode=config.fuse)
        report, _curve = report_for_table(table, space)
        rows.append((value, report))
        aucs.append(report.auc)
        hms.append(report.best_hm)
    lines = ["param,value,S,U,AUC,HM"]
    for value, report in rows:
        lines.append(
            f"{args.param},{value!r},{report.best_seen!r},{report.best_unseen!r},"
            f"{report.auc!r},{report.best_hm!r}"
        )
    (run_dir / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    plot_hyperparameter_sweep(values, aucs, hms, args.param, run_dir / "sweep.png")
    _write_run_manifest(run_dir, "sweep", argv, base.to_dict(), base.seed,
                        ["sweep.csv", "sweep.png"])
    print(f"{len(values)} values -> {run_dir / 'sweep.csv'}")
    return 0


def _read_weight_log(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "sample,branch,level,weight":
        raise DataValidationError(f"{path} is not a weight log")
    from .aggregation import BRANCHES

    entries = {}
    levels = []
    for line in lines[1:]:
        sample, branch, level, weight = line.split(",")
        key = (int(sample), BRANCHES.index(branch))
        entries.setdefault(key, {})[int(level)] = float(weight)
        if int(level) not in levels:
            levels.append(int(level))
    if not entries:
        raise DataValidationError(f"weight log {path} is empty")
    n = max(k[0] for k in entries) + 1
    levels = sorted(levels)
    weights = np.zeros((n, len(BRANCHES), len(levels)))
    for (sample, b), per_level in entries.items():
        for c, level in enumerate(levels):
            weights[sample, b, c] = per_level[level]
    return weights, levels


def _cmd_plot_weights(args, argv):
    from .plotting import plot_weight_scatter

    run_dir = _run_dir(args, "plot-weights", 0)
    if args.weights_csv:
        weights, levels = _read_weight_log(args.weights_csv)
        config_echo = {"weights_csv": str(args.weights_csv)}
        seed = 0
    else:
        if not (args.checkpoint and args.data):
            raise CLIUsageError("need --weights-csv, or --checkpoint with --data")
        ckpt = load_checkpoint(args.checkpoint)
        model = restore_model(ckpt)
        config = ckpt.train_config()
        space, manifest = load_manifest(_manifest_path(args.data))
        split_arrays = load_split(manifest, space, args.split)
        if len(split_arrays) == 0:
            raise DataValidationError(f"split '{args.split}' has no records")
        _table, weights = score_table(model, split_arrays, space)
        levels = list(config.levels)
        config_echo = config.to_dict()
        seed = config.seed
        write_weight_log(run_dir / "weights.csv", weights, levels)
    if weights.shape[0] == 0:
        raise DataValidationError("no weights to plot")
    plot_weight_scatter(
        weights, run_dir / "weights.png",
        low_label=f"level {levels[0]} weight",
        high_label=f"level {levels[-1]} weight",
    )
    outputs = ["weights.png"] if args.weights_csv else ["weights.csv", "weights.png"]
    _write_run_manifest(run_dir, "plot-weights", argv, config_echo, seed, outputs,
                        summary={"points": int(weights.shape[0] * weights.shape[1])})
    print(f"scatter of {weights.shape[0]} samples -> {run_dir / 'weights.png'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="czsl", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="render a synthetic dataset")
    p.add_argument("--out", help="output directory (default: timestamped under "
                                 f"${ENV_OUT_ROOT} or ./runs)")
    p.add_argument("--n-attrs", type=int, required=True, dest="n_attrs")
    p.add_argument("--n-objs", type=int, required=True, dest="n_objs")
    p.add_argument("--seen-fraction", type=float, default=0.8, dest="seen_fraction")
    p.add_argument("--images-per-pair", type=int, default=20, dest="images_per_pair")
    p.add_argument("--image-size", type=int, default=64, dest="image_size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset dir or manifest.tsv")
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.add_argument("--grid", type=int, help="dense-grid bias count instead of "
                                            "exact threshold enumeration")
    p.add_argument("--fuse", choices=("sum", "softmax"))
    p.add_argument("--scores", default="fused", choices=("fused", "composition"))
    p.add_argument("--batch-size", type=int, default=256, dest="batch_size")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate a grid of ablation cells")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--strategies", help="comma list: learned,standard,mean,random")
    p.add_argument("--poolings", help="comma list: attention,gap")
    p.add_argument("--focus", help="comma list: on,off")
    p.add_argument("--level-sets", dest="level_sets",
                   help="semicolon list of comma sets, e.g. '3;2,3;1,2,3'")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="train/evaluate across hyperparameter values")
    p.add_argument("--param", required=True, choices=("alpha", "tau"))
    p.add_argument("--values", required=True, help="comma list of values")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("plot-weights", help="scatter mixing weights per branch")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--weights-csv", dest="weights_csv",
                   help="replot an existing weight log instead of running a model")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_plot_weights)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except CLIUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, DataValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
