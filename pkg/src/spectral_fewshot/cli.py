"""Command-line entry point: ``spectral-fewshot <command> [options]``.

Configuration precedence: built-in defaults < ``--config`` YAML < flags.
The YAML file may hold ``dataset``, ``data_root``, ``split_seed``,
``resample_split`` and the sections ``train:`` / ``eval:`` whose keys
mirror :class:`TrainConfig` / :class:`EvalConfig`.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path


from .datasets import (ClassSplit, class_split, convert_raw, load_dataset, synth_mixed_sbm,
                       synth_sbm, write_container)
from .encoder import config_hash, load_checkpoint, save_checkpoint
from .evaluation import (EvalConfig, ResampledSplits, ablation_run, evaluate, gating_case_study,
                         hyperparam_sweep, run_experiment)
from .trainer import VARIANTS, TrainConfig, dump_yaml, load_yaml, manifest, train


class CliError(Exception):
    pass


def _add_dataclass_flags(parser, cls, group_name, prefixed=()):
    group = parser.add_argument_group(group_name)
    for f in dataclasses.fields(cls):
        name = f"{group_name}_{f.name}" if f.name in prefixed else f.name
        flag = "--" + name.replace("_", "-")
        if f.type in ("bool", bool):
            group.add_argument(flag, dest=f"{group_name}.{f.name}", default=None,
                               type=lambda s: s.lower() in ("1", "true", "yes"),
                               metavar="BOOL")
        else:
            kind = {"int": int, "float": float}.get(str(f.type), str)
            group.add_argument(flag, dest=f"{group_name}.{f.name}", default=None, type=kind)


def _collect(args, group_name):
    prefix = group_name + "."
    return {k[len(prefix):]: v for k, v in vars(args).items()
            if k.startswith(prefix) and v is not None}


def resolve(args) -> dict:
    """Merge defaults, the YAML file and explicit flags into one settings dict."""
    file_cfg = load_yaml(args.config) if args.config else {}
    unknown = set(file_cfg) - {"dataset", "data_root", "split_seed", "resample_split", "train",
                               "eval", "out", "split_sizes"}
    if unknown:
        raise CliError(f"unknown top-level config keys: {sorted(unknown)}")
    train_kw = {**file_cfg.get("train", {}), **_collect(args, "train")}
    eval_kw = {**file_cfg.get("eval", {}), **_collect(args, "eval")}
    out = {
        "dataset": args.dataset or file_cfg.get("dataset", "cora"),
        "data_root": args.data_root or file_cfg.get("data_root"),
        "split_seed": args.split_seed if args.split_seed is not None else file_cfg.get("split_seed", 0),
        "resample_split": (args.resample_split if args.resample_split is not None
                           else file_cfg.get("resample_split", True)),
        "out": args.out or file_cfg.get("out", "runs"),
        "split_sizes": _sizes(args.split_sizes or file_cfg.get("split_sizes")),
    }
    try:
        out["train"] = TrainConfig(**train_kw)
        out["eval"] = EvalConfig(**eval_kw)
    except TypeError as e:
        raise CliError(str(e)) from None
    return out


def _sizes(v):
    if v is None:
        return None
    if isinstance(v, str):
        v = v.split(",")
    try:
        sizes = tuple(int(x) for x in v)
    except ValueError:
        raise CliError(f"split sizes must be three integers, got {v!r}") from None
    if len(sizes) != 3:
        raise CliError(f"split sizes must be three integers, got {v!r}")
    return sizes


def _split(s, graph, seed=None):
    return class_split(s["dataset"], graph.num_classes,
                       seed=s["split_seed"] if seed is None else seed, sizes=s["split_sizes"])


def run_dir(settings, command) -> Path:
    payload = {k: (v.to_dict() if hasattr(v, "to_dict") else
                   dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v)
               for k, v in settings.items()}
    h = config_hash({"command": command, **payload})
    d = Path(settings["out"]) / f"{command}-{h}-{time.strftime('%Y%m%d-%H%M%S')}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _graph_and_splits(s):
    graph = load_dataset(s["dataset"], s["data_root"])
    if s["resample_split"]:
        splits = ResampledSplits(s["dataset"], graph.num_classes, s["split_seed"],
                                 s["split_sizes"])
    else:
        splits = _split(s, graph)
    return graph, splits


def _save_settings(d: Path, s, extra=None):
    dump_yaml({"dataset": s["dataset"], "split_seed": s["split_seed"],
               "split_sizes": None if s["split_sizes"] is None else list(s["split_sizes"]),
               "resample_split": s["resample_split"], "train": s["train"].to_dict(),
               "eval": dataclasses.asdict(s["eval"])}, d / "config.yaml")
    (d / "manifest.json").write_text(json.dumps(manifest(s["train"], extra), indent=2) + "\n")


def _emit(result: dict):
    print(json.dumps(result, default=str))


# -- commands --------------------------------------------------------------------


def cmd_train(args):
    s = resolve(args)
    graph = load_dataset(s["dataset"], s["data_root"])
    split = _split(s, graph)
    d = run_dir(s, "train")
    _save_settings(d, s, {"split": _split_dict(split)})
    model, log = train(graph, split, s["train"], log_path=d / "train_log.jsonl")
    ckpt = save_checkpoint(model, d / "model", s["train"].to_dict())
    _emit({"status": "ok", "run_dir": d, "checkpoint": ckpt, "episodes": len(log),
           "best_val_accuracy": log.best_val_accuracy, "seconds": round(log.seconds, 1)})


def cmd_eval(args):
    s = resolve(args)
    d = run_dir(s, "eval")
    _save_settings(d, s)
    if args.checkpoint:
        graph = load_dataset(s["dataset"], s["data_root"])
        split = _split(s, graph)
        model = load_checkpoint(args.checkpoint)
        report = evaluate(model, graph, split, s["eval"], s["train"])
    else:
        graph, splits = _graph_and_splits(s)
        report = run_experiment(graph, splits, s["train"], s["eval"]).report
    report.write(d)
    _emit({"status": "ok", "run_dir": d, "mean_accuracy": report.mean_accuracy,
           "ci95": report.ci95, "diagnostics": report.diagnostics})


def cmd_ablate(args):
    s = resolve(args)
    graph, splits = _graph_and_splits(s)
    d = run_dir(s, "ablate")
    _save_settings(d, s)
    variants = args.variants.split(",") if args.variants else ["full", "no_high", "no_low",
                                                                 "no_cal", "no_both"]
    rows = []
    for v in variants:
        rep = ablation_run(v, graph, splits, s["train"], s["eval"])
        rep.write(d / v)
        rows.append({"variant": v, "mean_accuracy": rep.mean_accuracy, "std": rep.std,
                     "ci95": rep.ci95, **rep.diagnostics})
    _write_table(d / "ablation.csv", rows)
    (d / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    _emit({"status": "ok", "run_dir": d, "rows": rows})


def cmd_sweep(args):
    s = resolve(args)
    graph, splits = _graph_and_splits(s)
    d = run_dir(s, "sweep")
    _save_settings(d, s)
    try:
        grid = [float(x) for x in args.grid.split(",")]
    except ValueError:
        raise CliError(f"bad grid {args.grid!r}") from None
    table = hyperparam_sweep(args.param, grid, graph, splits, s["train"], s["eval"])
    rows = [{args.param: v, "mean_accuracy": acc, "ci95": rep.ci95} for v, acc, rep in table]
    _write_table(d / f"sweep_{args.param}.csv", rows)
    (d / f"sweep_{args.param}.json").write_text(json.dumps(rows, indent=2) + "\n")
    _emit({"status": "ok", "run_dir": d, "rows": rows})


def cmd_case_study(args):
    s = resolve(args)
    d = run_dir(s, "case-study")
    if args.synthetic:
        graph = synth_mixed_sbm(args.nodes, args.classes, args.p_in, args.p_out, args.dim,
                                seed=args.graph_seed, separation=args.separation)
        c = args.classes
        split = ClassSplit(frozenset(range(c - 2)), frozenset({c - 2}), frozenset({c - 1}))
    else:
        graph = load_dataset(s["dataset"], s["data_root"])
        split = _split(s, graph)
    _save_settings(d, s, {"split": _split_dict(split)})
    model, _ = train(graph, split, s["train"], log_path=d / "train_log.jsonl")
    cs = gating_case_study(model, graph, args.bins, s["train"], out_dir=d)
    _emit({"status": "ok", "run_dir": d, "spearman_low": cs.spearman_low,
           "spearman_high": cs.spearman_high, "files": cs.files})


def cmd_synth(args):
    make = synth_mixed_sbm if args.mixed else synth_sbm
    g = make(args.nodes, args.classes, args.p_in, args.p_out, args.dim, seed=args.graph_seed,
             separation=args.separation, name=args.name)
    path = write_container(g, args.out or ".")
    _emit({"status": "ok", "path": path, "num_nodes": g.num_nodes, "num_edges": g.num_edges})


def cmd_convert(args):
    g = convert_raw(args.raw_dir, args.name)
    path = write_container(g, args.out or ".")
    _emit({"status": "ok", "path": path, "num_nodes": g.num_nodes, "num_edges": g.num_edges,
           "feature_dim": g.feature_dim, "num_classes": g.num_classes})


def _split_dict(split: ClassSplit) -> dict:
    return {"base": sorted(split.base_classes), "val": sorted(split.val_classes),
            "novel": sorted(split.novel_classes), "seed": split.seed}


def _write_table(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# -- parser ----------------------------------------------------------------------


def _experiment_parser(sub, name, func, help_text):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--dataset")
    p.add_argument("--data-root", help="dataset directory (overrides SPECTRAL_FEWSHOT_DATA)")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--split-sizes", help="base,val,novel class counts (default: per dataset)")
    p.add_argument("--resample-split", type=lambda s: s.lower() in ("1", "true", "yes"),
                   metavar="BOOL", help="draw a fresh class split per run (seed + run)")
    p.add_argument("--out", help="parent directory for run directories (default: runs)")
    _add_dataclass_flags(p, TrainConfig, "train")
    _add_dataclass_flags(p, EvalConfig, "eval", prefixed={"seed"})  # --eval-seed
    p.set_defaults(func=func)
    return p


def _sbm_flags(p, nodes=600, classes=6, p_in=0.04, p_out=0.004):
    p.add_argument("--nodes", type=int, default=nodes)
    p.add_argument("--classes", type=int, default=classes)
    p.add_argument("--p-in", type=float, default=p_in)
    p.add_argument("--p-out", type=float, default=p_out)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--graph-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectral-fewshot",
                                     description="Few-shot node classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    _experiment_parser(sub, "train", cmd_train, "meta-train one model, save checkpoint + log")
    p = _experiment_parser(sub, "eval", cmd_eval,
                           "score a checkpoint, or train+score num_runs models")
    p.add_argument("--checkpoint", help="model .npz written by `train`")
    p = _experiment_parser(sub, "ablate", cmd_ablate, "paired variant comparison")
    p.add_argument("--variants", help=f"comma list from {sorted(VARIANTS)}")
    p = _experiment_parser(sub, "sweep", cmd_sweep, "sigma / tau sensitivity")
    p.add_argument("--param", choices=["sigma", "tau"], required=True)
    p.add_argument("--grid", required=True, help="comma-separated positive values")
    p = _experiment_parser(sub, "case-study", cmd_case_study, "gate weight vs. homophily")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--synthetic", action="store_true",
                   help="use a mixed-homophily SBM instead of --dataset")
    _sbm_flags(p)
    p = sub.add_parser("synth", help="write a synthetic SBM graph container")
    _sbm_flags(p)
    p.add_argument("--mixed", action="store_true", help="two regions with swapped p_in/p_out")
    p.add_argument("--name", default="sbm")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)
    p = sub.add_parser("convert-dataset", help="convert raw Planetoid / LINQS files")
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as e:  # reported as one machine-readable line
        print(json.dumps({"status": "error", "type": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
