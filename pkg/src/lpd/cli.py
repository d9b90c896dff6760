"""Command-line entry points: gen-data, train, eval, diagnose, gradcheck.

Every subcommand resolves its configuration as built-in defaults, then the
``--config`` JSON file, then explicit flags, and writes the resolved snapshot
to ``<out>/run_manifest.json``. A manifest can be passed back as ``--config``
to repeat a run.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("lpd")

MANIFEST_NAME = "run_manifest.json"
MTRL_FLAGS = {"ef": "ef-gated", "plain": "plain-sum"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def read_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    # a run manifest carries its snapshot under "config"
    if "subcommand" in data and "config" in data:
        data = data["config"]
    return data


def set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value


def resolve(defaults: dict, args, flag_map: dict) -> dict:
    cfg = copy.deepcopy(defaults)
    if args.config is not None:
        cfg = deep_merge(cfg, read_config_file(args.config))
    for attr, (dotted, convert) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            set_path(cfg, dotted, convert(value) if convert else value)
    return cfg


def write_manifest(out: Path, subcommand: str, args, config: dict, seed=None) -> None:
    manifest = {
        "subcommand": subcommand,
        "config_file": None if args.config is None else str(args.config),
        "seed": seed,
        "out": str(out),
        "config": config,
    }
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out / MANIFEST_NAME).write_text(text, encoding="utf-8")


def prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _synthetic_defaults() -> dict:
    from .feature_store import SyntheticConfig

    data = dataclasses.asdict(SyntheticConfig())
    return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}


def cmd_gen_data(args) -> int:
    from .feature_store import SyntheticConfig, generate_synthetic, save_dataset

    flags = {
        "seed": ("seed", None),
        "queries": ("queries", None),
        "clusters": ("clusters", None),
        "relevant": ("relevant_per_cluster", None),
        "distractors": ("distractors", None),
        "train_videos": ("train_videos", None),
        "noise": ("noise", None),
    }
    cfg = resolve(_synthetic_defaults(), args, flags)
    for key in ("queries", "clusters", "relevant_per_cluster"):
        if cfg[key] < 1:
            raise UsageError(f"{key} must be >= 1")
    syn = SyntheticConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
    out = Path(args.out)
    prepare_out(out, args.force)
    save_dataset(generate_synthetic(syn), out)
    write_manifest(out, "gen-data", args, cfg, cfg["seed"])
    print(f"dataset written to {out}")
    return 0


def _train_defaults() -> dict:
    from .trainer import TrainingConfig

    return {"data": None, "train": TrainingConfig().to_dict()}


def cmd_train(args) -> int:
    from .feature_store import load_dataset
    from .trainer import TrainingConfig, resume_training, train

    flags = {
        "data": ("data", str),
        "seed": ("train.seed", None),
        "topology": ("train.topology", None),
        "dcl": ("train.loss.dcl_mode", None),
        "mtrl": ("train.loss.mtrl_mode", MTRL_FLAGS.get),
        "gate": ("train.loss.gate_comparison", None),
        "dcl_weight": ("train.loss.dcl_weight", None),
        "batch": ("train.batch_size", None),
        "lr": ("train.lr", None),
        "margin": ("train.loss.margin", None),
        "depth": ("train.val_depth", None),
        "epochs": ("train.max_epochs", None),
        "patience": ("train.patience", None),
        "dim": ("train.d", None),
    }
    cfg = resolve(_train_defaults(), args, flags)
    if cfg["data"] is None:
        raise UsageError("--data is required")
    tc = TrainingConfig.from_dict(cfg["train"])
    try:
        tc.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = load_dataset(cfg["data"])
    out = Path(args.out)
    if args.resume:
        result = resume_training(dataset, out)
    else:
        prepare_out(out, args.force)
        write_manifest(out, "train", args, cfg, tc.seed)
        result = train(dataset, tc, out)
    print(f"best val mAP {result.best_val_map:.6f} at epoch {result.best_epoch}")
    return 0


def _resolve_checkpoint(path) -> Path:
    path = Path(path)
    if path.is_dir():
        pointer = path / "best"
        if not pointer.exists():
            raise FileNotFoundError(f"{path} has no best-checkpoint pointer")
        path = path / pointer.read_text(encoding="utf-8").strip()
    return path


def _load_for_eval(cfg: dict):
    from .feature_store import load_dataset
    from .model import ModelError, load_params

    if cfg["data"] is None or cfg["checkpoint"] is None:
        raise UsageError("--data and --ckpt are required")
    params = load_params(_resolve_checkpoint(cfg["checkpoint"]))
    if cfg.get("topology") is not None and cfg["topology"] != params.topology:
        raise ModelError(f"checkpoint topology {params.topology!r} != requested {cfg['topology']!r}")
    dataset = load_dataset(cfg["data"])
    if list(params.text_dims) != dataset.text_dims or list(params.video_dims) != dataset.video_dims:
        raise ModelError("checkpoint feature dimensions do not match the dataset")
    split = dataset.test if cfg["split"] == "test" else dataset.val
    if split is None:
        raise FileNotFoundError(f"dataset has no {cfg['split']} split")
    return params, dataset, split


EVAL_FLAGS = {
    "data": ("data", str),
    "ckpt": ("checkpoint", str),
    "split": ("split", None),
    "depth": ("depth", None),
    "topology": ("topology", None),
}


def cmd_eval(args) -> int:
    from .retrieval_eval import DEFAULT_DEPTH, evaluate

    defaults = {"data": None, "checkpoint": None, "split": "test", "depth": DEFAULT_DEPTH,
                "topology": None, "k": [20], "iou_k": None}
    flags = dict(EVAL_FLAGS, k=("k", None), topk=("iou_k", None))
    cfg = resolve(defaults, args, flags)
    params, dataset, split = _load_for_eval(cfg)
    report = evaluate(params, dataset, split, cfg["depth"], tuple(cfg["k"]), cfg["iou_k"])
    out = Path(args.out)
    write_manifest(out, "eval", args, cfg)
    report.write(out, "eval")
    print(report.summary(), end="")
    return 0


def cmd_diagnose(args) -> int:
    from .retrieval_eval import evaluate, space_labels, write_iou_csv

    defaults = {"data": None, "checkpoint": None, "split": "test", "depth": 100,
                "topology": None, "topk": 20}
    cfg = resolve(defaults, args, dict(EVAL_FLAGS, topk=("topk", None)))
    if cfg["topk"] < 1:
        raise UsageError("--topk must be >= 1")
    params, dataset, split = _load_for_eval(cfg)
    depth = max(cfg["depth"], cfg["topk"])
    report = evaluate(params, dataset, split, depth, (), iou_k=cfg["topk"])
    out = Path(args.out)
    write_manifest(out, "diagnose", args, cfg)
    write_iou_csv(out / "iou.csv", report.iou_matrix, space_labels(params, dataset))
    summary = f"top-{cfg['topk']} inter-space IoU (mean off-diagonal): {report.iou_mean:.6f}\n"
    (out / "iou_summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return 0


def cmd_gradcheck(args) -> int:
    import csv

    from .losses import DCL_MODES, LossConfig
    from .model import TOPOLOGIES
    from .trainer import gradcheck

    defaults = {"seed": 0, "seeds": 1, "topology": None, "dcl": None, "mtrl": None,
                "step": 1e-5, "threshold": 1e-4}
    flags = {
        "seed": ("seed", None), "seeds": ("seeds", None), "topology": ("topology", None),
        "dcl": ("dcl", None), "mtrl": ("mtrl", MTRL_FLAGS.get),
    }
    cfg = resolve(defaults, args, flags)
    topologies = [cfg["topology"]] if cfg["topology"] else list(TOPOLOGIES)
    dcls = [cfg["dcl"]] if cfg["dcl"] else list(DCL_MODES)
    mtrls = [cfg["mtrl"]] if cfg["mtrl"] else list(MTRL_FLAGS.values())
    out = Path(args.out)
    write_manifest(out, "gradcheck", args, cfg, cfg["seed"])
    worst = 0.0
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["topology", "dcl", "mtrl", "seed", "tensor", "analytic", "numeric", "rel_error"])
        for seed in range(cfg["seed"], cfg["seed"] + cfg["seeds"]):
            for topo in topologies:
                for dcl in dcls:
                    for mtrl in mtrls:
                        loss = LossConfig(dcl_mode=dcl, mtrl_mode=mtrl)
                        reports, _ = gradcheck(loss, topo, seed, step=cfg["step"])
                        for r in reports:
                            w.writerow([topo, dcl, mtrl, seed, r.name, repr(r.analytic),
                                        repr(r.numeric), repr(r.rel_error)])
                            worst = max(worst, r.rel_error)
    ok = worst < cfg["threshold"]
    print(f"max rel-error {worst:.3e} ({'ok' if ok else 'FAILED'})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or a previous run_manifest.json")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=_positive, help="worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lpd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--queries", type=_positive)
    g.add_argument("--clusters", type=_positive)
    g.add_argument("--relevant", type=_positive, help="relevant items per cluster")
    g.add_argument("--distractors", type=int)
    g.add_argument("--train-videos", type=_positive)
    g.add_argument("--noise", type=float)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--topology", choices=["lpd", "parallel-heads"])
    t.add_argument("--dcl", choices=["partial", "full", "off"])
    t.add_argument("--mtrl", choices=sorted(MTRL_FLAGS))
    t.add_argument("--gate", choices=["ge", "gt"], help="gate comparison against 1/K")
    t.add_argument("--dcl-weight", type=float)
    t.add_argument("--batch", type=_positive)
    t.add_argument("--lr", type=float)
    t.add_argument("--margin", type=float)
    t.add_argument("--depth", type=_positive, help="validation ranking depth")
    t.add_argument("--epochs", type=int, help="maximum epochs")
    t.add_argument("--patience", type=_positive)
    t.add_argument("--dim", type=_positive, help="common space dimension")
    t.add_argument("--force", action="store_true")
    t.add_argument("--resume", action="store_true", help="continue from <out>/state.bin")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "mAP and P@k report"),
                              ("diagnose", cmd_diagnose, "inter-space IoU matrix")):
        e = sub.add_parser(name, parents=[common], help=help_)
        e.add_argument("--data")
        e.add_argument("--ckpt", help="checkpoint file or training output directory")
        e.add_argument("--out", required=True)
        e.add_argument("--split", choices=["test", "val"])
        e.add_argument("--depth", type=_positive)
        e.add_argument("--topology", choices=["lpd", "parallel-heads"])
        e.add_argument("--topk", type=_positive, help="IoU depth")
        if name == "eval":
            e.add_argument("--k", type=_positive, nargs="+", help="precision cut-offs")
        e.set_defaults(func=func)

    c = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    c.add_argument("--out", default="gradcheck_out")
    c.add_argument("--seeds", type=_positive, help="number of consecutive seeds")
    c.add_argument("--topology", choices=["lpd", "parallel-heads"])
    c.add_argument("--dcl", choices=["partial", "full", "off"])
    c.add_argument("--mtrl", choices=sorted(MTRL_FLAGS))
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = str(args.threads or os.cpu_count() or 1)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"lpd {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
