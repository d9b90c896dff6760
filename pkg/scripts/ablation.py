"""Ablation table on the synthetic benchmark.

Trains every arm for each seed and prints test mAP, P@20, top-20
inter-space IoU and best epoch, plus seed means.

    python3 scripts/ablation.py --seeds 0 1 2 --out runs/ablation
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from lpd.feature_store import SyntheticConfig, generate_synthetic
from lpd.losses import LossConfig
from lpd.retrieval_eval import evaluate
from lpd.trainer import TrainingConfig, train

ARMS = {
    "lpd": ("lpd", "partial", "ef-gated"),
    "lpd w/o dcl": ("lpd", "off", "ef-gated"),
    "lpd full dcl": ("lpd", "full", "ef-gated"),
    "lpd w/o ef-mtrl": ("lpd", "partial", "plain-sum"),
    "heads + dcl": ("parallel-heads", "partial", "ef-gated"),
    "heads": ("parallel-heads", "off", "ef-gated"),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--arms", nargs="+", choices=sorted(ARMS), default=list(ARMS))
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    syn = SyntheticConfig(seed=args.data_seed)
    ds = generate_synthetic(syn)
    rows = []
    for name in args.arms:
        topology, dcl, mtrl = ARMS[name]
        for seed in args.seeds:
            cfg = TrainingConfig(lr=args.lr, d=args.dim, max_epochs=args.epochs, seed=seed,
                                 topology=topology, loss=LossConfig(dcl_mode=dcl, mtrl_mode=mtrl))
            start = time.perf_counter()
            result = train(ds, cfg)
            rep = evaluate(result.best_params, ds, ds.test, iou_k=20)
            row = {"arm": name, "seed": seed, "mAP": rep.map, "P@20": rep.mean_precision(20),
                   "IoU@20": rep.iou_mean, "best_epoch": result.best_epoch,
                   "seconds": time.perf_counter() - start}
            rows.append(row)
            print(f"{name:16s} seed {seed}  mAP {row['mAP']:.3f}  P@20 {row['P@20']:.3f}  "
                  f"IoU {row['IoU@20']:.3f}  best epoch {row['best_epoch']:3d}  {row['seconds']:.0f}s",
                  flush=True)

    print("\nseed means")
    for name in args.arms:
        sub = [r for r in rows if r["arm"] == name]
        means = {k: np.mean([r[k] for r in sub]) for k in ("mAP", "P@20", "IoU@20", "best_epoch")}
        print(f"{name:16s}  mAP {means['mAP']:.3f}  P@20 {means['P@20']:.3f}  "
              f"IoU {means['IoU@20']:.3f}  best epoch {means['best_epoch']:.1f}")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        setup = {"synthetic": asdict(syn), "lr": args.lr, "d": args.dim, "max_epochs": args.epochs}
        (args.out / "setup.json").write_text(json.dumps(setup, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
