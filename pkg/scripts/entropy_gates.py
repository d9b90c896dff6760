"""How often each space passes the entropy gate, and each space's own test AP.

    python3 scripts/entropy_gates.py --seed 0
"""
from __future__ import annotations

import argparse

import numpy as np

from lpd.feature_store import SyntheticConfig, generate_synthetic
from lpd.losses import LossConfig
from lpd.model import score_collection
from lpd.retrieval_eval import average_precision, rank_indices, space_labels
from lpd.trainer import TrainingConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mtrl", choices=["ef-gated", "plain-sum"], default="ef-gated")
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=150)
    args = ap.parse_args()

    ds = generate_synthetic(SyntheticConfig())
    cfg = TrainingConfig(lr=args.lr, d=args.dim, max_epochs=args.epochs, seed=args.seed,
                         loss=LossConfig(mtrl_mode=args.mtrl))
    result = train(ds, cfg)
    k = result.best_params.n_spaces
    gates = np.array([[(r["gates"] >> s) & 1 for s in range(k)] for r in result.rows if "gates" in r])
    labels = space_labels(result.best_params, ds)

    split = ds.test
    ids = np.array(split.collection)
    per_space, _ = score_collection(ds.text_features(split.queries), ds.video_features(split.collection),
                                    result.best_params)
    print(f"best epoch {result.best_epoch}, {len(gates)} steps")
    print(f"{'space':12s} {'gated in':>8s} {'own AP':>8s}")
    for s in range(k):
        aps = [average_precision(ids[rank_indices(per_space[s, i], ids, 1000)].tolist(), split.relevance[q])
               for i, q in enumerate(split.queries)]
        print(f"{labels[s]:12s} {gates[:, s].mean():8.2f} {np.mean(aps):8.3f}")


if __name__ == "__main__":
    main()
