"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion.

Criteria 5-8 train on the reference synthetic benchmark (``SyntheticConfig()``
defaults: 20 test queries x 3 relevance clusters, 3 text and 6 video
features, data seed 0) over training seeds 0, 1, 2 and compare seed means.
"""
import math
import time
from functools import lru_cache
from itertools import product

import numpy as np

from lpd.cli import main as cli_main
from lpd.feature_store import SyntheticConfig, generate_synthetic
from lpd.losses import LossConfig, dcl_pair, weights_from_entropies
from lpd.numerics import histogram_entropy, pearson
from lpd.retrieval_eval import average_precision, evaluate, rank_indices
from lpd.trainer import TrainingConfig, gradcheck, train

SEEDS = (0, 1, 2)
REFERENCE_TRAINING = dict(batch_size=128, lr=2e-3, d=64, max_epochs=150, patience=10)


def report(log, tag, ok, detail):
    line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
    log.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# property criteria
# ---------------------------------------------------------------------------


def test_c1_gradient_fidelity(criterion_log):
    start = time.perf_counter()
    worst = 0.0
    for seed, mtrl, dcl in product(range(20), ("plain-sum", "ef-gated"), ("off", "partial", "full")):
        reports, _ = gradcheck(LossConfig(dcl_mode=dcl, mtrl_mode=mtrl), "lpd", seed,
                               text_dims=(5, 7), video_dims=(4, 6, 5), d=8, b=6, step=1e-5)
        worst = max(worst, max(r.rel_error for r in reports))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 120
    report(criterion_log, "C1", ok, f"max rel-error {worst:.2e} over 120 checks in {elapsed:.0f}s")
    assert ok


def _naive_dcl(m1, m2, mode):
    b = m1.shape[0]
    total = 0.0
    for i in range(b):
        keep = [j for j in range(b) if mode == "full" or j != i]
        total += abs(pearson(m1[i, keep], m2[i, keep]))
    return total / b


def test_c2_dcl_oracle(criterion_log):
    rng = np.random.default_rng(2)
    worst = 0.0
    diag_zero = True
    self_err = 0.0
    for _ in range(100):
        m1, m2 = rng.uniform(-1, 1, (2, 8, 8))
        for mode in ("partial", "full"):
            value, d1, d2 = dcl_pair(m1, m2, mode)
            worst = max(worst, abs(value - _naive_dcl(m1, m2, mode)))
            if mode == "partial":
                diag_zero &= bool(np.all(np.diag(d1) == 0.0) and np.all(np.diag(d2) == 0.0))
        self_err = max(self_err, abs(dcl_pair(m1, m1, "partial")[0] - 1.0))
    ok = worst < 1e-10 and self_err < 1e-12 and diag_zero
    report(criterion_log, "C2", ok,
           f"max |matrix-naive| {worst:.1e}, |DcL(M,M)-1| {self_err:.1e}, diagonal grads zero: {diag_zero}")
    assert ok


def test_c3_entropy_gating(criterion_log):
    uniform = histogram_entropy((np.arange(100) + 0.5) / 100)
    two = weights_from_entropies([4.6, 0.0])
    equal = np.full(9, 3.0)
    ge = weights_from_entropies(equal, "ge").gates
    gt = weights_from_entropies(equal, "gt").gates
    ok = (
        abs(uniform - math.log(100)) <= 1e-3
        and np.allclose(two.weights, [0.731, 0.269], atol=1e-3)
        and two.gates.tolist() == [True, False]
        and ge.all()
        and not gt.any()
    )
    report(criterion_log, "C3", ok,
           f"H(uniform)={uniform:.4f}, W={np.round(two.weights, 4).tolist()}, gates={two.gates.tolist()}, "
           f"equal H: >= keeps {int(ge.sum())}/9, > keeps {int(gt.sum())}/9")
    assert ok


def test_c4_retrieval_correctness(criterion_log):
    rng = np.random.default_rng(4)
    scores = rng.random(10_000)
    ids = np.array([f"v{i:05d}" for i in rng.permutation(10_000)])
    oracle = sorted(range(10_000), key=lambda i: (-scores[i], ids[i]))
    agree = all(rank_indices(scores, ids, k).tolist() == oracle[:k] for k in (20, 1000))
    ap = average_precision(["r1", "n1", "r2", "n2"], {"r1", "r2"})
    ok = agree and abs(ap - 0.8333) <= 1e-4
    report(criterion_log, "C4", ok, f"top-k matches full sort for k in (20, 1000): {agree}, AP={ap:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# trend criteria on the reference benchmark
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def reference_data():
    return generate_synthetic(SyntheticConfig())


@lru_cache(maxsize=None)
def arm(topology, dcl, mtrl, seed):
    """(test mAP, test IoU@20, best epoch, seconds) of one training run."""
    ds = reference_data()
    cfg = TrainingConfig(seed=seed, topology=topology, loss=LossConfig(dcl_mode=dcl, mtrl_mode=mtrl),
                         **REFERENCE_TRAINING)
    start = time.perf_counter()
    result = train(ds, cfg)
    rep = evaluate(result.best_params, ds, ds.test, iou_k=20)
    return rep.map, rep.iou_mean, result.best_epoch, time.perf_counter() - start


def seed_mean(topology, dcl, mtrl, field):
    return float(np.mean([arm(topology, dcl, mtrl, s)[field] for s in SEEDS]))


MAP, IOU, EPOCH, SECONDS = range(4)


def test_c5_diversity_trend(criterion_log):
    runs = [arm("lpd", dcl, "ef-gated", s) for dcl in ("partial", "off") for s in SEEDS]
    elapsed = sum(r[SECONDS] for r in runs)
    iou_p, iou_o = seed_mean("lpd", "partial", "ef-gated", IOU), seed_mean("lpd", "off", "ef-gated", IOU)
    map_p, map_o = seed_mean("lpd", "partial", "ef-gated", MAP), seed_mean("lpd", "off", "ef-gated", MAP)
    ok = iou_o - iou_p >= 0.02 and map_p >= map_o - 0.02 and elapsed < 600
    report(criterion_log, "C5", ok,
           f"IoU@20 partial {iou_p:.3f} vs off {iou_o:.3f}; mAP {map_p:.3f} vs {map_o:.3f}; {elapsed:.0f}s")
    assert ok


def test_c6_partial_beats_full(criterion_log):
    map_p = seed_mean("lpd", "partial", "ef-gated", MAP)
    map_f = seed_mean("lpd", "full", "ef-gated", MAP)
    ok = map_p >= map_f
    report(criterion_log, "C6", ok, f"mAP partial {map_p:.3f} vs full {map_f:.3f}")
    assert ok


def test_c7_model_agnostic(criterion_log):
    iou_p = seed_mean("parallel-heads", "partial", "ef-gated", IOU)
    iou_o = seed_mean("parallel-heads", "off", "ef-gated", IOU)
    map_p = seed_mean("parallel-heads", "partial", "ef-gated", MAP)
    map_o = seed_mean("parallel-heads", "off", "ef-gated", MAP)
    ok = iou_o - iou_p >= 0.02 and map_p >= map_o - 0.02
    report(criterion_log, "C7", ok,
           f"parallel-heads IoU@20 partial {iou_p:.3f} vs off {iou_o:.3f}; mAP {map_p:.3f} vs {map_o:.3f}")
    assert ok


def test_c8_ef_mtrl_trend(criterion_log):
    ep_ef = seed_mean("lpd", "partial", "ef-gated", EPOCH)
    ep_pl = seed_mean("lpd", "partial", "plain-sum", EPOCH)
    map_ef = seed_mean("lpd", "partial", "ef-gated", MAP)
    map_pl = seed_mean("lpd", "partial", "plain-sum", MAP)
    ok = ep_ef <= ep_pl and map_ef >= map_pl - 0.01
    report(criterion_log, "C8", ok,
           f"best epoch ef {ep_ef:.1f} vs plain {ep_pl:.1f}; mAP ef {map_ef:.3f} vs plain {map_pl:.3f}")
    assert ok


def test_c9_determinism(criterion_log, tmp_path):
    data = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(data), "--queries", "5", "--distractors", "200",
                     "--train-videos", "300"]) == 0
    first = tmp_path / "first"
    flags = ["--dim", "16", "--lr", "2e-3", "--epochs", "4", "--batch", "32", "--depth", "200"]
    assert cli_main(["train", "--data", str(data), "--out", str(first), *flags]) == 0
    manifest = str(first / "run_manifest.json")
    second, third = tmp_path / "second", tmp_path / "third"
    assert cli_main(["train", "--out", str(second), "--config", manifest]) == 0
    assert cli_main(["train", "--out", str(third), "--config", manifest]) == 0

    def outputs(path):
        return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "run_manifest.json"}

    names = sorted(outputs(first))
    ok = outputs(first) == outputs(second) == outputs(third) and any(n.startswith("ckpt") for n in names)
    report(criterion_log, "C9", ok, f"3 runs byte-identical over {len(names)} files ({', '.join(names)})")
    assert ok
