"""RMSProp training loop with validation-mAP early stopping, plus gradcheck."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .feature_store import FeatureStoreError, PairDataset, epoch_batches
from .losses import LossConfig, LossResult, hardest_negatives, total_loss
from .model import (
    ModelParams,
    backward_spaces,
    forward_spaces,
    load_container,
    load_params,
    params_meta,
    save_container,
    save_params,
)
from .numerics import GradCheckReport, finite_difference_gradient, rel_error
from .retrieval_eval import DEFAULT_DEPTH, evaluate

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "epoch", "itrl_total", "dcl", "gates", "lr", "val_mAP"]


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    batch_size: int = 128
    lr: float = 1e-4
    lr_decay: float = 0.99
    rho: float = 0.9
    rms_eps: float = 1e-8
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    d: int = 512
    topology: str = "lpd"
    val_depth: int = DEFAULT_DEPTH
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self):
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        self.loss.validate(self.batch_size)

    def lr_at(self, epochs_done: int) -> float:
        return self.lr * self.lr_decay**epochs_done

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        data = dict(data)
        loss = LossConfig(**data.pop("loss", {}))
        return cls(loss=loss, **data)


@dataclass
class TrainingState:
    params: ModelParams
    acc: dict[str, np.ndarray]
    epoch: int = 0  # completed epochs
    step: int = 0
    best_val_map: float = -1.0
    best_epoch: int = -1
    since_improvement: int = 0
    stopped: bool = False
    rows: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainingState":
        return cls(params, {k: np.zeros_like(v) for k, v in params.tensors.items()})


class RMSProp:
    """acc <- rho*acc + (1-rho)*g^2 ; theta <- theta - lr*g/sqrt(acc+eps)."""

    def __init__(self, rho=0.9, eps=1e-8):
        self.rho = rho
        self.eps = eps

    def step(self, tensors, acc, grads, lr):
        for name, g in grads.items():
            a = acc[name]
            a *= self.rho
            a += (1.0 - self.rho) * g * g
            tensors[name] -= lr * g / np.sqrt(a + self.eps)


def loss_and_grads(params: ModelParams, text_feats, video_feats, loss_cfg: LossConfig):
    sims, emb, cache = forward_spaces(text_feats, video_feats, params)
    result = total_loss(sims.spaces, emb.space_anchors(params.topology), loss_cfg)
    grads = backward_spaces(cache, result.grad, params)
    return result, grads


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in LOG_COLUMNS])


def save_state(path, state: TrainingState, config: TrainingConfig) -> None:
    tensors = dict(state.params.tensors)
    tensors.update({f"acc:{k}": v for k, v in state.acc.items()})
    meta = params_meta(state.params)
    meta["extra"] = {
        "epoch": state.epoch,
        "step": state.step,
        "best_val_map": state.best_val_map,
        "best_epoch": state.best_epoch,
        "since_improvement": state.since_improvement,
        "stopped": state.stopped,
        "rows": state.rows,
        "config": config.to_dict(),
    }
    save_container(path, tensors, meta)


def load_state(path) -> tuple[TrainingState, TrainingConfig]:
    tensors, meta = load_container(path)
    extra = meta["extra"]
    params = ModelParams(meta["text_dims"], meta["video_dims"], meta["d"], meta["topology"])
    params.tensors = {k: v for k, v in tensors.items() if not k.startswith("acc:")}
    acc = {k[4:]: v for k, v in tensors.items() if k.startswith("acc:")}
    state = TrainingState(
        params, acc, extra["epoch"], extra["step"], extra["best_val_map"], extra["best_epoch"],
        extra["since_improvement"], extra["stopped"], extra["rows"],
    )
    return state, TrainingConfig.from_dict(extra["config"])


@dataclass
class TrainResult:
    best_params: ModelParams
    best_val_map: float
    best_epoch: int
    state: TrainingState

    @property
    def rows(self):
        return self.state.rows

    def val_curve(self) -> list[tuple[int, float]]:
        return [(r["epoch"], r["val_mAP"]) for r in self.state.rows if r.get("val_mAP") not in (None, "")]


def _validate(params, dataset, config) -> float:
    return evaluate(params, dataset, dataset.val, depth=config.val_depth, precision_ks=()).map


def train(
    dataset: PairDataset,
    config: TrainingConfig,
    out_dir=None,
    resume: TrainingState | None = None,
    max_epochs: int | None = None,
) -> TrainResult:
    """Train until early stopping or ``config.max_epochs``.

    Writes ``train_log.csv``, improved checkpoints, a ``best`` pointer file
    and a resumable ``state.bin`` to ``out_dir`` when given. ``max_epochs``
    overrides the config's limit for this call only (to pause a run).
    """
    config.validate()
    if dataset.val is None:
        raise FeatureStoreError("training needs a validation split")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    limit = config.max_epochs if max_epochs is None else min(max_epochs, config.max_epochs)

    if resume is None:
        params = ModelParams.init(
            dataset.text_dims, dataset.video_dims, config.d, config.topology, config.seed
        )
        state = TrainingState.fresh(params)
        best = params.copy()
        if limit == 0:
            return TrainResult(best, float("nan"), -1, state)
        state.best_val_map = _validate(params, dataset, config)
        state.best_epoch = 0
        state.rows.append({"step": 0, "epoch": 0, "lr": config.lr, "val_mAP": state.best_val_map})
        if out is not None:
            _checkpoint(out, state, 0)
    else:
        state = resume
        best = load_params(out / (out / "best").read_text().strip()) if out is not None else state.params.copy()

    opt = RMSProp(config.rho, config.rms_eps)
    params = state.params
    while not state.stopped and state.epoch < limit:
        e = state.epoch
        lr = config.lr_at(e)
        for pairs in epoch_batches(dataset.train, config.batch_size, config.seed, e):
            batch = dataset.batch(pairs)
            result, grads = loss_and_grads(params, batch.text, batch.video, config.loss)
            state.step += 1
            if not np.isfinite(result.value):
                raise TrainingAborted(
                    f"non-finite loss at step {state.step} (epoch {e + 1}): "
                    f"itrl={result.itrl.tolist()} dcl={result.dcl}"
                )
            opt.step(params.tensors, state.acc, grads, lr)
            state.rows.append({
                "step": state.step, "epoch": e + 1, "itrl_total": result.mtrl,
                "dcl": result.dcl, "gates": result.bitmask, "lr": lr,
            })
        state.epoch = e + 1
        val = _validate(params, dataset, config)
        state.rows.append({"step": state.step, "epoch": state.epoch, "lr": config.lr_at(state.epoch), "val_mAP": val})
        if val > state.best_val_map:
            state.best_val_map = val
            state.best_epoch = state.epoch
            state.since_improvement = 0
            best = params.copy()
            if out is not None:
                _checkpoint(out, state, state.epoch)
        else:
            state.since_improvement += 1
            if state.since_improvement >= config.patience:
                state.stopped = True
        log.info("epoch %d val mAP %.4f (best %.4f @ %d)", state.epoch, val, state.best_val_map, state.best_epoch)
        if out is not None:
            save_state(out / "state.bin", state, config)
    if out is not None:
        write_log(out / "train_log.csv", state.rows)
    return TrainResult(best, state.best_val_map, state.best_epoch, state)


def _checkpoint(out: Path, state: TrainingState, epoch: int) -> None:
    name = f"ckpt_epoch{epoch:04d}.bin"
    save_params(out / name, state.params, {"epoch": epoch, "val_mAP": state.best_val_map})
    (out / "best").write_text(name + "\n", encoding="utf-8")


def resume_training(dataset: PairDataset, out_dir, max_epochs: int | None = None) -> TrainResult:
    state, config = load_state(Path(out_dir) / "state.bin")
    return train(dataset, config, out_dir, resume=state, max_epochs=max_epochs)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def _kink_signature(spaces: np.ndarray, result: LossResult, loss_cfg: LossConfig):
    """Discrete choices the loss makes; a change between x-h and x+h means a kink."""
    parts = [result.included.tobytes()]
    for s in spaces:
        neg = hardest_negatives(s)
        rows = np.arange(s.shape[0])
        active = (loss_cfg.margin + s[rows, neg] - s[rows, rows]) > 0.0
        parts += [neg.tobytes(), active.tobytes()]
    if loss_cfg.dcl_mode != "off":
        k, b = spaces.shape[0], spaces.shape[1]
        mask = 1.0 - np.eye(b) if loss_cfg.dcl_mode == "partial" else np.ones((b, b))
        centered = []
        for s in spaces:
            n = mask.sum(axis=1, keepdims=True)
            centered.append((s - (s * mask).sum(axis=1, keepdims=True) / n) * mask)
        for m in range(k):
            for n_ in range(m + 1, k):
                parts.append(np.sign((centered[m] * centered[n_]).sum(axis=1)).tobytes())
    return b"".join(parts)


def random_instance(seed: int, text_dims=(5, 7), video_dims=(4, 6, 5), d=8, b=6, topology="lpd"):
    rng = np.random.Generator(np.random.PCG64(seed))
    params = ModelParams.init(text_dims, video_dims, d, topology, seed=int(rng.integers(2**31)))
    # wider weights push tanh out of its linear regime so curvature is exercised
    for v in params.tensors.values():
        v *= 2.0
    xt = [rng.standard_normal((b, di)) for di in text_dims]
    xv = [rng.standard_normal((b, dj)) for dj in video_dims]
    return params, xt, xv


def gradcheck(
    loss_cfg: LossConfig,
    topology: str = "lpd",
    seed: int = 0,
    text_dims=(5, 7),
    video_dims=(4, 6, 5),
    d: int = 8,
    b: int = 6,
    step: float = 1e-5,
    max_restarts: int = 50,
) -> tuple[list[GradCheckReport], int]:
    """Analytic vs central-difference gradients of the total loss.

    Instances where a perturbation crosses a kink (argmax swap, hinge, gate
    flip, sign change of a correlation) are discarded and redrawn. Returns the
    worst entry per parameter tensor and the number of redraws.
    """
    loss_cfg.validate(b)
    for restart in range(max_restarts + 1):
        params, xt, xv = random_instance(seed * 1000 + restart, text_dims, video_dims, d, b, topology)
        sims, emb, cache = forward_spaces(xt, xv, params)
        base = total_loss(sims.spaces, emb.space_anchors(topology), loss_cfg)
        analytic = backward_spaces(cache, base.grad, params)
        sig = _kink_signature(sims.spaces, base, loss_cfg)
        crossed = False

        def f(tensors):
            nonlocal crossed
            sp, em, _ = forward_spaces(xt, xv, params)
            res = total_loss(sp.spaces, em.space_anchors(topology), loss_cfg)
            if _kink_signature(sp.spaces, res, loss_cfg) != sig:
                crossed = True
            return res.value

        numeric = finite_difference_gradient(f, params.tensors, step)
        if crossed:
            continue
        reports = []
        for name, a in analytic.items():
            nm = numeric[name]
            errs = np.array([rel_error(x, y) for x, y in zip(a.ravel(), nm.ravel())])
            errs[~np.isfinite(nm.ravel())] = np.inf
            k = int(errs.argmax())
            reports.append(GradCheckReport(name, float(a.ravel()[k]), float(nm.ravel()[k]), float(errs[k])))
        return reports, restart
    raise RuntimeError(f"no kink-free instance found in {max_restarts} redraws")
