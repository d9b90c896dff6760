from pathlib import Path

import numpy as np
import pytest

import lpd.trainer as trainer
from lpd.feature_store import SyntheticConfig, generate_synthetic
from lpd.losses import LossConfig
from lpd.model import ModelParams, load_params
from lpd.trainer import (
    RMSProp,
    TrainingAborted,
    TrainingConfig,
    load_state,
    resume_training,
    save_state,
    train,
)

SMALL = SyntheticConfig(
    queries=4, distractors=80, val_queries=3, val_distractors=60, train_videos=96, seed=3
)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SMALL)


def cfg(**kw):
    base = dict(batch_size=16, lr=2e-3, d=8, max_epochs=4, val_depth=100, seed=1)
    base.update(kw)
    return TrainingConfig(**base)


def dir_bytes(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "state.bin"}


class TestConfig:
    def test_lr_schedule(self):
        c = TrainingConfig()
        for e in range(300):
            assert abs(c.lr_at(e) - 1e-4 * 0.99**e) <= 1e-15

    def test_defaults(self):
        c = TrainingConfig()
        assert (c.batch_size, c.lr, c.lr_decay, c.patience, c.loss.margin) == (128, 1e-4, 0.99, 10, 0.2)

    @pytest.mark.parametrize("kw", [{"lr_decay": 0.0}, {"lr_decay": 1.5}, {"patience": 0}, {"batch_size": 3}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainingConfig(**kw).validate()

    def test_dict_round_trip(self):
        c = TrainingConfig(lr=0.5, loss=LossConfig(dcl_mode="full"))
        assert TrainingConfig.from_dict(c.to_dict()) == c


def test_rmsprop_update():
    t = {"w": np.array([1.0, -2.0])}
    acc = {"w": np.zeros(2)}
    g = {"w": np.array([0.5, 0.0])}
    RMSProp(0.9, 1e-8).step(t, acc, g, 0.1)
    np.testing.assert_allclose(acc["w"], [0.025, 0.0])
    np.testing.assert_allclose(t["w"], [1.0 - 0.1 * 0.5 / np.sqrt(0.025 + 1e-8), -2.0])


def test_zero_epochs(small):
    result = train(small, cfg(max_epochs=0))
    assert result.rows == []
    init = ModelParams.init(small.text_dims, small.video_dims, 8, "lpd", 1)
    for k, v in init.tensors.items():
        assert np.array_equal(result.best_params.tensors[k], v)


def test_zero_loss_leaves_params(small):
    # with b=2 every min-max column is {0, 1}, so all spaces share one entropy
    # and the strict gate excludes them all
    c = cfg(batch_size=2, max_epochs=1, loss=LossConfig(dcl_mode="off", gate_comparison="gt"))
    result = train(small, c)
    init = ModelParams.init(small.text_dims, small.video_dims, 8, "lpd", 1)
    for k, v in init.tensors.items():
        assert np.array_equal(result.state.params.tensors[k], v), k
    steps = [r for r in result.rows if "itrl_total" in r]
    assert steps and all(r["itrl_total"] == 0.0 and r["gates"] == 0 for r in steps)


def test_deterministic_outputs(small, tmp_path):
    a = train(small, cfg(), tmp_path / "a")
    train(small, cfg(), tmp_path / "b")
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")
    assert a.rows[0]["epoch"] == 0 and "val_mAP" in a.rows[0]


def test_log_columns(small, tmp_path):
    train(small, cfg(max_epochs=2), tmp_path)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,itrl_total,dcl,gates,lr,val_mAP"
    epoch_rows = [l for l in lines[1:] if l.split(",")[-1]]
    assert len(epoch_rows) == 3


def test_resume_bit_exact(small, tmp_path):
    train(small, cfg(max_epochs=5), tmp_path / "full")
    train(small, cfg(max_epochs=5), tmp_path / "part", max_epochs=2)
    state, _ = load_state(tmp_path / "part" / "state.bin")
    assert state.epoch == 2
    resume_training(small, tmp_path / "part")
    assert dir_bytes(tmp_path / "full") == dir_bytes(tmp_path / "part")
    full, _ = load_state(tmp_path / "full" / "state.bin")
    part, _ = load_state(tmp_path / "part" / "state.bin")
    for k in full.acc:
        assert np.array_equal(full.acc[k], part.acc[k])


def test_state_round_trip(small, tmp_path):
    result = train(small, cfg(max_epochs=1))
    save_state(tmp_path / "s.bin", result.state, cfg(max_epochs=1))
    state, config = load_state(tmp_path / "s.bin")
    assert config == cfg(max_epochs=1)
    assert state.rows == result.rows and state.step == result.state.step


def test_early_stop_exact(small, tmp_path):
    patience = 2
    result = train(small, cfg(lr=0.05, patience=patience, max_epochs=60), tmp_path)
    curve = result.val_curve()
    best, since, stop_at = -1.0, 0, None
    for epoch, val in curve:
        if val > best:
            best, since = val, 0
        else:
            since += 1
            if since == patience:
                stop_at = epoch
                break
    assert stop_at is not None and curve[-1][0] == stop_at
    assert result.state.stopped
    best_file = (tmp_path / "best").read_text().strip()
    assert best_file == f"ckpt_epoch{result.best_epoch:04d}.bin"
    saved = load_params(tmp_path / best_file)
    for k, v in result.best_params.tensors.items():
        assert np.array_equal(saved.tensors[k], v)


@pytest.mark.parametrize("topology", ["lpd", "parallel-heads"])
def test_parameter_census_constant(small, topology):
    result = train(small, cfg(max_epochs=2, topology=topology))
    init = ModelParams.init(small.text_dims, small.video_dims, 8, topology, 1)
    assert result.state.params.shapes() == init.shapes()
    assert result.state.params.census() == init.census()


def test_improves_and_stops(small):
    result = train(small, cfg(patience=3, max_epochs=80))
    assert result.state.stopped and result.state.epoch < 80
    assert result.best_val_map > result.val_curve()[0][1]


def test_non_finite_loss_aborts(small, monkeypatch):
    real = trainer.total_loss

    def broken(*a, **kw):
        res = real(*a, **kw)
        res.value = float("nan")
        return res

    monkeypatch.setattr(trainer, "total_loss", broken)
    with pytest.raises(TrainingAborted, match="non-finite loss at step 1"):
        train(small, cfg(max_epochs=1))


@pytest.mark.parametrize("topology", ["lpd", "parallel-heads"])
def test_gradcheck_reports(topology):
    reports, _ = trainer.gradcheck(LossConfig(), topology, seed=0)
    assert {r.name for r in reports} == set(ModelParams.init((5, 7), (4, 6, 5), 8, topology).tensors)
    assert max(r.rel_error for r in reports) < 1e-4
