import csv

import numpy as np
import pytest

from rocksr.checkpoint import load_checkpoint
from rocksr.imaging import BicubicUpsampler, make_lr
from rocksr.metrics import psnr
from rocksr.models import ModelSpec, build_model
from rocksr.optim import AdamState, adam_step
from rocksr.seeding import substream
from rocksr.synthetic import grain_stack
from rocksr.tensor import sequential
from rocksr.trainer import (CheckpointWriteError, TrainConfig, Trainer, TrainingDivergedError, TrainLog, fit,
                            lr_at, validate)


@pytest.fixture(scope="module")
def pairs():
    rng = substream(0, "prepare")
    return [make_lr(im, 4, "unknown", rng) for im in grain_stack(4, 64, seed=2)]


def small_model(seed=0, dtype=np.float64):
    return build_model(ModelSpec("wdsr-b", 1, base_filters=8, expansion=2), rng=substream(seed, "init"),
                       dtype=dtype)


def small_config(**kw):
    base = dict(batch=2, lr_crop=8, iterations_per_epoch=4, epochs=3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- schedule

def test_lr_at_examples():
    cfg = TrainConfig(lr_init=1e-3, step=100)
    assert lr_at(cfg, 0) == 1e-3
    assert lr_at(cfg, 100) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(cfg, 300) == pytest.approx(1.25e-4, rel=1e-12)
    assert lr_at(TrainConfig(lr_init=1e-3, step=2.5), 1) == pytest.approx(1e-3 * 0.5 ** 0.4, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(cfg, -1)


def test_lr_strictly_decreasing_and_continuous_in_step():
    cfg = TrainConfig(lr_init=1e-4, step=37.0)
    vals = [lr_at(cfg, e) for e in range(50)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    a = lr_at(TrainConfig(lr_init=1e-4, step=37.0), 10)
    b = lr_at(TrainConfig(lr_init=1e-4, step=37.0 + 1e-9), 10)
    assert abs(a - b) < 1e-15


def test_family_default_lr():
    assert TrainConfig().for_family("wdsr-b").lr_init == 1e-3
    assert TrainConfig().for_family("edsr").lr_init == 1e-4
    assert TrainConfig().for_family("sr-resnet").lr_init == 1e-4
    assert TrainConfig(lr_init=5e-4).for_family("edsr").lr_init == 5e-4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(step=-1)
    d = small_config().to_dict()
    assert TrainConfig.from_dict(d) == small_config()


# ---------------------------------------------------------------- train_epoch

def test_epoch_records_every_iteration(pairs):
    t = Trainer(small_model(), pairs, small_config())
    losses = t.train_epoch()
    assert len(losses) == 4 and t.epoch == 1 and len(t.log.losses) == 4


def test_zero_lr_leaves_parameters(pairs):
    m = small_model()
    before = {k: p.data.copy() for k, p in m.params.items()}
    with sequential():
        Trainer(m, pairs, small_config(lr_init=0.0)).train_epoch()
    for k, p in m.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def run_log(pairs, epochs=2, **kw):
    with sequential():
        t = Trainer(small_model(), pairs, small_config(epochs=epochs, **kw))
        for _ in range(epochs):
            t.train_epoch()
    return t


def test_fixed_seed_reproducible(pairs):
    a = run_log(pairs)
    b = run_log(pairs)
    assert a.log.losses == b.log.losses
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k].data, b.model.params[k].data)
    c = run_log(pairs, seed=4)
    assert c.log.losses != a.log.losses


def test_zero_augmentation_equals_disabled(pairs):
    off = run_log(pairs, augment=False)
    zero = run_log(pairs, augment=True, blur_sigma_range=(0, 0), noise_variance_range=(0, 0))
    assert off.log.losses == zero.log.losses
    on = run_log(pairs, augment=True)
    assert on.log.losses != off.log.losses


def test_single_small_step_decreases_batch_loss(pairs):
    m = small_model()
    rng = np.random.default_rng(0)
    from rocksr.imaging import sample_crop_batch
    lr_b, hr_b, _ = sample_crop_batch(pairs, 2, 8, 4, rng)

    def loss():
        d = m.forward(lr_b, training=True) - hr_b
        return float(np.mean(d * d))

    before = loss()
    d = m.forward(lr_b, training=True) - hr_b
    m.zero_grad()
    m.backward(d * (2.0 / d.size))
    adam_step(m.params, AdamState(), 1e-7)
    assert loss() < before


def test_nan_halts(pairs):
    m = small_model()
    t = Trainer(m, pairs, small_config())
    m.params["head.bias"].data[0] = np.nan
    with pytest.raises(TrainingDivergedError):
        t.iterate(1e-3)


def test_resume_matches_uninterrupted(pairs, tmp_path):
    with sequential():
        full = Trainer(small_model(), pairs, small_config(epochs=4))
        for _ in range(4):
            full.train_epoch()
        part = Trainer(small_model(), pairs, small_config(epochs=4))
        part.train_epoch()
        part.train_epoch()
        part.save(tmp_path / "mid.ckpt")
        resumed = Trainer.resume(tmp_path / "mid.ckpt", pairs)
        resumed.train_epoch()
        resumed.train_epoch()
    assert resumed.log.losses == full.log.losses
    for k in full.model.params:
        np.testing.assert_array_equal(resumed.model.params[k].data, full.model.params[k].data)


# ---------------------------------------------------------------- validate

def test_validate_bicubic_stub(pairs):
    expected = np.mean([psnr(np.clip(BicubicUpsampler(4)(p.lr), 0, 1), p.hr) for p in pairs])
    assert validate(BicubicUpsampler(4), pairs) == expected


def test_validate_clamps_and_errors(pairs):
    assert validate(lambda lr: np.repeat(np.repeat(lr, 4, 0), 4, 1) + 10, pairs) == validate(
        lambda lr: np.ones((lr.shape[0] * 4, lr.shape[1] * 4)), pairs)
    with pytest.raises(ValueError):
        validate(BicubicUpsampler(4), [])


def test_validate_uses_inference_mode(pairs):
    m = build_model(ModelSpec("sr-resnet", 1, base_filters=4), rng=np.random.default_rng(0))
    m.forward(np.random.default_rng(0).random((2, 1, 8, 8)), training=True)
    stats = {n: s.running_mean.copy() for n, s in m.bn_states.items()}
    validate(m, pairs)
    for n, s in m.bn_states.items():
        np.testing.assert_array_equal(s.running_mean, stats[n])


# ---------------------------------------------------------------- TrainLog / fit

def log_with(psnrs):
    return TrainLog(epochs=[{"epoch": i + 1, "val_psnr": v, "lr": 0.1, "seconds": 0.0}
                            for i, v in enumerate(psnrs)])


def test_best_epoch_rules():
    assert log_with([20.0, 21.0, 22.5]).best_epoch == 2
    assert log_with([20.0, 23.0, 23.0, 22.0]).best_epoch == 1
    assert log_with([]).best_epoch is None
    assert log_with([20.0, 23.0, 23.0]).best_psnr == 23.0


def test_fit_five_epochs(pairs, tmp_path):
    cfg = small_config(epochs=5)
    best, tlog = fit(small_model(), pairs[:3], pairs[3:], cfg, tmp_path)
    ckpts = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert ckpts == [f"epoch_{i:04d}.ckpt" for i in range(1, 6)]
    marker = (tmp_path / "BEST").read_text().splitlines()
    assert marker[0] == best.name
    assert tlog.best_psnr == max(tlog.val_psnr)
    ck = load_checkpoint(best)
    assert validate(ck.model, pairs[3:]) == tlog.best_psnr
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["iteration", "loss"] and len(rows) == 1 + 5 * 4
    rows = list(csv.reader(open(tmp_path / "validation.csv")))
    assert rows[0] == ["epoch", "val_psnr", "lr", "seconds"] and len(rows) == 6
    assert (tmp_path / "config.txt").exists()


def test_fit_resume_extends(pairs, tmp_path):
    with sequential():
        fit(small_model(), pairs[:3], pairs[3:], small_config(epochs=2), tmp_path / "a")
        _, resumed = fit(None, pairs[:3], pairs[3:], small_config(epochs=4), tmp_path / "a",
                         resume_from=tmp_path / "a" / "checkpoints" / "epoch_0002.ckpt")
        _, straight = fit(small_model(), pairs[:3], pairs[3:], small_config(epochs=4), tmp_path / "b")
    assert resumed.losses == straight.losses
    assert resumed.val_psnr == straight.val_psnr


def test_fit_nan_keeps_last_good(pairs, tmp_path):
    def poison(trainer):
        trainer.model.params["head.bias"].data[0] = np.nan

    with pytest.raises(TrainingDivergedError):
        fit(small_model(), pairs[:3], pairs[3:], small_config(epochs=3), tmp_path, on_epoch=poison)
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["epoch_0001.ckpt"]
    ck = load_checkpoint(tmp_path / "checkpoints" / "epoch_0001.ckpt")
    assert np.isfinite(ck.model.params["head.bias"].data).all()


def test_fit_checkpoint_failure(pairs, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise OSError("No space left on device")

    monkeypatch.setattr("rocksr.trainer.save_checkpoint", boom)
    with pytest.raises(CheckpointWriteError, match="No space"):
        fit(small_model(), pairs[:3], pairs[3:], small_config(epochs=1), tmp_path)
