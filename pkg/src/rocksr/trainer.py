"""Training loop: crop batches, MSE loss, Adam with a half-life schedule,
per-epoch full-image validation and best-epoch checkpoint retention."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .imaging import AugmentSpec, augment, sample_crop_batch
from .io import quantize
from .metrics import aggregate, psnr
from .optim import AdamState, adam_step
from .seeding import restore_rng, rng_state, substream
from .tensor import NonFiniteGradientError

log = logging.getLogger(__name__)

DEFAULT_LR = {"sr-resnet": 1e-4, "edsr": 1e-4, "wdsr-a": 1e-3, "wdsr-b": 1e-3}


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointWriteError(OSError):
    pass


@dataclass
class TrainConfig:
    lr_init: float | None = None
    step: float = 100.0
    iterations_per_epoch: int = 1000
    batch: int = 16
    lr_crop: int = 48
    epochs: int = 300
    seed: int = 0
    augment: bool = False
    blur_sigma_range: tuple = (0.0, 1.0)
    noise_variance_range: tuple = (0.0, 0.005)
    subset: str = "bicubic"
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("step", "iterations_per_epoch", "batch", "lr_crop", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr_init is not None and self.lr_init < 0:
            raise ValueError("lr_init must be non-negative")
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        self.noise_variance_range = tuple(self.noise_variance_range)

    @property
    def augment_spec(self):
        return AugmentSpec(self.blur_sigma_range, self.noise_variance_range)

    def for_family(self, family):
        """Copy with ``lr_init`` filled from the family default if unset."""
        if self.lr_init is not None:
            return self
        d = asdict(self)
        d["lr_init"] = DEFAULT_LR[family]
        return TrainConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["blur_sigma_range"] = list(self.blur_sigma_range)
        d["noise_variance_range"] = list(self.noise_variance_range)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_at(config, epoch):
    """``lr_init * 0.5 ** (epoch / step)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if config.lr_init is None:
        raise ValueError("lr_init is unset; call config.for_family(family) first")
    return config.lr_init * 0.5 ** (epoch / config.step)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    epochs: list = field(default_factory=list)  # dicts: epoch, val_psnr, lr, seconds
    step: float = 100.0

    @property
    def val_psnr(self):
        return [e["val_psnr"] for e in self.epochs]

    @property
    def best_epoch(self):
        """Index of the highest validation PSNR; ties go to the earliest epoch."""
        if not self.epochs:
            return None
        return max(range(len(self.epochs)), key=lambda i: (self.epochs[i]["val_psnr"], -i))

    @property
    def best_psnr(self):
        i = self.best_epoch
        return None if i is None else self.epochs[i]["val_psnr"]

    def to_dict(self):
        return {"losses": list(self.losses), "epochs": list(self.epochs), "step": self.step}

    @classmethod
    def from_dict(cls, d):
        return cls(losses=list(d["losses"]), epochs=list(d["epochs"]), step=d["step"])

    def write_csv(self, out_dir):
        out_dir = Path(out_dir)
        with open(out_dir / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            for i, loss in enumerate(self.losses, start=1):
                w.writerow([i, repr(loss)])
        with open(out_dir / "validation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_psnr", "lr", "seconds"])
            for e in self.epochs:
                w.writerow([e["epoch"], repr(e["val_psnr"]), repr(e["lr"]), f"{e['seconds']:.3f}"])


class Trainer:
    """Owns the model, optimiser state, RNG streams and log of one run."""

    def __init__(self, model, train_pairs, config, optimizer=None):
        self.model = model
        self.pairs = train_pairs
        self.config = config.for_family(model.spec.family)
        self.optimizer = AdamState() if optimizer is None else optimizer
        self.log = TrainLog(step=self.config.step)
        self.epoch = 0
        self.crop_rng = substream(self.config.seed, "crops")
        self.aug_rng = substream(self.config.seed, "augment")
        if not train_pairs:
            raise ValueError("training set is empty")

    def iterate(self, lr):
        cfg = self.config
        dtype = self.model.dtype
        lr_b, hr_b, _ = sample_crop_batch(self.pairs, cfg.batch, cfg.lr_crop, self.model.spec.scale,
                                          self.crop_rng, dtype=dtype)
        if cfg.augment:
            spec = cfg.augment_spec
            for k in range(lr_b.shape[0]):
                lr_b[k, 0], _ = augment(lr_b[k, 0], spec, self.aug_rng)
        sr = self.model.forward(lr_b, training=True)
        diff = sr - hr_b
        loss = float(np.mean(diff * diff, dtype=np.float64))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at iteration {len(self.log.losses) + 1}")
        self.model.zero_grad()
        self.model.backward(diff * (2.0 / diff.size))
        try:
            adam_step(self.model.params, self.optimizer, lr)
        except NonFiniteGradientError as exc:
            raise TrainingDivergedError(str(exc)) from exc
        self.log.losses.append(loss)
        return loss

    def train_epoch(self):
        """One epoch of ``iterations_per_epoch`` steps at ``lr_at(epoch)``; returns its losses."""
        lr = lr_at(self.config, self.epoch)
        start = len(self.log.losses)
        for _ in range(self.config.iterations_per_epoch):
            self.iterate(lr)
        self.epoch += 1
        return self.log.losses[start:]

    def state(self):
        return {
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "log": self.log.to_dict(),
            "rng": {"crops": rng_state(self.crop_rng), "augment": rng_state(self.aug_rng)},
        }

    def save(self, path):
        return save_checkpoint(self.model, path, optimizer=self.optimizer, extra=self.state())

    @classmethod
    def resume(cls, path, train_pairs, config=None):
        """Restore model, optimiser, RNG streams and log from a training checkpoint.

        ``config`` may extend ``epochs``; other fields come from the checkpoint.
        """
        ck = load_checkpoint(path)
        extra = ck.extra
        saved = TrainConfig.from_dict(extra["config"])
        if config is not None:
            saved.epochs = config.epochs
        t = cls(ck.model, train_pairs, saved, optimizer=ck.optimizer)
        t.epoch = extra["epoch"]
        t.log = TrainLog.from_dict(extra["log"])
        t.crop_rng = restore_rng(extra["rng"]["crops"])
        t.aug_rng = restore_rng(extra["rng"]["augment"])
        return t


def _predict(model, lr):
    if hasattr(model, "upscale"):
        return model.upscale(lr, clamp=True)
    return np.clip(model(lr), 0.0, 1.0)


def validation_psnrs(model, pairs, quantize_bits=None):
    """Per-image PSNR of clamped full-image predictions against HR."""
    if not pairs:
        raise ValueError("validation set is empty")
    out = []
    for p in pairs:
        sr = _predict(model, p.lr)
        if quantize_bits:
            sr = quantize(sr, quantize_bits) / float((1 << quantize_bits) - 1)
        out.append(psnr(sr, p.hr))
    return out


def validate(model, pairs, quantize_bits=None):
    """Mean PSNR over ``pairs``; ``model`` is a ModelGraph or any ``lr -> sr`` callable."""
    mean, _, _ = aggregate(validation_psnrs(model, pairs, quantize_bits))
    return mean


def _write_best_marker(out_dir, name, epoch, value):
    tmp = out_dir / ".BEST.tmp"
    tmp.write_text(f"{name}\nepoch={epoch}\nval_psnr={value!r}\n")
    os.replace(tmp, out_dir / "BEST")


def fit(model, train_pairs, valid_pairs, config, out_dir, resume_from=None, on_epoch=None):
    """Train for ``config.epochs`` epochs, checkpointing every epoch.

    Returns ``(best_checkpoint_path, TrainLog)``. A ``BEST`` marker file in
    ``out_dir`` names the checkpoint with the highest validation PSNR
    (earliest epoch on ties).
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        trainer = Trainer.resume(resume_from, train_pairs, config)
    else:
        trainer = Trainer(model, train_pairs, config)
    from .config import write_run_config

    write_run_config(out_dir / "config.txt", trainer.model.spec, trainer.config)
    best = trainer.log.best_epoch
    best_path = None if best is None else ckpt_dir / f"epoch_{best + 1:04d}.ckpt"
    while trainer.epoch < trainer.config.epochs:
        t0 = time.perf_counter()
        lr = lr_at(trainer.config, trainer.epoch)
        trainer.train_epoch()
        val = validate(trainer.model, valid_pairs)
        trainer.log.epochs.append({"epoch": trainer.epoch, "val_psnr": val, "lr": lr,
                                   "seconds": time.perf_counter() - t0})
        path = ckpt_dir / f"epoch_{trainer.epoch:04d}.ckpt"
        try:
            trainer.save(path)
        except OSError as exc:
            raise CheckpointWriteError(f"could not write checkpoint {path}: {exc}") from exc
        if trainer.log.best_epoch == len(trainer.log.epochs) - 1:
            best_path = path
            _write_best_marker(out_dir, path.name, trainer.epoch, val)
        trainer.log.write_csv(out_dir)
        log.info("epoch %d: val PSNR %.4f dB (lr %.3g)", trainer.epoch, val, lr)
        if on_epoch is not None:
            on_epoch(trainer)
    return best_path, trainer.log
