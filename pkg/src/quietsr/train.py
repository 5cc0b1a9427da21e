"""L1 objective, Adam, the epoch loop and a finite-difference gradient check."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import qsim
from .dataio import DatasetHandle, batches, epoch_rng
from .errors import NumericalFailure, ValidationError
from .model import ModelConfig, ModelParams, model_bwd, model_fwd
from .params import index_to_name

CLIP_NORM = 10.0


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 25
    seed: int = 0
    grad_check_every: int | None = None
    clip: bool = False
    grad_method: str = "sweep"
    max_steps: int | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValidationError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.grad_method not in qsim.GRAD_METHODS:
            raise ValidationError(f"unknown gradient method {self.grad_method!r}")
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self):
        return {
            "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
            "batch_size": self.batch_size, "epochs": self.epochs, "seed": self.seed,
            "grad_check_every": self.grad_check_every, "clip": self.clip,
            "grad_method": self.grad_method, "max_steps": self.max_steps,
        }


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def l1_loss(sr, hr):
    """Mean absolute error and its cotangent ``sign(sr - hr) / N``."""
    sr = np.asarray(sr, dtype=np.float64)
    hr = np.asarray(hr, dtype=np.float64)
    if sr.shape != hr.shape:
        raise ValidationError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    diff = sr - hr
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def adam_step(flat_params, flat_grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update.  Non-finite gradients are refused untouched."""
    flat_params = np.asarray(flat_params, dtype=np.float64)
    flat_grads = np.asarray(flat_grads, dtype=np.float64)
    if flat_params.shape != flat_grads.shape or flat_params.shape != state.m.shape:
        raise ValidationError("parameter, gradient and optimizer shapes differ")
    if not np.all(np.isfinite(flat_grads)):
        bad = int(np.flatnonzero(~np.isfinite(flat_grads))[0])
        raise NumericalFailure("non-finite gradient, step refused", where=bad)
    if cfg.clip:
        norm = float(np.sqrt(np.sum(flat_grads * flat_grads)))
        if norm > CLIP_NORM:
            flat_grads = flat_grads * (CLIP_NORM / norm)
    b1, b2 = cfg.betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * flat_grads
    v = b2 * state.v + (1 - b2) * flat_grads * flat_grads
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = flat_params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Loss and gradient of the whole network
# ---------------------------------------------------------------------------


def loss_and_grad(params: ModelParams, config: ModelConfig, lr_batch, hr_batch,
                  training=False, rng=None, workers=None, method="sweep"):
    with qsim.gradient_method(method):
        sr, cache = model_fwd(lr_batch, params, config, training, rng, workers)
        loss, cot = l1_loss(sr, hr_batch)
        _, grads = model_bwd(cache, cot, params, config, workers)
    return loss, grads


def loss_only(params, config, lr_batch, hr_batch, workers=None):
    sr, _ = model_fwd(lr_batch, params, config, workers=workers)
    return l1_loss(sr, hr_batch)[0]


@dataclass
class Trainer:
    """Mutable training session: parameters, optimizer state and step counter."""

    config: ModelConfig
    params: ModelParams
    tcfg: TrainConfig
    state: AdamState = None
    step: int = 0
    epoch: int = 0
    workers: int | None = None
    log_path: str | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.zeros(self.params.count())

    def _drop_rng(self):
        return epoch_rng(self.tcfg.seed ^ 0x5EED, self.step)

    def train_step(self, lr_batch, hr_batch):
        loss, grads = loss_and_grad(
            self.params, self.config, lr_batch, hr_batch, training=True,
            rng=self._drop_rng(), workers=self.workers, method=self.tcfg.grad_method,
        )
        try:
            flat, self.state = adam_step(self.params.flatten(), grads.flatten(), self.state,
                                         self.tcfg)
        except NumericalFailure as exc:
            raise NumericalFailure(f"{exc} at step {self.step}", where=self.step) from exc
        self.params = self.params.unflatten(flat)
        self.step += 1
        return loss


def train_epoch(trainer: Trainer, dataset: DatasetHandle):
    """Run one shuffled pass; returns ``{mean_loss, steps, wall_time}``."""
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    tcfg = trainer.tcfg
    t0 = time.perf_counter()
    losses = []
    log = open(trainer.log_path, "a") if trainer.log_path else None
    try:
        for idx in batches(len(dataset), tcfg.batch_size, tcfg.seed, trainer.epoch):
            if tcfg.max_steps is not None and trainer.step >= tcfg.max_steps:
                break
            s0 = time.perf_counter()
            loss = trainer.train_step(dataset.lr[idx], dataset.hr[idx])
            losses.append(loss)
            trainer.history.append(loss)
            if log is not None:
                log.write(json.dumps({
                    "step": trainer.step, "epoch": trainer.epoch, "loss": loss,
                    "lr": tcfg.lr, "wall_ms": round(1000 * (time.perf_counter() - s0), 3),
                }) + "\n")
            if tcfg.grad_check_every and trainer.step % tcfg.grad_check_every == 0:
                report = grad_check(trainer.params, trainer.config,
                                    (dataset.lr[idx[:1]], dataset.hr[idx[:1]]),
                                    coords=32, seed=trainer.step)
                if log is not None:
                    log.write(json.dumps({"step": trainer.step, "grad_check": report}) + "\n")
    finally:
        if log is not None:
            log.close()
    trainer.epoch += 1
    return {
        "mean_loss": float(np.mean(losses)) if losses else float("nan"),
        "steps": len(losses),
        "wall_time": time.perf_counter() - t0,
    }


def fit(trainer: Trainer, dataset: DatasetHandle, on_epoch=None):
    """Loop ``train_epoch`` until ``epochs`` or ``max_steps`` is reached."""
    stats = []
    while trainer.epoch < trainer.tcfg.epochs:
        if trainer.tcfg.max_steps is not None and trainer.step >= trainer.tcfg.max_steps:
            break
        stats.append(train_epoch(trainer, dataset))
        if on_epoch is not None:
            on_epoch(trainer, stats[-1])
    return stats


def predict(params, config, lr_images, batch_size=32, workers=None):
    out = []
    for lo in range(0, len(lr_images), batch_size):
        out.append(model_fwd(lr_images[lo : lo + batch_size], params, config,
                             workers=workers)[0])
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps roundoff on tiny gradients quiet."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(params: ModelParams, config: ModelConfig, sample, coords=200, h=1e-5, seed=0,
               method="sweep", workers=None):
    """Compare the analytic loss gradient to central differences on a random subset.

    Returns a report with ``max_rel_err``, ``worst_param_index`` and its name.
    """
    lr_batch, hr_batch = sample
    _, grads = loss_and_grad(params, config, lr_batch, hr_batch, workers=workers, method=method)
    analytic = grads.flatten()
    flat = params.flatten()
    n = flat.size
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=min(coords, n), replace=False))
    numeric = np.empty(len(chosen))
    for j, i in enumerate(chosen):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        lp = loss_only(params.unflatten(plus), config, lr_batch, hr_batch, workers)
        lm = loss_only(params.unflatten(minus), config, lr_batch, hr_batch, workers)
        numeric[j] = (lp - lm) / (2 * h)
    errs = relative_error(analytic[chosen], numeric)
    worst = int(np.argmax(errs))
    index = int(chosen[worst])
    return {
        "max_rel_err": float(errs[worst]),
        "worst_param_index": index,
        "worst_param_name": _describe(params, index),
        "coords": int(len(chosen)),
        "h": h,
        "method": method,
    }



def _describe(params, index):
    name, where = index_to_name(params, index)
    return f"{name}[{','.join(str(int(i)) for i in where)}]"
