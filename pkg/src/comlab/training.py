"""Adam, cosine annealing and the training drivers.

``train_meta_comet`` runs the two phases: phase 1 fits the low-rank factors
under the perpendicularity and semi-orthogonality objective, phase 2 freezes
the factors, redraws everything else and fits the data.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tape, backward
from .losses import Batch, LossWeights, comet_terms, phase1_loss, phase2_terms
from .models import NetworkConfig, Params, TwinNetParams, bind, init_params, reinit_for_phase2
from .seeding import derive_seed, substream
from .systems import Dataset

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_phase1: int = 1000
    epochs_phase2: int = 1000
    batch_size: int = 512
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int | None = 100
    val_fraction: float = 0.2
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min ({self.lr_min}) must be <= lr_max ({self.lr_max})")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 (or None to disable early stopping)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("epoch counts must be >= 0")


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float) -> float:
    if total_epochs < 2:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Params) -> OptimizerState:
        trainable = {k: a for k, a in params.named().items() if k not in params.frozen}
        return cls({k: np.zeros_like(a) for k, a in trainable.items()},
                   {k: np.zeros_like(a) for k, a in trainable.items()})


def adam_step(state: OptimizerState, params: Params, grads: dict[str, np.ndarray], lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[Params, OptimizerState]:
    """Bias-corrected Adam; frozen arrays pass through untouched."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    m, v = dict(state.m), dict(state.v)

    def update(name, arr):
        if name in params.frozen or name not in grads:
            return arr
        g = grads[name]
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * g * g
        return arr - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)

    return params.map(update), OptimizerState(m, v, step)


# --------------------------------------------------------------------------
# data handling


def split_dataset(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint random train/validation split, fixed by ``seed``."""
    n = len(ds)
    perm = substream(seed, "split").permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx), ds.subset(val_idx)


def _batch(ds: Dataset, idx=None) -> Batch:
    if idx is None:
        return Batch(ds.s, ds.sdot, ds.F if ds.n_f else None)
    return Batch(ds.s[idx], ds.sdot[idx], ds.F[idx] if ds.n_f else None)


def _minibatches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def params_digest(params: Params, names=None) -> str:
    h = hashlib.sha256()
    for k, a in params.named().items():
        if names is None or k in names:
            h.update(k.encode())
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# history and early stopping


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float = float("nan")
    train_l1: float = float("nan")
    val_l1: float = float("nan")


@dataclass
class History:
    phase: str
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_loss(self) -> list[float]:
        return [r.val_loss for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "lr", "train_loss", "val_loss"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss)])


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a new best validation loss."""

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: int | None = None

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record ``val_loss``; True when training should stop after this epoch."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
        if self.patience is None or self.best_epoch is None:
            return False
        return epoch - self.best_epoch >= self.patience


# --------------------------------------------------------------------------
# drivers


def _check_finite(loss: float, epoch: int, phase: str) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{phase}: non-finite loss at epoch {epoch}")


def _run_epoch(params, opt, config: TrainConfig, ds: Dataset, lr: float, rng, loss_fn: Callable,
               epoch: int, phase: str) -> tuple[Params, OptimizerState, float, float]:
    total, total_l1, count = 0.0, 0.0, 0
    betas = (config.adam_beta1, config.adam_beta2)
    for idx in _minibatches(len(ds), config.batch_size, rng):
        tape = Tape()
        bound, leaves = bind(tape, params)
        loss, l1 = loss_fn(tape, bound, _batch(ds, idx))
        _check_finite(float(loss.value), epoch, phase)
        adj = backward(tape, loss, wrt=list(leaves.values()))
        grads = {name: adj[node.id] for name, node in leaves.items()}
        params, opt = adam_step(opt, params, grads, lr, betas, config.adam_eps)
        total += float(loss.value) * len(idx)
        total_l1 += l1 * len(idx)
        count += len(idx)
    return params, opt, total / count, total_l1 / count


def _eval_phase2(params, ds: Dataset, weights: LossWeights, activation: str,
                 batch_size: int = 4096) -> tuple[float, float]:
    total, total_l1 = 0.0, 0.0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(len(ds), start + batch_size))
        tape = Tape()
        resid, anchor = phase2_terms(tape, params, _batch(ds, idx), activation=activation)
        total += float((resid + weights.w0 * anchor).value) * len(idx)
        total_l1 += float(resid.value) * len(idx)
    return total / len(ds), total_l1 / len(ds)


def train_phase1(config: TrainConfig, net_config: NetworkConfig, dataset: Dataset, seed: int,
                 *, callback: Callable | None = None) -> tuple[TwinNetParams, History]:
    """Initialize and fit every parameter on the phase-1 objective."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    train, _ = split_dataset(dataset, config.val_fraction, seed)
    params = init_params(net_config, "meta-comet", derive_seed(seed, "init"))
    opt = OptimizerState.for_params(params)
    shuffle = substream(seed, "shuffle-phase1")
    noise = substream(seed, "constraint-noise")
    act = net_config.activation
    history = History("phase1")

    def loss_fn(tape, bound, batch):
        return phase1_loss(tape, bound, batch, noise, config.weights, activation=act), float("nan")

    for epoch in range(config.epochs_phase1):
        lr = cosine_lr(epoch, config.epochs_phase1, config.lr_max, config.lr_min)
        params, opt, loss, _ = _run_epoch(params, opt, config, train, lr, shuffle, loss_fn,
                                          epoch, "phase1")
        history.records.append(EpochRecord(epoch, lr, loss))
        if callback:
            callback(epoch, params, history)
    return params, history


def _fit_supervised(params, config: TrainConfig, dataset: Dataset, seed: int, epochs: int,
                    phase: str, loss_fn: Callable, activation: str, callback=None):
    train, val = split_dataset(dataset, config.val_fraction, seed)
    opt = OptimizerState.for_params(params)
    shuffle = substream(seed, f"shuffle-{phase}")
    history = History(phase)
    stopper = EarlyStopping(config.patience)
    best = params
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, config.lr_max, config.lr_min)
        params, opt, loss, l1 = _run_epoch(params, opt, config, train, lr, shuffle, loss_fn,
                                           epoch, phase)
        val_loss, val_l1 = _eval_phase2(params, val, config.weights, activation)
        history.records.append(EpochRecord(epoch, lr, loss, val_loss, l1, val_l1))
        if val_loss < stopper.best:
            best = params
        stop = stopper.update(epoch, val_loss)
        if callback:
            callback(epoch, params, history)
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    return best, history


def train_phase2(config: TrainConfig, params: TwinNetParams, dataset: Dataset, seed: int,
                 *, activation: str = "silu", callback: Callable | None = None
                 ) -> tuple[TwinNetParams, History]:
    """Freeze ``S``/``D``, redraw the rest, fit the data; returns the best-validation params."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    params = reinit_for_phase2(params, derive_seed(seed, "reinit"))
    weights = config.weights

    def loss_fn(tape, bound, batch):
        resid, anchor = phase2_terms(tape, bound, batch, activation=activation)
        return resid + weights.w0 * anchor, float(resid.value)

    return _fit_supervised(params, config, dataset, seed, config.epochs_phase2, "phase2",
                           loss_fn, activation, callback)


@dataclass
class TrainResult:
    params: Params
    phase1: History | None
    phase2: History


def train_meta_comet(config: TrainConfig, net_config: NetworkConfig, dataset: Dataset,
                     seed: int | None = None) -> TrainResult:
    seed = config.seed if seed is None else seed
    _check_dataset(net_config, dataset)
    p1, h1 = train_phase1(config, net_config, dataset, seed)
    p2, h2 = train_phase2(config, p1, dataset, seed, activation=net_config.activation)
    return TrainResult(p2, h1, h2)


def train_comet(config: TrainConfig, net_config: NetworkConfig, dataset: Dataset,
                seed: int | None = None) -> TrainResult:
    """Single-phase baseline on the three-term loss.

    Runs ``epochs_phase1 + epochs_phase2`` epochs so both models get the same
    epoch budget.
    """
    seed = config.seed if seed is None else seed
    _check_dataset(net_config, dataset)
    params = init_params(net_config, "comet", derive_seed(seed, "init"))
    noise = substream(seed, "constraint-noise")
    weights = config.weights
    act = net_config.activation

    def loss_fn(tape, bound, batch):
        resid, anchor, ortho = comet_terms(tape, bound, batch, noise, weights, activation=act)
        total = resid + weights.w1_comet * anchor + weights.w2_comet * ortho
        return total, float(resid.value)

    epochs = config.epochs_phase1 + config.epochs_phase2
    best, hist = _fit_supervised(params, config, dataset, seed, epochs, "comet", loss_fn, act)
    return TrainResult(best, None, hist)


def _check_dataset(net_config: NetworkConfig, dataset: Dataset) -> None:
    if dataset.n_s != net_config.n_s or dataset.n_f != net_config.n_f:
        raise ValueError(
            f"dataset has n_s={dataset.n_s}, n_f={dataset.n_f}; network expects "
            f"n_s={net_config.n_s}, n_f={net_config.n_f}"
        )
