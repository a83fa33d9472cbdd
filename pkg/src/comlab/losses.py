"""Training objectives.

Every loss takes a :class:`Batch` and returns a scalar tape node holding the
batch mean of the per-sample objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .models import CometMlpParams, Params, TwinNetParams, model_jvp, model_outputs
from .projection import projected_sdot

NOISE_AMPLITUDE = 0.1


@dataclass
class Batch:
    s: np.ndarray  # (B, n_s)
    sdot: np.ndarray | None = None  # (B, n_s) targets
    F: np.ndarray | None = None  # (B, n_f)

    def __len__(self):
        return len(self.s)


@dataclass(frozen=True)
class LossWeights:
    w0: float = 1.0
    w1_comet: float = 1.0
    w2_comet: float = 1.0
    w1_ortho: float | None = None  # None -> 1/r^2
    w2_ortho: float | None = None

    def __post_init__(self):
        for name in ("w0", "w1_comet", "w2_comet", "w1_ortho", "w2_ortho"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise ValueError(f"{name} must be >= 0, got {val}")

    def ortho(self, rank: int) -> tuple[float, float]:
        default = 1.0 / rank**2
        w1 = default if self.w1_ortho is None else self.w1_ortho
        w2 = default if self.w2_ortho is None else self.w2_ortho
        return w1, w2


def sample_constraint_noise(rng: np.random.Generator, n_s: int, size: int | None = None,
                            amplitude: float = NOISE_AMPLITUDE) -> np.ndarray:
    """One-sided uniform noise on ``[0, amplitude)``; ``size`` rows if given."""
    shape = (n_s,) if size is None else (size, n_s)
    return amplitude * rng.random(shape)


def _mean(node: Node, n: int) -> Node:
    return node / n


def ortho_residual(tape: Tape, params: Params, s, F, rng, *, activation="silu",
                   amplitude: float = NOISE_AMPLITUDE) -> Node:
    """Mean over the batch of ``sum_i (grad c_i . sdot0)^2`` at perturbed states."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    n_batch, n_s = s.shape
    s_tilde = s + sample_constraint_noise(rng, n_s, n_batch, amplitude)
    sdot0, rates = model_jvp(tape, params, s_tilde, F, activation=activation)
    if rates.shape[1] == 0:
        return tape.constant(0.0)
    return _mean(tape.apply("sqnorm", [rates]), n_batch)


def semi_orthogonality_penalty(tape: Tape, hidden, r: int, w1: float | None = None,
                               w2: float | None = None) -> Node:
    """``sum_l w1 |S^T S - I|_F^2 + w2 |D^T D - I|_F^2`` (weights default 1/r^2)."""
    w1 = 1.0 / r**2 if w1 is None else w1
    w2 = 1.0 / r**2 if w2 is None else w2
    total = tape.constant(0.0)
    for layer in hidden:
        S, D = tape.lift(layer.S), tape.lift(layer.D)
        total = total + w1 * tape.apply("sqnorm", [tape.apply("identity_minus", [S.T @ S])])
        total = total + w2 * tape.apply("sqnorm", [tape.apply("identity_minus", [D.T @ D])])
    return total


def phase1_terms(tape: Tape, params: TwinNetParams, batch: Batch, rng, weights=LossWeights(),
                 *, activation="silu", amplitude=NOISE_AMPLITUDE) -> tuple[Node, Node]:
    rank = np.shape(params.hidden[0].v)[0] if params.hidden else 1
    w1, w2 = weights.ortho(rank)
    ortho = ortho_residual(tape, params, batch.s, batch.F, rng, activation=activation, amplitude=amplitude)
    penalty = semi_orthogonality_penalty(tape, params.hidden, rank, w1, w2)
    return ortho, penalty


def phase1_loss(tape: Tape, params: TwinNetParams, batch: Batch, rng, weights=LossWeights(),
                *, activation="silu", amplitude=NOISE_AMPLITUDE) -> Node:
    ortho, penalty = phase1_terms(tape, params, batch, rng, weights, activation=activation,
                                  amplitude=amplitude)
    return ortho + penalty


def _sq_error(tape: Tape, pred: Node, target: np.ndarray) -> Node:
    return _mean(tape.apply("sqnorm", [pred - target]), len(target))


def phase2_terms(tape: Tape, params: Params, batch: Batch, *, activation="silu") -> tuple[Node, Node]:
    """``(mean |sdot - target|^2, mean |sdot0 - target|^2)``."""
    if batch.sdot is None:
        raise ValueError("phase2 loss needs target derivatives")
    sdot0, _, J = model_outputs(tape, params, batch.s, batch.F, activation=activation)
    sdot = projected_sdot(tape, J, sdot0)
    return _sq_error(tape, sdot, batch.sdot), _sq_error(tape, sdot0, batch.sdot)


def phase2_loss(tape: Tape, params: Params, batch: Batch, weights=LossWeights(), *,
                activation="silu") -> Node:
    resid, anchor = phase2_terms(tape, params, batch, activation=activation)
    return resid + weights.w0 * anchor


def comet_terms(tape: Tape, params: CometMlpParams, batch: Batch, rng, weights=LossWeights(), *,
                activation="silu", amplitude=NOISE_AMPLITUDE) -> tuple[Node, Node, Node]:
    resid, anchor = phase2_terms(tape, params, batch, activation=activation)
    ortho = ortho_residual(tape, params, batch.s, batch.F, rng, activation=activation, amplitude=amplitude)
    return resid, anchor, ortho


def comet_loss(tape: Tape, params: CometMlpParams, batch: Batch, rng, weights=LossWeights(), *,
               activation="silu", amplitude=NOISE_AMPLITUDE) -> Node:
    resid, anchor, ortho = comet_terms(tape, params, batch, rng, weights, activation=activation,
                                       amplitude=amplitude)
    return resid + weights.w1_comet * anchor + weights.w2_comet * ortho


def residual_L1(params: Params, batch: Batch, *, activation="silu") -> float:
    """Mean ``|sdot - target|^2`` of the projected derivative (evaluation only)."""
    tape = Tape()
    resid, _ = phase2_terms(tape, params, batch, activation=activation)
    return float(resid.value)
