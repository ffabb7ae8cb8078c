"""Noise-contrastive training of the energy function.

The loss is the negated binary objective: softplus(E) on data pairs plus
softplus(-E) on noise pairs, so driving data energies negative and noise
energies positive is optimal.  With equal class rates the optimum is the
log-ratio log(P_noise/P_data), which ``bayes_optimal_energy`` computes in
closed form on enumerable domains as a verification oracle.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .energy import EnergyFunction, TabularEnergy
from .errors import DivergenceError, InvalidInputError
from .noise import NoiseSample, TrainingSet
from .textmodel import Example, Vocabulary

LEARNING_RATE_GRID = (1e-5, 2e-5, 3e-5, 5e-5)
EPOCH_GRID = (3, 5)

BIG_ENERGY = 700.0  # stands in for +inf on zero-data-mass entries


@dataclass(frozen=True)
class LabeledBatch:
    positives: tuple[Example, ...]
    negatives: tuple[NoiseSample, ...]

    def __post_init__(self) -> None:
        if not self.positives or not self.negatives:
            raise InvalidInputError("a batch needs at least one positive and one negative")


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings; the learning-rate and epoch grids are the defaults to
    search over, but both fields accept explicit overrides."""

    learning_rate: float = 2e-5
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    schedule: str = "cosine"
    seed: int = 0
    batch_size: int = 64
    heldout_fraction: float = 0.1
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 2:
            raise InvalidInputError("learning_rate >= 0, epochs >= 1, batch_size >= 2 required")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise InvalidInputError("betas must lie in (0, 1)")
        if self.grad_clip <= 0 or self.weight_decay < 0:
            raise InvalidInputError("grad_clip must be positive and weight_decay non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise InvalidInputError("schedule must be 'cosine' or 'constant'")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise InvalidInputError("heldout_fraction must lie in [0, 1)")


def softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def sigmoid(x: float) -> float:
    if x >= 0:
        z = math.exp(-x)
        return 1.0 / (1.0 + z)
    z = math.exp(x)
    return z / (1.0 + z)


def nce_loss(ef: EnergyFunction, batch: LabeledBatch) -> float:
    """Mean softplus(E) over positives plus mean softplus(-E) over negatives."""
    pos = sum(softplus(ef.energy(x.instruction, x.response)) for x in batch.positives)
    neg = sum(softplus(-ef.energy(x.instruction, x.response)) for x in batch.negatives)
    return pos / len(batch.positives) + neg / len(batch.negatives)


def nce_gradient(ef: EnergyFunction, batch: LabeledBatch) -> np.ndarray:
    """Exact flat gradient of ``nce_loss`` with respect to the energy parameters."""
    grad = np.zeros(ef.n_params)
    n_pos = len(batch.positives)
    n_neg = len(batch.negatives)
    for x in batch.positives:
        e = ef.energy(x.instruction, x.response)
        ef.accumulate_grad(x.instruction, x.response, sigmoid(e) / n_pos, grad)
    for x in batch.negatives:
        e = ef.energy(x.instruction, x.response)
        ef.accumulate_grad(x.instruction, x.response, -sigmoid(-e) / n_neg, grad)
    return grad


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    step: int
    train_loss: float
    heldout_loss: float
    grad_norm: float


def save_trace(rows: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "train_loss", "heldout_loss", "grad_norm"])
        for r in rows:
            writer.writerow([r.epoch, r.step, r.train_loss, r.heldout_loss, r.grad_norm])


def _precompute_features(ef: EnergyFunction, items: Sequence) -> list:
    return [ef.features_of(it.instruction, it.response) for it in items]


def _batch_loss_and_grad(
    ef: EnergyFunction,
    pos_feats: list,
    pos_idx: np.ndarray,
    neg_feats: list,
    neg_idx: np.ndarray,
    grad: np.ndarray,
) -> float:
    loss = 0.0
    for i in pos_idx:
        e, ctx = ef.forward(pos_feats[i])
        loss += softplus(e) / len(pos_idx)
        ef.add_grad(ctx, sigmoid(e) / len(pos_idx), grad)
    for i in neg_idx:
        e, ctx = ef.forward(neg_feats[i])
        loss += softplus(-e) / len(neg_idx)
        ef.add_grad(ctx, -sigmoid(-e) / len(neg_idx), grad)
    return loss


def _mean_loss(ef: EnergyFunction, pos_feats: list, pos_idx, neg_feats: list, neg_idx) -> float:
    total_pos = sum(softplus(ef.forward(pos_feats[i])[0]) for i in pos_idx)
    total_neg = sum(softplus(-ef.forward(neg_feats[i])[0]) for i in neg_idx)
    return total_pos / max(len(pos_idx), 1) + total_neg / max(len(neg_idx), 1)


def train_energy(
    ef_init: EnergyFunction,
    data: TrainingSet,
    opt: OptimizerConfig,
) -> tuple[EnergyFunction, list[TraceRow]]:
    """Adam with global-norm clipping, decoupled weight decay and cosine decay.

    Classes are sampled at equal rates per step.  A held-out split tracks
    generalization; the returned parameters are the best held-out snapshot
    (final train snapshot when the split is empty).
    """
    ef = ef_init.clone()
    rng = np.random.default_rng(opt.seed)
    pos_feats = _precompute_features(ef, data.positives)
    neg_feats = _precompute_features(ef, data.negatives)

    pos_order = rng.permutation(len(pos_feats))
    neg_order = rng.permutation(len(neg_feats))
    k_pos = int(len(pos_feats) * opt.heldout_fraction)
    k_neg = int(len(neg_feats) * opt.heldout_fraction)
    held_pos, train_pos = pos_order[:k_pos], pos_order[k_pos:]
    held_neg, train_neg = neg_order[:k_neg], neg_order[k_neg:]
    if len(train_pos) == 0 or len(train_neg) == 0:
        raise InvalidInputError("training split is empty; lower heldout_fraction")
    has_heldout = len(held_pos) > 0 and len(held_neg) > 0

    half = max(opt.batch_size // 2, 1)
    steps_per_epoch = max(
        math.ceil(len(train_pos) / half), math.ceil(len(train_neg) / half)
    )
    total_steps = opt.epochs * steps_per_epoch

    params = ef.param_vector()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    trace: list[TraceRow] = []
    initial_loss: float | None = None
    heldout_loss = math.nan
    best_heldout = math.inf
    best_params = params.copy()
    t = 0

    for epoch in range(opt.epochs):
        order_p = train_pos[rng.permutation(len(train_pos))]
        order_n = train_neg[rng.permutation(len(train_neg))]
        epoch_all_diverged = True
        for step in range(steps_per_epoch):
            take = np.arange(step * half, (step + 1) * half)
            batch_p = order_p.take(take, mode="wrap")
            batch_n = order_n.take(take, mode="wrap")
            grad = np.zeros_like(params)
            loss = _batch_loss_and_grad(ef, pos_feats, batch_p, neg_feats, batch_n, grad)
            if initial_loss is None:
                initial_loss = loss
            if loss <= 10.0 * initial_loss:
                epoch_all_diverged = False
            norm = float(np.linalg.norm(grad))
            if norm > opt.grad_clip:
                grad *= opt.grad_clip / norm
            reported_norm = min(norm, opt.grad_clip)
            if opt.schedule == "cosine":
                lr_t = opt.learning_rate * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))
            else:
                lr_t = opt.learning_rate
            m = opt.beta1 * m + (1.0 - opt.beta1) * grad
            v = opt.beta2 * v + (1.0 - opt.beta2) * grad * grad
            m_hat = m / (1.0 - opt.beta1 ** (t + 1))
            v_hat = v / (1.0 - opt.beta2 ** (t + 1))
            update = m_hat / (np.sqrt(v_hat) + opt.adam_eps) + opt.weight_decay * params
            params = params - lr_t * update
            ef.load_param_vector(params)
            trace.append(TraceRow(epoch, step, loss, heldout_loss, reported_norm))
            t += 1
        if epoch_all_diverged:
            raise DivergenceError(
                f"loss stayed above 10x the initial value ({initial_loss:.4g}) for a full epoch"
            )
        if has_heldout:
            heldout_loss = _mean_loss(ef, pos_feats, held_pos, neg_feats, held_neg)
            if heldout_loss < best_heldout:
                best_heldout = heldout_loss
                best_params = params.copy()
        else:
            best_params = params.copy()
        # the epoch's closing row carries the freshly computed held-out loss
        last = trace[-1]
        trace[-1] = TraceRow(last.epoch, last.step, last.train_loss, heldout_loss, last.grad_norm)
    ef.load_param_vector(best_params)
    return ef, trace


def bayes_optimal_energy(
    vocab: Vocabulary,
    p_data: Mapping[tuple[int, ...], float],
    p_lm: Mapping[tuple[int, ...], float],
) -> TabularEnergy:
    """Closed-form optimum of the contrastive objective: E*(x) = log(P_lm/P_data).

    Plugged into the residual reweighting this reproduces P_data exactly.
    Entries with zero data mass get a large finite energy.
    """
    if set(p_data) != set(p_lm):
        raise InvalidInputError("both tables must cover the same domain")
    table: dict[tuple[int, ...], float] = {}
    for key in p_data:
        pd = float(p_data[key])
        pl = float(p_lm[key])
        if pd < 0 or pl < 0:
            raise InvalidInputError("probabilities must be non-negative")
        if pd > 0 and pl <= 0:
            raise InvalidInputError(f"support violation at {key}: data mass without noise mass")
        if pd == 0:
            table[key] = BIG_ENERGY
        else:
            table[key] = math.log(pl / pd)
    return TabularEnergy(vocab, table)


def kl_divergence(p: Mapping, q: Mapping) -> float:
    """KL(p || q) in nats over the support of p."""
    total = 0.0
    for key, pv in p.items():
        if pv <= 0:
            continue
        qv = q.get(key, 0.0)
        if qv <= 0:
            return math.inf
        total += pv * math.log(pv / qv)
    return total
