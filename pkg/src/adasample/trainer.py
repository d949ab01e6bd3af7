"""Training loop: batch construction, mining, weighted SGD with momentum.

One step works on n distinct classes. For each class an anchor patch is
drawn uniformly and a positive is drawn among the remaining patches with
probability proportional to descriptor distance raised to the adaptive
exponent; the chosen pairs get inverse-distance weights normalized to
batch mean 1. Hardest-in-batch negatives complete the triplets and the
hinge triplet loss is backpropagated as sum_i w_i * grad(loss_i), followed
by classical momentum SGD with weight decay:

    g = sum_i w_i grad(loss_i) + weight_decay * theta
    v = momentum * v + g
    theta = theta - lr * v

The very first step samples positives uniformly because the loss average
has no observations yet; the tracker initializes from that step's mean
loss. The learning rate is divided by 10 at the end of each configured
drop epoch. Runs are reproducible from (config, dataset, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import sampler as smp
from .data import ClassGroup, Patch, to_input_matrix
from .errors import DatasetError, NumericError
from .metricspace import MetricKind, pairwise_distances
from .miner import NegMode, loss_grads, mine_triplets
from .sampler import LossTracker, SamplerConfig
from .tensornet import Activation, GradEstimate, ModelParams, backward, \
    forward, init_params

METRICS_COLUMNS = ("epoch", "step", "mean_loss", "l_avg", "exponent",
                   "mean_dpos", "mean_dneg", "active_fraction", "lr")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    margin: float = 1.0
    metric: MetricKind = MetricKind.ANGULAR
    # The update sums weighted per-pair gradients, so the step scale grows
    # with batch size; 0.003 is calibrated for the desk-scale defaults
    # (64-pair batches, the small MLP, unit-mean weights).
    lr: float = 0.003
    momentum: float = 0.5
    weight_decay: float = 1e-4
    epochs: int = 12
    lr_drop_epochs: tuple[int, ...] = (4, 8, 10)
    pairs_per_epoch: int = 3200
    neg_mode: NegMode = NegMode.SAME_ROLE
    hidden_dims: tuple[int, ...] = (64,)
    descriptor_dim: int = 32
    activation: Activation = Activation.TANH
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch size must be >= 2, got {self.batch_size}")
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.pairs_per_epoch < self.batch_size:
            raise ValueError("pairs_per_epoch must be >= batch_size")
        if self.descriptor_dim < 2:
            raise ValueError("descriptor dim must be >= 2")
        self.sampler.validate()

    def layer_dims(self, input_dim: int) -> list[int]:
        return [input_dim, *self.hidden_dims, self.descriptor_dim]


@dataclass
class TrainState:
    params: ModelParams
    momentum_buffers: GradEstimate
    loss_tracker: LossTracker
    epoch: int = 0
    step: int = 0
    lr: float = 0.0


@dataclass
class BatchDiagnostics:
    class_ids: list[int]
    draws: list[smp.PositiveDraw]
    candidate_distances: list[np.ndarray]
    candidate_probs: list[np.ndarray]
    exponent: float
    weight_clamped: bool


BatchItem = tuple[Patch, Patch, float]


def build_batch(dataset: list[ClassGroup], params: ModelParams,
                tracker: LossTracker, config: TrainConfig,
                rng: np.random.Generator,
                class_inputs: list[np.ndarray] | None = None
                ) -> tuple[list[BatchItem], BatchDiagnostics]:
    """Select n distinct classes and one weighted (anchor, positive) each.

    ``class_inputs`` may hold precomputed per-class input matrices (as from
    :func:`adasample.data.to_input_matrix`) to avoid renormalizing patches
    every step.
    """
    n = config.batch_size
    if len(dataset) < n:
        raise DatasetError(f"dataset has {len(dataset)} classes but the batch "
                           f"needs {n}")
    small = [g.class_id for g in dataset if len(g.patches) < 2]
    if small:
        raise DatasetError(f"classes with fewer than 2 patches: {small[:5]}")
    exponent = smp.adaptive_exponent(tracker, config.sampler) \
        if tracker.initialized else 0.0
    chosen_classes = rng.choice(len(dataset), size=n, replace=False)

    # One batched descriptor extraction over every patch of the selected
    # classes; per-class rows are sliced out afterwards.
    groups = [dataset[int(ci)] for ci in chosen_classes]
    if class_inputs is None:
        flat_inputs = to_input_matrix([p for g in groups for p in g.patches])
    else:
        flat_inputs = np.vstack([class_inputs[int(ci)]
                                 for ci in chosen_classes])
    descs, _ = forward(params, flat_inputs)
    offsets = np.cumsum([0] + [len(g.patches) for g in groups])

    anchors: list[Patch] = []
    positives: list[Patch] = []
    draws: list[smp.PositiveDraw] = []
    all_dists: list[np.ndarray] = []
    all_probs: list[np.ndarray] = []
    chosen_d = np.empty(n)
    for slot, group in enumerate(groups):
        k = len(group.patches)
        rows = descs[offsets[slot]:offsets[slot + 1]]
        a_idx = int(rng.integers(k))
        cand_idx = [i for i in range(k) if i != a_idx]
        dists = pairwise_distances(rows[cand_idx], rows[a_idx:a_idx + 1],
                                   config.metric)[:, 0]
        probs = smp.positive_probs(dists, exponent)
        pick = smp.categorical_sample(probs, rng)
        p_idx = cand_idx[pick]
        anchors.append(group.patches[a_idx])
        positives.append(group.patches[p_idx])
        draws.append(smp.PositiveDraw(anchor_index=a_idx, chosen_index=p_idx,
                                      probability_used=float(probs[pick]),
                                      weight=1.0))
        all_dists.append(dists)
        all_probs.append(probs)
        chosen_d[slot] = dists[pick]

    weights, clamped = smp.reweights(chosen_d)
    draws = [replace(d, weight=float(w)) for d, w in zip(draws, weights)]
    batch = [(a, p, float(w)) for a, p, w in zip(anchors, positives, weights)]
    diag = BatchDiagnostics(class_ids=[g.class_id for g in groups],
                            draws=draws, candidate_distances=all_dists,
                            candidate_probs=all_probs, exponent=exponent,
                            weight_clamped=clamped)
    return batch, diag


def train_step(state: TrainState, batch: list[BatchItem],
               config: TrainConfig) -> tuple[TrainState, dict]:
    """One update: forward, mine, weighted hinge loss, momentum SGD."""
    n = len(batch)
    anchors = [item[0] for item in batch]
    positives = [item[1] for item in batch]
    weights = np.array([item[2] for item in batch])

    inputs = to_input_matrix(anchors + positives)
    descs, cache = forward(state.params, inputs)
    desc_a, desc_p = descs[:n], descs[n:]

    mined = mine_triplets(desc_a, desc_p, config.metric, config.margin,
                          config.neg_mode)
    losses = np.array([t.loss for t in mined])
    mean_loss = float(losses.mean())
    if not np.isfinite(mean_loss):
        raise NumericError(f"non-finite batch loss at step {state.step}: "
                           f"{losses}")

    grad_a, grad_p = loss_grads(desc_a, desc_p, mined, config.metric, weights)
    param_grads, _ = backward(state.params, cache,
                              np.vstack([grad_a, grad_p]))

    new_layers = []
    new_buffers = []
    for theta, g, v in zip(state.params.layers, param_grads.layers,
                           state.momentum_buffers.layers):
        g_total = g + config.weight_decay * theta
        v_new = config.momentum * v + g_total
        theta_new = theta - state.lr * v_new
        if not np.all(np.isfinite(theta_new)):
            raise NumericError(f"non-finite parameters at step {state.step}")
        new_layers.append(theta_new)
        new_buffers.append(v_new)

    tracker = smp.update_loss_avg(state.loss_tracker, mean_loss, config.sampler)
    new_state = TrainState(
        params=ModelParams(new_layers, state.params.activation),
        momentum_buffers=GradEstimate(new_buffers),
        loss_tracker=tracker,
        epoch=state.epoch,
        step=state.step + 1,
        lr=state.lr,
    )
    metrics = {
        "mean_loss": mean_loss,
        "l_avg": tracker.l_avg,
        "mean_dpos": float(np.mean([t.d_pos for t in mined])),
        "mean_dneg": float(np.mean([t.d_neg for t in mined])),
        "active_fraction": float(np.mean(losses > 0)),
        "lr": state.lr,
    }
    return new_state, metrics


def effective_lr(base_lr: float, epoch: int,
                 drop_epochs: Iterable[int]) -> float:
    """Learning rate in effect during a 1-based epoch, with drops applied at
    the end of each listed epoch."""
    drops = sum(1 for d in drop_epochs if d < epoch)
    return base_lr / (10.0 ** drops)


def init_state(config: TrainConfig, input_dim: int) -> TrainState:
    params = init_params(config.layer_dims(input_dim), config.seed,
                         config.activation)
    return TrainState(params=params,
                      momentum_buffers=GradEstimate.zeros_like(params),
                      loss_tracker=LossTracker(),
                      epoch=0, step=0, lr=config.lr)


def train(config: TrainConfig, dataset: list[ClassGroup],
          epoch_callback: Callable[[int, TrainState], None] | None = None
          ) -> tuple[ModelParams, list[dict]]:
    """Run the full schedule; returns final params and one metrics row per
    step (columns per ``METRICS_COLUMNS``)."""
    config.validate()
    if not dataset:
        raise DatasetError("dataset is empty")
    input_dim = dataset[0].patches[0].size ** 2
    state = init_state(config, input_dim)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    log: list[dict] = []
    steps_per_epoch = max(1, config.pairs_per_epoch // config.batch_size)
    class_inputs = [to_input_matrix(g.patches) for g in dataset]
    try:
        for epoch in range(1, config.epochs + 1):
            state.epoch = epoch
            state.lr = effective_lr(config.lr, epoch, config.lr_drop_epochs)
            for _ in range(steps_per_epoch):
                batch, diag = build_batch(dataset, state.params,
                                          state.loss_tracker, config, rng,
                                          class_inputs)
                state, metrics = train_step(state, batch, config)
                log.append({"epoch": epoch, "step": state.step,
                            "mean_loss": metrics["mean_loss"],
                            "l_avg": metrics["l_avg"],
                            "exponent": diag.exponent,
                            "mean_dpos": metrics["mean_dpos"],
                            "mean_dneg": metrics["mean_dneg"],
                            "active_fraction": metrics["active_fraction"],
                            "lr": metrics["lr"]})
            if epoch_callback is not None:
                epoch_callback(epoch, state)
    except NumericError as exc:
        exc.partial_log = log  # lets callers keep what completed
        raise
    return state.params, log
