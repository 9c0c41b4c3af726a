"""Minibatch training with length-bucketed batches and per-sample class weights."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ShapeMismatch
from .model import Model, backward, forward, loss
from .optim import AdamConfig, AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon)


@dataclass
class TrainResult:
    model: Model
    history: list[float] = field(default_factory=list)


def length_buckets(lengths: Sequence[int], batch_size: int,
                   rng: Optional[np.random.Generator]) -> list[np.ndarray]:
    """Batches of sample indices where every batch holds flows of one length.

    With ``rng`` the members of each bucket and the batch order are shuffled.
    """
    by_len = defaultdict(list)
    for i, T in enumerate(lengths):
        by_len[T].append(i)
    batches = []
    for T in sorted(by_len):
        idx = np.asarray(by_len[T])
        if rng is not None:
            idx = rng.permutation(idx)
        batches.extend(idx[s : s + batch_size] for s in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def train_arrays(model: Model, samples: Sequence[np.ndarray], labels: Sequence[int],
                 sample_weights: Optional[Sequence[float]] = None, cfg: TrainConfig = TrainConfig(),
                 on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fit a copy of ``model`` on a list of ``(T_i, d)`` flow matrices.

    The loss of a batch is the mean of its per-sample weighted losses. The
    history holds the weighted loss per sample, averaged over each epoch.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    for x in samples:
        if x.ndim != 2 or x.shape[1] != model.input_dim:
            raise ShapeMismatch(f"sample of shape {x.shape} does not fit input dim {model.input_dim}")
    model = model.astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    weights = (np.ones(len(samples)) if sample_weights is None
               else np.asarray(sample_weights, dtype=np.float64))
    rng = np.random.default_rng(cfg.seed)
    lengths = [x.shape[0] for x in samples]
    params = model.params()
    state = AdamState.for_params(params)
    adam = cfg.adam
    fixed = None if cfg.shuffle else length_buckets(lengths, cfg.batch_size, None)
    history = []
    for epoch in range(cfg.epochs):
        batches = length_buckets(lengths, cfg.batch_size, rng) if cfg.shuffle else fixed
        total = 0.0
        for idx in batches:
            X = np.stack([samples[i] for i in idx]).astype(np.float64)
            trace = forward(model, X)
            y, w = labels[idx], weights[idx]
            total += float(loss(trace, y, w).sum())
            grads = backward(model, trace, y, w)
            scale = 1.0 / len(idx)
            for g in grads.values():
                g *= scale
            adam_step(params, grads, state, adam)
        mean_loss = total / len(samples)
        history.append(mean_loss)
        log.debug("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return TrainResult(model, history)


def train(model: Model, ds, class_weights: Optional[Sequence[float]] = None,
          cfg: TrainConfig = TrainConfig(),
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fit a copy of ``model`` on a :class:`~earlyflow.dataset.FlowDataset`.

    ``class_weights`` (indexed by class id) become per-flow loss coefficients.
    """
    samples = [flow.matrix(np.float32) for flow in ds.flows]
    sample_weights = None
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=np.float64)
        sample_weights = cw[np.asarray(ds.labels, dtype=np.int64)]
    return train_arrays(model, samples, ds.labels, sample_weights, cfg, on_epoch)
