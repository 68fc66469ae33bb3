"""Mini-batch training loops shared by pretraining, unlearning and critic fitting."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nd
from .data import DataView
from .net import Network

__all__ = [
    "SGD",
    "Adam",
    "TrainConfig",
    "RunRecord",
    "TrainingDiverged",
    "Optimizer",
    "optimize",
    "train_supervised",
    "evaluate_accuracy",
]


@dataclass(frozen=True)
class SGD:
    momentum: float = 0.9


@dataclass(frozen=True)
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


SCOPES = ("all", "head_only", "encoder_only", "last_k")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float
    batch_size: int = 64
    optimizer: SGD | Adam = SGD()
    l2: float = 5e-4
    l1: float = 0.0
    shuffle_seed: int = 0
    scope: str = "all"
    k: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("penalties must be >= 0")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")

    def trainable_layers(self, network: Network) -> list[int]:
        n, blocks = network.num_layers, network.num_blocks
        if self.scope == "all":
            return list(range(n))
        if self.scope == "head_only":
            return list(range(blocks, n))
        if self.scope == "encoder_only":
            return list(range(blocks))
        if not 1 <= self.k <= n:
            raise ValueError(f"last_k needs 1 <= k <= {n}")
        return list(range(n - self.k, n))


@dataclass(eq=False)
class RunRecord:
    losses: list[float]
    accuracies: list[float]
    seconds: float
    network: Network | None = None
    extra: dict = field(default_factory=dict)


class TrainingDiverged(RuntimeError):
    """The loss became non-finite or left the allowed range.

    ``last_network`` holds the parameters from before the offending step.
    """

    def __init__(self, message: str, epoch: int, step: int, loss: float,
                 last_network: Network | None = None):
        super().__init__(f"{message} (epoch {epoch}, step {step}, loss {loss!r})")
        self.epoch = epoch
        self.step = step
        self.loss = loss
        self.last_network = last_network


class Optimizer:
    """In-place SGD-with-momentum or Adam over a list of arrays.

    ``decay`` marks arrays that receive the L2 and L1 penalties (weight matrices);
    L1 is applied as a proximal soft-threshold after each step so weights can
    reach exactly zero.
    """

    def __init__(self, params: Sequence[np.ndarray], config: TrainConfig,
                 lrs: Sequence[float] | None = None, decay: Sequence[bool] | None = None):
        self.params = list(params)
        self.config = config
        self.lrs = [config.learning_rate] * len(self.params) if lrs is None else list(lrs)
        self.decay = [True] * len(self.params) if decay is None else list(decay)
        self.state = [np.zeros_like(p) for p in self.params]
        self.state2 = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray | None]) -> None:
        cfg, opt = self.config, self.config.optimizer
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            lr = self.lrs[i]
            if cfg.l2 and self.decay[i]:
                g = g + cfg.l2 * p
            if isinstance(opt, Adam):
                m, v = self.state[i], self.state2[i]
                m *= opt.beta1
                m += (1.0 - opt.beta1) * g
                v *= opt.beta2
                v += (1.0 - opt.beta2) * g * g
                mhat = m / (1.0 - opt.beta1 ** self.t)
                vhat = v / (1.0 - opt.beta2 ** self.t)
                p -= lr * mhat / (np.sqrt(vhat) + opt.eps)
            else:
                buf = self.state[i]
                if self.t == 1:
                    buf[...] = g
                else:
                    buf *= opt.momentum
                    buf += g
                p -= lr * buf
            if cfg.l1 and self.decay[i]:
                p[...] = np.sign(p) * np.maximum(np.abs(p) - lr * cfg.l1, 0.0)


LossFn = Callable[[list[nd.Tensor], np.ndarray], nd.Tensor]


def optimize(
    params: Sequence[np.ndarray],
    trainable: Sequence[int],
    config: TrainConfig,
    n: int,
    loss_fn: LossFn,
    *,
    lrs: Sequence[float] | None = None,
    decay: Sequence[bool] | None = None,
    on_epoch: Callable[[int], float] | None = None,
    max_abs_loss: float | None = None,
    snapshot: Callable[[], Network] | None = None,
) -> RunRecord:
    """Run ``config.epochs`` shuffled passes over ``n`` samples.

    ``loss_fn(tensors, batch)`` builds the scalar loss for one batch of sample
    indices; only ``params[i]`` with ``i in trainable`` are updated.
    """
    if n < 1:
        raise ValueError("no training samples")
    trainable = sorted(set(trainable))
    chosen = [params[i] for i in trainable]
    opt = Optimizer(chosen, config,
                    None if lrs is None else [lrs[i] for i in trainable],
                    None if decay is None else [decay[i] for i in trainable])
    rng = np.random.default_rng([config.shuffle_seed, 101])
    losses, accs = [], []
    start = time.perf_counter()
    flag = set(trainable)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for step, lo in enumerate(range(0, n, config.batch_size)):
            batch = order[lo:lo + config.batch_size]
            tensors = [nd.Tensor(p, requires_grad=i in flag) for i, p in enumerate(params)]
            loss = loss_fn(tensors, batch)
            value = loss.item()
            if not math.isfinite(value) or (max_abs_loss is not None and abs(value) > max_abs_loss):
                raise TrainingDiverged("loss diverged", epoch, step, value,
                                       snapshot() if snapshot else None)
            loss.backward()
            opt.step([tensors[i].grad if tensors[i].grad is not None else np.zeros_like(params[i])
                      for i in trainable])
            total += value * batch.size
            count += batch.size
        losses.append(total / count)
        if on_epoch is not None:
            accs.append(on_epoch(epoch))
    return RunRecord(losses, accs, time.perf_counter() - start)


def weight_mask(network: Network) -> list[bool]:
    return [i % 2 == 0 for i in range(2 * network.num_layers)]


def param_indices(layers: Sequence[int]) -> list[int]:
    return [j for i in layers for j in (2 * i, 2 * i + 1)]


def train_supervised(
    network: Network,
    data: DataView,
    config: TrainConfig,
    labels_override: Sequence[int] | None = None,
    loss_weight: float = 1.0,
) -> RunRecord:
    """Minimise ``loss_weight * cross_entropy`` over the trainable scope.

    A negative ``loss_weight`` turns the loop into gradient ascent. Layers before
    the first trainable one are frozen, so their output is computed once.
    """
    if len(data) == 0:
        raise ValueError("empty training data")
    labels = data.y if labels_override is None else np.asarray(labels_override, dtype=np.int64)
    if labels.shape != (len(data),):
        raise ValueError("labels_override length does not match data")
    net = network.copy()
    layers = config.trainable_layers(net)
    first = min(layers)
    # the frozen prefix never changes, so run it once
    h = net.apply(data.x, 0, first) if first else data.x
    params = net.params()

    def loss_fn(tensors, batch):
        out = net.forward(h[batch], tensors, start=first)
        return nd.scale(nd.cross_entropy(out, labels[batch]), loss_weight)

    def on_epoch(_):
        return float(np.mean(np.argmax(net.apply(h, first), axis=1) == labels))

    record = optimize(params, param_indices(layers), config, len(data), loss_fn,
                      decay=weight_mask(net), on_epoch=on_epoch, snapshot=net.copy)
    record.network = net
    return record


def evaluate_accuracy(network: Network, data: DataView) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    if len(data) == 0:
        raise ValueError("empty evaluation data")
    return float(np.mean(network.predict(data.x) == data.y))
