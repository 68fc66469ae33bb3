"""Unlearning procedures mapping an Original model to an unlearned one.

Every method takes an :class:`UnlearnRequest` and returns an
:class:`UnlearnResult` whose ``rte_seconds`` covers the whole call.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Literal

import numpy as np

from . import nd
from .data import SplitSpec
from .net import Network, mask_forget_logits, reinit_layers
from .train import (Adam, RunRecord, SGD, TrainConfig, optimize, param_indices,
                    train_supervised, weight_mask)

__all__ = [
    "supcon_loss",
    "second_best_labels",
    "random_other_labels",
    "FTParams",
    "RLParams",
    "NegGradParams",
    "LastKParams",
    "HDParams",
    "COLAParams",
    "UnlearnRequest",
    "UnlearnResult",
    "EncoderChanged",
    "unlearn_finetune",
    "unlearn_random_label",
    "unlearn_neggrad",
    "unlearn_last_k",
    "unlearn_hd",
    "unlearn_cola",
    "METHODS",
    "run_method",
    "make_params",
]


def supcon_loss(embeddings, labels, temperature: float = 0.5) -> nd.Tensor:
    """Supervised contrastive loss over L2-normalised rows.

    Each anchor ``i`` averages ``-log softmax_{A(i)}(z_i . z_a / tau)[p]`` over its
    positives ``p`` (same label, ``p != i``); ``A(i)`` is every other row. Anchors
    with no positive are left out of the batch mean, and a batch without any
    positive pair has loss 0.
    """
    z = nd.as_tensor(embeddings)
    y = np.asarray(labels, dtype=np.int64)
    if z.data.ndim != 2 or y.shape != (z.shape[0],):
        raise nd.ShapeError("supcon", f"{y.shape} labels for embeddings {z.shape}")
    b = z.shape[0]
    if b < 2:
        raise ValueError("supcon_loss needs at least two samples")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    zn = nd.l2_normalize(z)
    scores = nd.scale(nd.matmul(zn, nd.transpose(zn)), 1.0 / temperature)
    others = ~np.eye(b, dtype=bool)
    logp = nd.log_softmax(scores, mask=others)
    positive = (y[:, None] == y[None, :]) & others
    counts = positive.sum(axis=1)
    anchors = counts > 0
    weights = np.zeros((b, b))
    if anchors.any():
        weights[anchors] = positive[anchors] / counts[anchors, None] / anchors.sum()
    return nd.scale(nd.total(nd.mul(logp, nd.Tensor(weights))), -1.0)


def second_best_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Highest-scoring class other than the true one (lowest index on ties)."""
    z = np.array(logits, dtype=np.float64, copy=True)
    y = np.asarray(labels, dtype=np.int64)
    if z.shape[1] < 2:
        raise ValueError("need at least two classes")
    z[np.arange(z.shape[0]), y] = -np.inf
    return np.argmax(z, axis=1)


def random_other_labels(labels: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """Uniform labels over the ``num_classes - 1`` classes other than the true one."""
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([seed, 307])
    return (y + rng.integers(1, num_classes, size=y.size)) % num_classes


@dataclass(frozen=True)
class FTParams:
    epochs: int = 10
    lr: float = 0.02
    l1_lambda: float = 0.0
    batch_size: int = 64


@dataclass(frozen=True)
class RLParams:
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 64
    relabel_seed: int | None = None


@dataclass(frozen=True)
class NegGradParams:
    epochs: int = 5
    lr: float = 0.01
    alpha: float = 0.1
    batch_size: int = 64
    max_abs_loss: float = 50.0


@dataclass(frozen=True)
class LastKParams:
    mode: Literal["EU", "CF"] = "EU"
    k: int = 2
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 64


@dataclass(frozen=True)
class HDParams:
    epochs: int = 1
    lr: float = 0.2
    batch_size: int = 500
    alpha: float = 0.1


@dataclass(frozen=True)
class COLAParams:
    variant: Literal["plain", "plus"] = "plain"
    collapse_epochs: int = 5
    collapse_lr: float = 0.03
    align_epochs: int = 5
    align_lr: float = 0.05
    temperature: float = 0.5
    batch_size: int = 64
    collapse_l2: float = 0.0
    collapse_optimizer: Literal["sgd", "adam"] = "adam"


@dataclass(frozen=True, eq=False)
class UnlearnRequest:
    original: Network
    split: SplitSpec
    method: str
    params: object = None
    seed: int = 0

    def __post_init__(self):
        if self.original.num_classes != self.split.base.num_classes:
            raise ValueError("model and split disagree on the number of classes")


@dataclass(eq=False)
class UnlearnResult:
    unlearned: Network
    rte_seconds: float
    phase_logs: dict[str, RunRecord] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


class EncoderChanged(AssertionError):
    """A method that must leave the encoder untouched modified it."""


def _sgd_config(epochs, lr, batch_size, seed, **kw) -> TrainConfig:
    return TrainConfig(epochs=epochs, learning_rate=lr, batch_size=batch_size,
                       shuffle_seed=seed, **kw)


def unlearn_finetune(request: UnlearnRequest) -> UnlearnResult:
    """FT: keep training on the retain set; ``l1_lambda > 0`` gives the sparse variant."""
    p = request.params or FTParams()
    cfg = _sgd_config(p.epochs, p.lr, p.batch_size, request.seed, l1=p.l1_lambda)
    start = time.perf_counter()
    rec = train_supervised(request.original, request.split.retain, cfg)
    return UnlearnResult(rec.network, time.perf_counter() - start, {"finetune": rec})


def unlearn_random_label(request: UnlearnRequest) -> UnlearnResult:
    """RL: fine-tune on the retain set plus the forget set under wrong random labels."""
    p = request.params or RLParams()
    split = request.split
    seed = request.seed if p.relabel_seed is None else p.relabel_seed
    start = time.perf_counter()
    labels = split.base.labels.copy()
    fake = random_other_labels(labels[split.forget_indices], split.base.num_classes, seed)
    labels[split.forget_indices] = fake
    cfg = _sgd_config(p.epochs, p.lr, p.batch_size, request.seed)
    rec = train_supervised(request.original, split.full, cfg, labels_override=labels)
    return UnlearnResult(rec.network, time.perf_counter() - start, {"relabel": rec},
                         {"relabels": fake})


def _neggrad(net: Network, h_retain, y_retain, h_forget, y_forget, cfg: TrainConfig,
             alpha: float, max_abs_loss: float, start_layer: int, seed: int) -> RunRecord:
    """Descent on retain batches minus ``alpha`` times the forget-batch loss."""
    layers = cfg.trainable_layers(net)
    rng = np.random.default_rng([seed, 211])
    pool: list[int] = []

    def forget_batch(size):
        while len(pool) < size:
            pool.extend(rng.permutation(y_forget.size).tolist())
        out = np.asarray(pool[:size])
        del pool[:size]
        return out

    def loss_fn(tensors, batch):
        loss = nd.cross_entropy(net.forward(h_retain[batch], tensors, start=start_layer),
                                y_retain[batch])
        if alpha:
            fb = forget_batch(batch.size)
            ascent = nd.cross_entropy(net.forward(h_forget[fb], tensors, start=start_layer),
                                      y_forget[fb])
            loss = nd.sub(loss, nd.scale(ascent, alpha))
        return loss

    rec = optimize(net.params(), param_indices(layers), cfg, y_retain.size, loss_fn,
                   decay=weight_mask(net), max_abs_loss=max_abs_loss, snapshot=net.copy)
    rec.network = net
    return rec


def unlearn_neggrad(request: UnlearnRequest) -> UnlearnResult:
    """NegGrad+: joint retain descent and weighted forget ascent on the whole network."""
    p = request.params or NegGradParams()
    if not 0.0 <= p.alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    split = request.split
    start = time.perf_counter()
    cfg = _sgd_config(p.epochs, p.lr, p.batch_size, request.seed)
    rec = _neggrad(request.original.copy(), split.retain.x, split.retain.y, split.forget.x,
                   split.forget.y, cfg, p.alpha, p.max_abs_loss, 0, request.seed)
    return UnlearnResult(rec.network, time.perf_counter() - start, {"neggrad": rec})


def unlearn_last_k(request: UnlearnRequest) -> UnlearnResult:
    """EU-k re-initialises then trains the last ``k`` layers; CF-k only trains them."""
    p = request.params or LastKParams()
    net = request.original
    if not 1 <= p.k <= net.num_layers:
        raise ValueError(f"k must lie in [1, {net.num_layers}]")
    if p.mode not in ("EU", "CF"):
        raise ValueError("mode must be 'EU' or 'CF'")
    start = time.perf_counter()
    if p.mode == "EU":
        net = reinit_layers(net, p.k, request.seed)
    cfg = _sgd_config(p.epochs, p.lr, p.batch_size, request.seed, scope="last_k", k=p.k)
    rec = train_supervised(net, request.split.retain, cfg)
    return UnlearnResult(rec.network, time.perf_counter() - start, {p.mode.lower(): rec})


def unlearn_hd(request: UnlearnRequest) -> UnlearnResult:
    """Head distillation: only the head moves, the encoder stays bit-identical.

    Class-wise forgetting distils the head on all training data towards the
    Original's logits with the forget columns set to ``-inf``. Random forgetting
    runs NegGrad+ restricted to the head.
    """
    p = request.params or HDParams()
    split = request.split
    original = request.original
    start = time.perf_counter()
    net = original.copy()
    blocks = net.num_blocks
    cfg = TrainConfig(epochs=p.epochs, learning_rate=p.lr, batch_size=p.batch_size,
                      optimizer=Adam(), l2=0.0, shuffle_seed=request.seed, scope="head_only")
    # the encoder is frozen, so its features are computed once
    if split.mode == "classwise":
        h = net.encode(split.base.features)
        teacher = mask_forget_logits(net.apply(h, blocks), split.forget_classes)
        # kl_div with the constant teacher terms computed once
        probs, neg_entropy = nd.teacher_terms(teacher)

        def loss_fn(tensors, batch):
            student = net.forward(h[batch], tensors, start=blocks)
            return nd.add(nd.Tensor(neg_entropy[batch].mean()),
                          nd.soft_cross_entropy(probs[batch], student))

        rec = optimize(net.params(), param_indices(cfg.trainable_layers(net)), cfg, len(h),
                       loss_fn, snapshot=net.copy)
        rec.network = net
    else:
        rec = _neggrad(net, net.encode(split.retain.x), split.retain.y,
                       net.encode(split.forget.x), split.forget.y, cfg, p.alpha, 50.0, blocks,
                       request.seed)
    rte = time.perf_counter() - start
    if net.encoder_digest() != original.encoder_digest():
        raise EncoderChanged("head distillation modified the encoder")
    return UnlearnResult(net, rte, {"head": rec})


def unlearn_cola(request: UnlearnRequest) -> UnlearnResult:
    """Collapse the encoder with supervised contrastive training, then realign.

    ``plain`` collapses on the retain set only, re-initialises the head and
    trains everything with cross-entropy on the retain set. ``plus`` adds the
    forget set to every collapse batch under second-best pseudo-labels taken from
    the live model, and keeps the head for the align phase.
    """
    p = request.params or COLAParams()
    if p.variant not in ("plain", "plus"):
        raise ValueError("variant must be 'plain' or 'plus'")
    if p.collapse_optimizer not in ("sgd", "adam"):
        raise ValueError("collapse_optimizer must be 'sgd' or 'adam'")
    split = request.split
    start = time.perf_counter()
    net = request.original.copy()
    blocks = net.num_blocks
    xr, yr = split.retain.x, split.retain.y
    xf, yf = split.forget.x, split.forget.y
    collapse = _sgd_config(p.collapse_epochs, p.collapse_lr, p.batch_size, request.seed,
                           scope="encoder_only", l2=p.collapse_l2,
                           optimizer=Adam() if p.collapse_optimizer == "adam" else SGD(0.9))
    pseudo_log: list[tuple[np.ndarray, np.ndarray]] = []
    fb_size = max(1, round(p.batch_size * yf.size / yr.size))
    rng = np.random.default_rng([request.seed, 223])
    pool: list[int] = []

    def forget_batch():
        while len(pool) < fb_size:
            pool.extend(rng.permutation(yf.size).tolist())
        out = np.asarray(pool[:fb_size])
        del pool[:fb_size]
        return out

    def loss_fn(tensors, batch):
        x, y = xr[batch], yr[batch]
        if p.variant == "plus":
            fb = forget_batch()
            pseudo = second_best_labels(net.logits(xf[fb]), yf[fb])
            if np.any(pseudo == yf[fb]):
                raise AssertionError("pseudo-label equals the true label")
            pseudo_log.append((yf[fb], pseudo))
            x, y = np.concatenate([x, xf[fb]]), np.concatenate([y, pseudo])
        return supcon_loss(net.forward(x, tensors, stop=blocks), y, p.temperature)

    rec_c = optimize(net.params(), param_indices(collapse.trainable_layers(net)), collapse,
                     yr.size, loss_fn, decay=weight_mask(net), snapshot=net.copy)
    if p.variant == "plain":
        net = reinit_layers(net, net.head_depth, request.seed + 7919)
    align = _sgd_config(p.align_epochs, p.align_lr, p.batch_size, request.seed)
    rec_a = train_supervised(net, split.retain, align)
    extra = {}
    if pseudo_log:
        extra["pseudo_true"] = np.concatenate([t for t, _ in pseudo_log])
        extra["pseudo_labels"] = np.concatenate([q for _, q in pseudo_log])
    return UnlearnResult(rec_a.network, time.perf_counter() - start,
                         {"collapse": rec_c, "align": rec_a}, extra)


def _cola_plus(request: UnlearnRequest) -> UnlearnResult:
    p = request.params or COLAParams(variant="plus")
    return unlearn_cola(replace(request, params=replace(p, variant="plus")))


def _eu(request):
    p = request.params or LastKParams()
    return unlearn_last_k(replace(request, params=replace(p, mode="EU")))


def _cf(request):
    p = request.params or LastKParams()
    return unlearn_last_k(replace(request, params=replace(p, mode="CF")))


def _l1(request):
    p = request.params or FTParams(l1_lambda=1e-3)
    return unlearn_finetune(replace(request, params=p))


# name -> (parameter class, default overrides, runner)
METHODS: dict[str, tuple[type, dict, Callable[[UnlearnRequest], UnlearnResult]]] = {
    "FT": (FTParams, {}, unlearn_finetune),
    "l1-sparse": (FTParams, {"l1_lambda": 1e-3}, _l1),
    "RL": (RLParams, {}, unlearn_random_label),
    "NegGrad": (NegGradParams, {}, unlearn_neggrad),
    "EU-k": (LastKParams, {"mode": "EU"}, _eu),
    "CF-k": (LastKParams, {"mode": "CF"}, _cf),
    "HD": (HDParams, {}, unlearn_hd),
    "COLA": (COLAParams, {"variant": "plain"}, unlearn_cola),
    "COLA+": (COLAParams, {"variant": "plus"}, _cola_plus),
}


def make_params(method: str, overrides: dict | None = None):
    """Build the parameter record for ``method``; unknown keys raise ``KeyError``."""
    if method not in METHODS:
        raise KeyError(f"unknown method {method!r}")
    cls, defaults, _ = METHODS[method]
    values = dict(defaults)
    values.update(overrides or {})
    known = {f.name for f in fields(cls)}
    bad = sorted(set(values) - known)
    if bad:
        raise KeyError(f"{method}: unknown hyperparameters {bad}")
    return cls(**values)


def run_method(method: str, original: Network, split: SplitSpec, seed: int,
               overrides: dict | None = None) -> UnlearnResult:
    params = make_params(method, overrides)
    return METHODS[method][2](UnlearnRequest(original, split, method, params, seed))
