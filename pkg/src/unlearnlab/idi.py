"""Layer-wise mutual information between encoder features and forget labels.

For a frozen network and tap ``l``, a critic pair is fitted: ``f`` is a freshly
initialised copy of the encoder blocks after ``l`` plus a linear projection to
``d`` dimensions, and ``g`` is a table of ``d``-vectors, one per label value.
The held-out InfoNCE value of the trained pair estimates ``I(Z_l; Y)``.

The information difference of a model against a reference is the sum of the
per-layer MI gaps; the index (IDI) divides that by the Original model's gap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import nd
from .data import SplitSpec, subsample
from .net import ACTIVATIONS, Network, _init_layer, forward_with_taps
from .train import Adam, TrainConfig, optimize

__all__ = [
    "MIConfig",
    "CriticPair",
    "LayerEstimate",
    "MICurve",
    "IDIResult",
    "DegenerateLabelsError",
    "infonce_loss",
    "label_pool",
    "estimate_layer_mi",
    "estimate_mi_from_features",
    "mi_curve",
    "information_difference",
    "idi",
    "write_curve_csv",
    "read_curve_csv",
]

LabelKind = Literal["binary", "multiclass"]

IDI_DENOMINATOR_EPS = 1e-3
BOUND_TOLERANCE = 0.05


class DegenerateLabelsError(ValueError):
    """The label sample has a single value, so MI is identically zero."""


@dataclass(frozen=True)
class MIConfig:
    embedding_dim: int = 32
    batch_size: int = 64
    epochs: int = 30
    lr_f: float = 3e-3
    lr_g: float = 1e-2
    replications: int = 5
    tail_epochs: int = 5
    eval_fraction: float = 0.25
    forget_ratio: int = 1
    retain_ratio: int = 1
    retain_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.embedding_dim < 1 or self.batch_size < 2 or self.epochs < 1:
            raise ValueError("embedding_dim, batch_size and epochs must be positive")
        if not 1 <= self.tail_epochs <= self.epochs:
            raise ValueError("tail_epochs must lie in [1, epochs]")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must lie in (0, 1)")
        if self.forget_ratio < 1 or self.retain_ratio < 1:
            raise ValueError("ratios must be positive")
        if not 0.0 < self.retain_fraction <= 1.0:
            raise ValueError("retain_fraction must lie in (0, 1]")


def infonce_loss(u, v) -> nd.Tensor:
    """``mean_k log( exp(u_k . v_k) / mean_k' exp(u_k . v_k') )``; never exceeds ``log K``."""
    u, v = nd.as_tensor(u), nd.as_tensor(v)
    if u.data.ndim != 2 or u.shape != v.shape:
        raise nd.ShapeError("infonce", f"embeddings {u.shape} and {v.shape} must match")
    k = u.shape[0]
    scores = nd.matmul(u, nd.transpose(v))
    diag = nd.pick(nd.log_softmax(scores), np.arange(k))
    return nd.add(nd.mean(diag), nd.Tensor(math.log(k)))


class CriticPair:
    """Trainable ``f`` (suffix blocks + projection) and ``g`` (label vectors)."""

    def __init__(self, network: Network, layer: int, num_labels: int, embedding_dim: int,
                 seed: int):
        if not 0 <= layer < network.num_blocks:
            raise ValueError(f"layer must lie in [0, {network.num_blocks})")
        self.layer = layer
        self.embedding_dim = embedding_dim
        self.activation = network.activation
        dims = list(network.widths[layer:network.num_blocks]) + [embedding_dim]
        self.f_params: list[np.ndarray] = []
        for i in range(len(dims) - 1):
            w, b = _init_layer(dims[i], dims[i + 1], seed, 1000 + i)
            self.f_params += [w, b]
        rng = np.random.default_rng([seed, 2000])
        self.g_table = rng.normal(0.0, 1.0 / math.sqrt(embedding_dim),
                                  size=(num_labels, embedding_dim))

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.f_params, self.g_table]

    def f(self, z, tensors: Sequence[nd.Tensor]) -> nd.Tensor:
        act = ACTIVATIONS[self.activation][1]
        h = nd.as_tensor(z)
        n = len(self.f_params) // 2
        for i in range(n):
            h = nd.add(nd.matmul(h, tensors[2 * i]), tensors[2 * i + 1])
            if i < n - 1:
                h = act(h)
        return h

    def scores(self, z: np.ndarray, y: np.ndarray) -> float:
        tensors = [nd.Tensor(p) for p in self.params]
        return infonce_loss(self.f(z, tensors), nd.rows(tensors[-1], y)).item()


@dataclass(frozen=True)
class LayerEstimate:
    layer: int
    estimate: float
    raw: float
    stddev: float
    runs: tuple[float, ...]
    h_y: float


@dataclass(frozen=True)
class MICurve:
    layer_indices: tuple[int, ...]
    estimates: tuple[float, ...]
    raw: tuple[float, ...]
    stddev: tuple[float, ...]
    label_kind: LabelKind
    h_y: float
    name: str = ""

    def restrict(self, layers: Sequence[int]) -> "MICurve":
        pos = [self.layer_indices.index(l) for l in layers]
        return MICurve(tuple(layers), tuple(self.estimates[p] for p in pos),
                       tuple(self.raw[p] for p in pos), tuple(self.stddev[p] for p in pos),
                       self.label_kind, self.h_y, self.name)


@dataclass(frozen=True)
class IDIResult:
    id_u: float
    id_o: float
    idi: float
    degenerate: bool
    over_unlearning: bool
    reference_tag: str = "retrain"
    per_layer: tuple[float, ...] = field(default_factory=tuple)


def entropy(labels: np.ndarray) -> float:
    counts = np.bincount(labels)
    p = counts[counts > 0] / labels.size
    return float(-(p * np.log(p)).sum())


def label_pool(split: SplitSpec, label_kind: LabelKind, config: MIConfig) -> tuple[np.ndarray, np.ndarray]:
    """Dataset indices and labels ``Y`` fed to the critics.

    Binary: ``Y = 1`` on the forget set and 0 on retain samples drawn to the
    configured forget:retain ratio. Multiclass: the true class on the forget set only.
    """
    forget = split.forget_indices
    if label_kind == "multiclass":
        return forget, split.base.labels[forget]
    if label_kind != "binary":
        raise ValueError(f"unknown label kind {label_kind!r}")
    retain = split.retain_indices
    rlab = split.base.labels[retain]
    if config.retain_fraction < 1.0:
        retain = subsample(retain, config.retain_fraction, config.seed, rlab)
        rlab = split.base.labels[retain]
    want = min(retain.size, math.ceil(forget.size * config.retain_ratio / config.forget_ratio))
    if want < retain.size:
        retain = subsample(retain, want / retain.size, config.seed + 1, rlab)
    idx = np.concatenate([forget, retain])
    y = np.concatenate([np.ones(forget.size, np.int64), np.zeros(retain.size, np.int64)])
    return idx, y


def _holdout(y: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    pos = np.arange(y.size)
    held = subsample(pos, fraction, seed, y)
    return np.setdiff1d(pos, held), held


def estimate_mi_from_features(
    z: np.ndarray,
    y: np.ndarray,
    network: Network,
    layer: int,
    config: MIConfig,
    num_labels: int | None = None,
) -> LayerEstimate:
    """Fit ``config.replications`` critic pairs on fixed features ``z`` and labels ``y``."""
    y = np.asarray(y, dtype=np.int64)
    if np.unique(y).size < 2:
        raise DegenerateLabelsError("labels take a single value")
    num_labels = int(y.max()) + 1 if num_labels is None else num_labels
    # per-feature standardisation is invertible, so MI is unchanged, but it
    # spares the critic from chasing the feature scale of each model
    z = np.asarray(z, dtype=np.float64)
    spread = z.std(axis=0)
    z = (z - z.mean(axis=0)) / np.where(spread > 1e-12, spread, 1.0)
    h_y = entropy(y)
    train_pos, eval_pos = _holdout(y, config.eval_fraction, config.seed + 7)
    k = config.batch_size
    # log K >= 4 H(Y) keeps the log K ceiling out of the way where the pool allows it
    need = math.ceil(math.exp(4.0 * h_y))
    if k < need and need <= train_pos.size:
        raise ValueError(f"batch size {k} too small for H(Y)={h_y:.3f}; need >= {need}")
    # fixed shuffled chunks so every evaluation batch mixes label values
    order = np.random.default_rng([config.seed, 43]).permutation(eval_pos)
    chunks = np.array_split(order, max(1, eval_pos.size // k))
    zt, yt = z[train_pos], y[train_pos]
    runs = []
    for r in range(config.replications):
        critic = CriticPair(network, layer, num_labels, config.embedding_dim,
                            seed=int(config.seed * 1_000 + layer * 100 + r))
        params = critic.params
        lrs = [config.lr_f] * len(critic.f_params) + [config.lr_g]
        tcfg = TrainConfig(epochs=config.epochs, learning_rate=config.lr_f, batch_size=k,
                           optimizer=Adam(), l2=0.0, shuffle_seed=config.seed * 31 + layer * 7 + r)

        def loss_fn(tensors, batch):
            u = critic.f(zt[batch], tensors)
            v = nd.rows(tensors[-1], yt[batch])
            return nd.scale(infonce_loss(u, v), -1.0)

        history = []

        def on_epoch(_):
            val = float(np.mean([critic.scores(z[c], y[c]) for c in chunks]))
            history.append(val)
            return val

        optimize(params, range(len(params)), tcfg, train_pos.size, loss_fn, lrs=lrs,
                 on_epoch=on_epoch)
        runs.append(float(np.mean(history[-config.tail_epochs:])))
    raw = float(np.mean(runs))
    std = float(np.std(runs, ddof=1)) if len(runs) > 1 else 0.0
    return LayerEstimate(layer, max(raw, 0.0), raw, std, tuple(runs), h_y)


def estimate_layer_mi(network: Network, layer: int, split: SplitSpec, label_kind: LabelKind,
                      config: MIConfig) -> LayerEstimate:
    """InfoNCE estimate of ``I(Z_layer; Y)`` with the network held fixed."""
    idx, y = label_pool(split, label_kind, config)
    z = forward_with_taps(network, split.base.features[idx]).features[layer]
    num_labels = 2 if label_kind == "binary" else split.base.num_classes
    return estimate_mi_from_features(z, y, network, layer, config, num_labels)


def mi_curve(network: Network, split: SplitSpec, label_kind: LabelKind,
             layer_indices: Sequence[int], config: MIConfig, name: str = "") -> MICurve:
    layers = tuple(int(l) for l in layer_indices)
    if not layers or list(layers) != sorted(set(layers)):
        raise ValueError("layer_indices must be nonempty, sorted and unique")
    idx, y = label_pool(split, label_kind, config)
    taps = forward_with_taps(network, split.base.features[idx]).features
    num_labels = 2 if label_kind == "binary" else split.base.num_classes
    ests = [estimate_mi_from_features(taps[l], y, network, l, config, num_labels) for l in layers]
    return MICurve(layers, tuple(e.estimate for e in ests), tuple(e.raw for e in ests),
                   tuple(e.stddev for e in ests), label_kind, entropy(y), name)


def _check_compatible(a: MICurve, b: MICurve) -> None:
    if a.layer_indices != b.layer_indices:
        raise ValueError(f"layer indices differ: {a.layer_indices} vs {b.layer_indices}")
    if a.label_kind != b.label_kind:
        raise ValueError(f"label kinds differ: {a.label_kind} vs {b.label_kind}")


def information_difference(curve_u: MICurve, curve_ref: MICurve) -> float:
    """Sum over shared layers of the raw MI gap ``I_u - I_ref`` (nats)."""
    _check_compatible(curve_u, curve_ref)
    return float(sum(u - r for u, r in zip(curve_u.raw, curve_ref.raw)))


def idi(curve_u: MICurve, curve_o: MICurve, curve_ref: MICurve,
        reference_tag: str = "retrain") -> IDIResult:
    """Information difference of ``curve_u`` normalised by that of ``curve_o``.

    A denominator within ``1e-3`` nats of zero marks the result degenerate (the
    original and reference encoders carry the same information) and ``idi`` is NaN.
    """
    _check_compatible(curve_u, curve_o)
    _check_compatible(curve_u, curve_ref)
    id_u = information_difference(curve_u, curve_ref)
    id_o = information_difference(curve_o, curve_ref)
    per_layer = tuple(u - r for u, r in zip(curve_u.raw, curve_ref.raw))
    if abs(id_o) <= IDI_DENOMINATOR_EPS:
        return IDIResult(id_u, id_o, float("nan"), True, False, reference_tag, per_layer)
    value = id_u / id_o
    return IDIResult(id_u, id_o, value, False, value < 0, reference_tag, per_layer)


def write_curve_csv(curve: MICurve, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "estimate_nats", "stddev", "label_kind", "H_Y"])
        for l, e, s in zip(curve.layer_indices, curve.raw, curve.stddev):
            w.writerow([l, repr(e), repr(s), curve.label_kind, repr(curve.h_y)])


def read_curve_csv(path: str | Path, name: str = "") -> MICurve:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty curve file")
    raw = tuple(float(r["estimate_nats"]) for r in rows)
    return MICurve(tuple(int(r["layer"]) for r in rows), tuple(max(v, 0.0) for v in raw), raw,
                   tuple(float(r["stddev"]) for r in rows), rows[0]["label_kind"],
                   float(rows[0]["H_Y"]), name)
