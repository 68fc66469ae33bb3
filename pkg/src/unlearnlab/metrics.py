"""Output-level metrics: accuracies, membership inference, JSD and the recovery probe."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import nd
from .data import DataView, SplitSpec, subsample
from .net import Network, reinit_layers
from .train import SGD, TrainConfig, evaluate_accuracy, train_supervised

__all__ = [
    "AccuracyMetrics",
    "accuracy_metrics",
    "AttackPredictor",
    "MIAResult",
    "attack_features",
    "fit_attack",
    "mia_from_predictions",
    "mia_score",
    "jsd_to_reference",
    "recovery_probe",
    "DEFAULT_PROBE",
]

FeatureKind = Literal["entropy", "confidence"]


@dataclass(frozen=True)
class AccuracyMetrics:
    ua: float
    ra: float
    ta: float

    def as_percent(self) -> dict[str, float]:
        return {"UA": 100.0 * self.ua, "RA": 100.0 * self.ra, "TA": 100.0 * self.ta}


def accuracy_metrics(model: Network, split: SplitSpec) -> AccuracyMetrics:
    """``UA = 1 - Acc(D_f)``, ``RA = Acc(D_r)``, ``TA = Acc(test)`` as fractions."""
    ra = evaluate_accuracy(model, split.retain) if len(split.retain_indices) else float("nan")
    return AccuracyMetrics(1.0 - evaluate_accuracy(model, split.forget), ra,
                           evaluate_accuracy(model, split.test_view()))


def attack_features(model: Network, data: DataView, kind: FeatureKind) -> np.ndarray:
    """Per-sample output entropy (nats) or probability of the true class."""
    logp = nd.log_softmax_np(model.logits(data.x))
    if kind == "entropy":
        p = np.exp(logp)
        return -np.where(p > 0, p * logp, 0.0).sum(axis=1)
    if kind == "confidence":
        return np.exp(logp[np.arange(len(data)), data.y])
    raise ValueError(f"unknown feature kind {kind!r}")


@dataclass(frozen=True)
class AttackPredictor:
    """Member iff ``sign * feature > threshold``; equality counts as non-member.

    Members have low entropy and high confidence, so ``sign`` is -1 for entropy
    and +1 for confidence.
    """

    feature_kind: FeatureKind
    threshold: float
    sign: float
    train_accuracy: float = float("nan")
    val_accuracy: float = float("nan")
    n_train: int = 0
    n_val: int = 0
    seed: int = 0
    degenerate: bool = False

    def predict_member(self, features: np.ndarray) -> np.ndarray:
        return self.sign * np.asarray(features, dtype=np.float64) > self.threshold

    @classmethod
    def constant(cls, member: bool, kind: FeatureKind = "entropy") -> "AttackPredictor":
        return cls(kind, -math.inf if member else math.inf, 1.0)


def _balanced_accuracy(pred: np.ndarray, member: np.ndarray) -> float:
    return 0.5 * (pred[member].mean() + (~pred[~member]).mean())


def fit_attack(member_feat: np.ndarray, nonmember_feat: np.ndarray, kind: FeatureKind,
               seed: int = 0) -> AttackPredictor:
    """Threshold maximising balanced accuracy on half the samples; the other half validates."""
    sign = -1.0 if kind == "entropy" else 1.0
    rng = np.random.default_rng([seed, 401])
    m = rng.permutation(np.asarray(member_feat, dtype=np.float64) * sign)
    n = rng.permutation(np.asarray(nonmember_feat, dtype=np.float64) * sign)
    mt, mv = m[: m.size // 2], m[m.size // 2:]
    nt, nv = n[: n.size // 2], n[n.size // 2:]
    s = np.concatenate([mt, nt])
    is_member = np.concatenate([np.ones(mt.size, bool), np.zeros(nt.size, bool)])
    values = np.unique(s)
    if values.size == 1:
        return AttackPredictor(kind, math.inf, sign, 0.5, 0.5, s.size, mv.size + nv.size, seed,
                               degenerate=True)
    # candidate cuts: below everything, then every distinct value (ties go to non-member)
    cuts = np.concatenate([[values[0] - 1.0], values])
    best_t, best_acc = cuts[0], -1.0
    for t in cuts:
        acc = _balanced_accuracy(s > t, is_member)
        if acc > best_acc:
            best_t, best_acc = t, acc
    sv = np.concatenate([mv, nv])
    val_member = np.concatenate([np.ones(mv.size, bool), np.zeros(nv.size, bool)])
    val_acc = _balanced_accuracy(sv > best_t, val_member)
    return AttackPredictor(kind, float(best_t), sign, float(best_acc), float(val_acc), s.size,
                           sv.size, seed)


def mia_from_predictions(member_pred: np.ndarray) -> float:
    """``100 * (1 - TN / |D_f|)`` where a true negative is a forget sample called non-member."""
    pred = np.asarray(member_pred, dtype=bool)
    if pred.size == 0:
        raise ValueError("empty forget set")
    tn = int((~pred).sum())
    return 100.0 * (1.0 - tn / pred.size)


@dataclass(frozen=True)
class MIAResult:
    value: float
    predictor: AttackPredictor

    @property
    def degenerate(self) -> bool:
        return self.predictor.degenerate


def mia_score(model: Network, split: SplitSpec, variant: FeatureKind = "entropy",
              seed: int = 0) -> MIAResult:
    """Attack trained on equal numbers of retain (member) and test (non-member) samples."""
    test = split.test_view()
    if len(test) < 50:
        raise ValueError("the attack needs at least 50 test samples")
    n = min(len(test), len(split.retain_indices))
    retain_idx = subsample(split.retain_indices, n / len(split.retain_indices), seed)[:n]
    test_idx = subsample(np.arange(len(test)), n / len(test), seed + 1)[:n]
    pred = fit_attack(attack_features(model, split.base.view(retain_idx), variant),
                      attack_features(model, split.test.view(test_idx), variant), variant, seed)
    value = mia_from_predictions(pred.predict_member(attack_features(model, split.forget,
                                                                     variant)))
    return MIAResult(value, pred)


def jsd_to_reference(model_u: Network, model_r: Network, data: DataView) -> float:
    """Mean per-sample Jensen-Shannon divergence (nats) of the two output distributions."""
    if model_u.num_classes != model_r.num_classes:
        raise ValueError("models disagree on the number of classes")
    if len(data) == 0:
        raise ValueError("empty data")
    p = nd.softmax(model_u.logits(data.x))
    q = nd.softmax(model_r.logits(data.x))
    m = 0.5 * (p + q)

    def kl(a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(a > 0, a * (np.log(a) - np.log(m)), 0.0).sum(axis=1)

    per = 0.5 * kl(p) + 0.5 * kl(q)
    return float(np.clip(per, 0.0, math.log(2.0)).mean())


DEFAULT_PROBE = TrainConfig(epochs=50, learning_rate=0.01, batch_size=16, optimizer=SGD(0.9),
                            l2=5e-4, scope="head_only")


def recovery_probe(model: Network, split: SplitSpec, fraction: float = 0.02, seed: int = 0,
                   probe_config: TrainConfig | None = None, stratify: bool = False) -> float:
    """Forget-class test accuracy of a fresh head trained on a small subset of ``D``.

    The encoder stays frozen; the subset is a random ``fraction`` of all
    training samples (retain and forget), stratified by class on request.
    """
    if split.mode != "classwise":
        raise ValueError("the recovery probe needs a class-wise split")
    cfg = DEFAULT_PROBE if probe_config is None else probe_config
    if cfg.scope != "head_only":
        cfg = TrainConfig(**{**cfg.__dict__, "scope": "head_only"})
    base = split.base
    idx = subsample(np.arange(len(base)), fraction, seed, base.labels if stratify else None)
    if not np.isin(base.labels[idx], split.forget_classes).any():
        raise ValueError("the probe subset contains no forget-class sample")
    fresh = reinit_layers(model, model.head_depth, seed + 1009)
    cfg = TrainConfig(**{**cfg.__dict__, "shuffle_seed": seed})
    probed = train_supervised(fresh, base.view(idx), cfg).network
    if probed.encoder_digest() != model.encoder_digest():
        raise AssertionError("recovery probe modified the encoder")
    test = split.test
    forget_test = test.view(np.flatnonzero(np.isin(test.labels, split.forget_classes)))
    return evaluate_accuracy(probed, forget_test)
