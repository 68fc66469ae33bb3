import math

import numpy as np
import pytest

from unlearnlab.data import Dataset, split_classwise, split_random, subsample, synthesize_pair
from unlearnlab.metrics import (AttackPredictor, accuracy_metrics, fit_attack, jsd_to_reference,
                                mia_from_predictions, mia_score, recovery_probe)
from unlearnlab.net import Network, build_mlp
from unlearnlab.train import evaluate_accuracy


def identity_net(c):
    """Predicts the argmax feature; exact on one-hot inputs."""
    eye = np.eye(c)
    return Network(c, [c, c], c, [eye.copy(), eye.copy(), eye.copy()], [np.zeros(c)] * 3)


def constant_net(c, logits, dim=3):
    net = build_mlp(dim, [4, 4], c, 0)
    for p in net.params():
        p[...] = 0.0
    net.biases[-1][...] = logits
    return net


def one_hot_split(c=4, per_class=10):
    y = np.repeat(np.arange(c), per_class)
    train = Dataset(np.eye(c)[y], y, c)
    return split_classwise(train, [0], Dataset(np.eye(c)[y], y, c))


class TestAccuracyMetrics:
    def test_perfect_memorizer(self):
        m = accuracy_metrics(identity_net(4), one_hot_split())
        assert m.as_percent() == {"UA": 0.0, "RA": 100.0, "TA": 100.0}

    def test_constant_class_on_balanced_data(self):
        train, test = synthesize_pair("blobs", 5, 20, 3, 0.5, 0)
        sp = split_random(train, 4, 0, test)
        net = constant_net(5, [3.0, 0, 0, 0, 0])
        assert accuracy_metrics(net, sp).as_percent()["RA"] == pytest.approx(100.0 / 5)

    def test_desk_retrain_forgets(self, desk):
        assert np.all(desk.values("Retrain", "UA") == 100.0)


@pytest.fixture(scope="module")
def mia_split():
    """The small benchmark with 100 samples per class, so the test set holds 80."""
    train, test = synthesize_pair("blobs", 4, 100, 6, 0.6, 3, radius=4.0)
    return split_classwise(train, [1], test)


class TestMIA:
    def test_constant_non_member(self):
        pred = AttackPredictor.constant(False).predict_member(np.arange(5.0))
        assert mia_from_predictions(pred) == 0.0

    def test_constant_member(self):
        pred = AttackPredictor.constant(True).predict_member(np.arange(5.0))
        assert mia_from_predictions(pred) == 100.0

    def test_formula(self):
        assert mia_from_predictions([True, False, False, False]) == 25.0

    def test_ties_count_as_non_member(self):
        p = AttackPredictor("confidence", 0.5, 1.0)
        np.testing.assert_array_equal(p.predict_member([0.4, 0.5, 0.6]), [False, False, True])

    def test_separable_threshold(self):
        p = fit_attack(np.full(20, 0.1), np.full(20, 2.0), "entropy")
        assert p.train_accuracy == 1.0 and p.val_accuracy == 1.0

    def test_random_init_is_chance(self, desk_split):
        res = mia_score(build_mlp(16, [64, 64, 32], 10, 123), desk_split, "entropy", 0)
        assert abs(res.predictor.val_accuracy - 0.5) <= 0.05
        assert res.predictor.n_train == res.predictor.n_val

    def test_degenerate_features_flagged(self, mia_split):
        res = mia_score(constant_net(4, np.zeros(4), dim=6), mia_split, "entropy")
        assert res.degenerate

    def test_too_few_test_samples(self, small_split, small_original):
        test = Dataset(small_split.test.features[:20], small_split.test.labels[:20], 4)
        sp = split_classwise(small_split.base, [1], test)
        with pytest.raises(ValueError):
            mia_score(small_original, sp)

    @pytest.mark.parametrize("variant", ["entropy", "confidence"])
    def test_deterministic(self, small_original, mia_split, variant):
        a = mia_score(small_original, mia_split, variant, 5)
        b = mia_score(small_original, mia_split, variant, 5)
        assert a == b
        assert 0.0 <= a.value <= 100.0


class TestJSD:
    def test_self_is_zero(self, small_original, small_split):
        assert jsd_to_reference(small_original, small_original, small_split.test_view()) == 0.0

    def test_one_hot_disagreement(self, small_split):
        a = constant_net(2, [100.0, -100.0])
        b = constant_net(2, [-100.0, 100.0])
        data = Dataset(np.zeros((4, 3)), np.array([0, 1, 0, 1]), 2).view()
        assert jsd_to_reference(a, b, data) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_symmetric(self, small_original, small_retrain, small_split):
        data = small_split.test_view()
        ab = jsd_to_reference(small_original, small_retrain, data)
        ba = jsd_to_reference(small_retrain, small_original, data)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert 0.0 < ab <= math.log(2.0)

    def test_class_count_mismatch(self, small_split):
        with pytest.raises(ValueError):
            jsd_to_reference(constant_net(2, [0, 0], 6), constant_net(3, [0, 0, 0], 6),
                             small_split.test_view())


class TestRecoveryProbe:
    def test_encoder_untouched(self, small_original, small_split):
        before = small_original.digest()
        recovery_probe(small_original, small_split, 0.25, 0, stratify=True)
        assert small_original.digest() == before

    def test_full_fraction_recovers(self, small_original, small_split):
        test = small_split.test
        forget_test = test.view(np.flatnonzero(test.labels == 1))
        acc = recovery_probe(small_original, small_split, 1.0, 0)
        assert acc >= evaluate_accuracy(small_original, forget_test) - 0.05

    def test_original_beats_retrain(self, small_original, small_retrain, small_split):
        o = recovery_probe(small_original, small_split, 0.25, 0, stratify=True)
        r = recovery_probe(small_retrain, small_split, 0.25, 0, stratify=True)
        assert o >= r

    def test_missing_forget_class(self, small_original, small_split):
        n = len(small_split.base)
        seed = next(s for s in range(100)
                    if small_split.base.labels[subsample(np.arange(n), 1.0 / n, s)][0] != 1)
        with pytest.raises(ValueError):
            recovery_probe(small_original, small_split, 1.0 / n, seed)

    def test_random_split_rejected(self, small_original, small_split):
        sp = split_random(small_split.base, 5, 0, small_split.test)
        with pytest.raises(ValueError):
            recovery_probe(small_original, sp)

    def test_desk_gap(self, desk):
        gap = desk.values("Original", "probe") - desk.values("Retrain", "probe")
        assert np.all(gap >= 10.0)
