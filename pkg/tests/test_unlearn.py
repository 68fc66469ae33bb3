import math

import numpy as np
import pytest

from unlearnlab import nd
from unlearnlab.data import split_random
from unlearnlab.net import build_mlp, load_checkpoint
from unlearnlab.train import TrainConfig, evaluate_accuracy, train_supervised
from unlearnlab.unlearn import (METHODS, COLAParams, UnlearnRequest, make_params,
                                random_other_labels, run_method, second_best_labels, supcon_loss,
                                unlearn_cola)


def supcon_oracle(z, y, tau):
    """Direct evaluation of the supervised contrastive formula with explicit loops."""
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    terms = []
    for i in range(len(y)):
        pos = [p for p in range(len(y)) if p != i and y[p] == y[i]]
        if not pos:
            continue
        denom = sum(math.exp(z[i] @ z[a] / tau) for a in range(len(y)) if a != i)
        terms.append(np.mean([-math.log(math.exp(z[i] @ z[p] / tau) / denom) for p in pos]))
    return float(np.mean(terms)) if terms else 0.0


def forget_loss(net, split):
    return nd.cross_entropy(net.logits(split.forget.x), split.forget.y).item()


class TestSupCon:
    def test_two_same_class(self):
        z = np.array([[1.0, 0.0], [0.3, 0.7]])
        assert supcon_loss(z, [0, 0], 0.5).item() == 0.0

    def test_two_different_classes(self):
        z = np.array([[1.0, 0.0], [0.3, 0.7]])
        assert supcon_loss(z, [0, 1], 0.5).item() == 0.0

    def test_three_against_formula(self):
        z = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
        assert supcon_loss(z, [0, 0, 1], 1.0).item() == pytest.approx(
            supcon_oracle(z, [0, 0, 1], 1.0), abs=1e-12)

    def test_random_batch_against_formula(self):
        rng = np.random.default_rng(0)
        z, y = rng.standard_normal((7, 4)), rng.integers(0, 3, 7)
        assert supcon_loss(z, y, 0.3).item() == pytest.approx(supcon_oracle(z, y, 0.3), abs=1e-12)

    @pytest.mark.parametrize("b,tau", [(3, 0.1), (3, 1.0), (8, 0.1), (8, 1.0)])
    def test_gradient(self, b, tau):
        rng = np.random.default_rng(b)
        y = rng.integers(0, 2, b)
        graph = nd.Graph(lambda t: supcon_loss(t["z"], y, tau))
        assert nd.grad_check(graph, {"z": rng.standard_normal((b, 5))}) <= 1e-4

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            supcon_loss(np.ones((1, 2)), [0])
        with pytest.raises(ValueError):
            supcon_loss(np.ones((2, 2)), [0, 0], 0.0)


class TestLabels:
    def test_second_best(self):
        assert second_best_labels(np.array([[0.2, 5.0, 1.3]]), np.array([1]))[0] == 2

    def test_random_other_never_true(self, small_split):
        y = small_split.forget.y
        fake = random_other_labels(y, 4, 3)
        assert not np.any(fake == y)
        np.testing.assert_array_equal(fake, random_other_labels(y, 4, 3))


class TestFinetune:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0, learning_rate=0.1)

    def test_desk_rises_toward_retrain(self, desk):
        ua_o, ra_o = desk.values("Original", "UA"), desk.values("Original", "RA")
        ua, ra = desk.values("FT", "UA"), desk.values("FT", "RA")
        assert np.all(ua > ua_o)
        assert np.all(ua <= desk.values("Retrain", "UA"))
        assert np.all(ra >= 0.95 * ra_o)

    def test_l1_is_sparser(self, desk):
        for seed in desk.report["provenance"]["seeds"]:
            plain = load_checkpoint(desk.root / desk.cell("FT", seed)["checkpoint"])[0]
            sparse = load_checkpoint(desk.root / desk.cell("l1-sparse", seed)["checkpoint"])[0]
            zeros = lambda n: sum(int((np.abs(w) < 1e-8).sum()) for w in n.weights)
            assert zeros(sparse) > zeros(plain)


class TestRandomLabel:
    def test_relabels_exclude_truth(self, small_split, small_original):
        res = run_method("RL", small_original, small_split, 0)
        assert not np.any(res.extra["relabels"] == small_split.forget.y)

    def test_relabel_seed_deterministic(self, small_split, small_original):
        a = run_method("RL", small_original, small_split, 0, {"relabel_seed": 5})
        b = run_method("RL", small_original, small_split, 1, {"relabel_seed": 5})
        np.testing.assert_array_equal(a.extra["relabels"], b.extra["relabels"])

    def test_desk_forgets(self, desk):
        assert np.all(desk.values("RL", "UA") >= 90.0)


class TestNegGrad:
    def test_zero_alpha_is_finetune(self, small_split, small_original):
        ng = run_method("NegGrad", small_original, small_split, 4,
                        {"alpha": 0.0, "epochs": 3, "lr": 0.02})
        ft = run_method("FT", small_original, small_split, 4, {"epochs": 3, "lr": 0.02})
        assert ng.unlearned.digest() == ft.unlearned.digest()

    def test_forget_loss_rises(self, small_split, small_original):
        res = run_method("NegGrad", small_original, small_split, 0)
        assert forget_loss(res.unlearned, small_split) > forget_loss(small_original, small_split)

    def test_bad_alpha(self, small_split, small_original):
        with pytest.raises(ValueError):
            run_method("NegGrad", small_original, small_split, 0, {"alpha": 2.0})

    def test_desk(self, desk):
        assert np.all(desk.values("NegGrad", "UA") == 100.0)
        assert np.all(desk.values("NegGrad", "RA") >= 90.0)


class TestLastK:
    def test_eu_total_is_retrain(self, small_split, small_original):
        n = small_original.num_layers
        res = run_method("EU-k", small_original, small_split, 7, {"k": n, "epochs": 3})
        fresh = build_mlp(6, [16, 16, 8], 4, 7)
        cfg = TrainConfig(epochs=3, learning_rate=0.05, shuffle_seed=7)
        retrain = train_supervised(fresh, small_split.retain, cfg).network
        assert res.unlearned.digest() == retrain.digest()

    def test_cf_tiny_lr_is_noop(self, small_split, small_original):
        res = run_method("CF-k", small_original, small_split, 0, {"lr": 1e-12})
        diff = max(np.abs(a - b).max() for a, b in zip(res.unlearned.params(),
                                                        small_original.params()))
        assert diff < 1e-6

    @pytest.mark.parametrize("method", ["EU-k", "CF-k"])
    def test_frozen_prefix(self, small_split, small_original, method):
        res = run_method(method, small_original, small_split, 0, {"k": 1})
        frozen = range(small_original.num_layers - 1)
        assert res.unlearned.digest(frozen) == small_original.digest(frozen)

    def test_bad_k(self, small_split, small_original):
        with pytest.raises(ValueError):
            run_method("EU-k", small_original, small_split, 0, {"k": 0})


class TestHD:
    def test_encoder_unchanged(self, small_split, small_original):
        res = run_method("HD", small_original, small_split, 0)
        assert res.unlearned.encoder_digest() == small_original.encoder_digest()

    def test_random_mode_encoder_unchanged(self, small_split, small_original):
        sp = split_random(small_split.base, 5, 0, small_split.test)
        res = run_method("HD", small_original, sp, 0)
        assert res.unlearned.encoder_digest() == small_original.encoder_digest()

    def test_desk_forget_probability(self, desk, desk_split):
        for seed in desk.report["provenance"]["seeds"]:
            net = load_checkpoint(desk.root / desk.cell("HD", seed)["checkpoint"])[0]
            p = nd.softmax(net.logits(desk_split.forget.x))[:, 4]
            assert p.mean() < 1e-3
            assert evaluate_accuracy(net, desk_split.forget) == 0.0

    def test_desk_idi_near_one(self, desk):
        np.testing.assert_allclose(desk.values("HD", "IDI"), 1.0, atol=0.15)


class TestCOLA:
    def test_desk_plain(self, desk):
        assert np.all(desk.values("COLA", "UA") == 100.0)
        assert np.all(desk.values("COLA", "RA") >= 99.0)

    def test_desk_below_hd(self, desk):
        assert np.all(desk.values("COLA", "IDI") < desk.values("HD", "IDI"))

    def test_plus_pseudo_labels_exhaustive(self, small_split, small_original):
        sp = split_random(small_split.base, 10, 0, small_split.test)
        res = run_method("COLA+", small_original, sp, 0, {"collapse_epochs": 2})
        true, pseudo = res.extra["pseudo_true"], res.extra["pseudo_labels"]
        assert true.size >= 2 * 40
        assert not np.any(true == pseudo)

    def test_bad_variant(self, small_split, small_original):
        req = UnlearnRequest(small_original, small_split, "COLA", COLAParams(variant="odd"))
        with pytest.raises(ValueError):
            unlearn_cola(req)


class TestRegistry:
    def test_unknown_method(self):
        with pytest.raises(KeyError):
            make_params("SCRUB")

    def test_unknown_hyperparameter(self):
        with pytest.raises(KeyError):
            make_params("FT", {"momentum": 0.5})

    def test_defaults(self):
        assert make_params("l1-sparse").l1_lambda > 0
        assert make_params("CF-k").mode == "CF"
        assert make_params("COLA+").variant == "plus"

    @pytest.mark.parametrize("method", sorted(METHODS))
    def test_deterministic(self, method, small_split, small_original):
        a = run_method(method, small_original, small_split, 3)
        b = run_method(method, small_original, small_split, 3)
        assert a.unlearned.digest() == b.unlearned.digest()
        assert a.rte_seconds > 0


class TestEfficiency:
    def test_faster_than_retrain(self, desk):
        retrain = desk.mean("Retrain", "RTE")
        for label in METHODS:
            if label == "COLA+":
                continue
            assert desk.mean(label, "RTE") < retrain, label
