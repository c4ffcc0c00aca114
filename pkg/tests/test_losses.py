import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionprompt.errors import ConfigError, DataError
from regionprompt.losses import (
    class_probs,
    group_loss,
    learnable_bg_loss,
    learnable_bg_prob,
    objective_grad,
    positive_loss,
    score_entropy,
    soft_bg_loss,
)

from oracles import cosine, realize, softmax


class TestClassProbs:
    def test_two_classes_unit_temperature(self):
        p = class_probs([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 1.0)
        np.testing.assert_allclose(p, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)
        np.testing.assert_allclose(p, [0.73106, 0.26894], atol=5e-6)

    def test_equal_cosines_are_uniform(self):
        assert np.array_equal(class_probs([1.0, 0, 0, 0, 0], np.eye(5)[1:], 0.01), np.full(4, 0.25))

    def test_sharp_temperature(self):
        p = class_probs([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 0.01)
        assert abs(p[0] - 1 / (1 + math.exp(-100))) < 1e-15
        assert abs(p[0] - 1.0) < 1e-12

    def test_matches_pure_python_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            f, emb = rng.normal(size=8), rng.normal(size=(6, 8))
            tau = rng.uniform(0.01, 1.0)
            want = softmax([cosine(f, t) / tau for t in emb])
            np.testing.assert_allclose(class_probs(f, emb, tau), want, rtol=1e-7, atol=1e-14)

    def test_zero_region(self):
        with pytest.raises(DataError):
            class_probs(np.zeros(3), np.eye(3), 1.0)

    @pytest.mark.parametrize("tau", [0.0, -1.0, math.inf])
    def test_bad_temperature(self, tau):
        with pytest.raises(ConfigError):
            class_probs([1.0, 0.0], np.eye(2), tau)

    def test_rows(self):
        rng = np.random.default_rng(1)
        f, emb = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
        rows = class_probs(f, emb, 0.1)
        for i in range(4):
            assert np.array_equal(rows[i], class_probs(f[i], emb, 0.1))


class TestPositiveLoss:
    def test_perfect(self):
        assert positive_loss([1.0, 0.0], 0, [[1.0, 0.0], [0.0, 1.0]], 1e-3) == 0.0

    def test_half(self):
        assert positive_loss([1.0, 0, 0], 0, np.eye(3)[1:], 1.0) == pytest.approx(math.log(2), abs=1e-15)
        assert positive_loss([1.0, 0, 0], 0, np.eye(3)[1:], 1.0) == pytest.approx(0.693147, abs=1e-6)

    def test_two_class_example(self):
        v = positive_loss([1.0, 0.0], 0, [[1.0, 0.0], [0.0, 1.0]], 1.0)
        assert v == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert v == pytest.approx(0.313262, abs=1e-6)

    def test_labels_by_id(self):
        assert positive_loss([1.0, 0.0], "b", [[0.0, 1.0], [1.0, 0.0]], 1e-3, ["a", "b"]) == 0.0
        with pytest.raises(DataError):
            positive_loss([1.0, 0.0], "z", np.eye(2), 1.0, ["a", "b"])

    def test_clamped(self):
        assert positive_loss([1.0, 0.0], 1, [[1.0, 0.0], [-1.0, 0.0]], 0.001) == pytest.approx(-math.log(1e-12))


class TestSoftBackground:
    def test_uniform_four_is_exact(self):
        assert soft_bg_loss(np.eye(5)[0], np.eye(5)[1:], 0.01) == math.log(4)
        assert soft_bg_loss(np.eye(5)[0], np.eye(5)[1:], 0.01) == pytest.approx(1.386294, abs=1e-6)

    def test_uniform_two(self):
        assert soft_bg_loss(np.eye(3)[0], np.eye(3)[1:], 1.0) == math.log(2)

    def test_peaked(self):
        p = np.array([0.97, 0.01, 0.01, 0.01])
        f, emb = realize(p, 0.1)
        want = -np.mean(np.log(p))
        assert soft_bg_loss(f, emb, 0.1) == pytest.approx(want, abs=1e-8)
        assert soft_bg_loss(f, emb, 0.1) == pytest.approx(3.46149, abs=1e-5)

    def test_needs_two_classes(self):
        with pytest.raises(DataError):
            soft_bg_loss([1.0, 0.0], [[1.0, 0.0]], 1.0)

    def test_uniform_is_strict_minimum(self):
        rng = np.random.default_rng(7)
        for c in (2, 4, 20):
            floor = math.log(c)
            for _ in range(100):
                p = rng.dirichlet(np.ones(c))
                tau = 1.8 / max(np.ptp(np.log(p)), 1e-3)
                f, emb = realize(p, tau)
                assert soft_bg_loss(f, emb, tau) > floor


class TestLearnableBackground:
    def test_example(self):
        f = np.eye(4)[0]
        p = learnable_bg_prob(f, np.eye(4)[1:3], f, 1.0)
        assert p == pytest.approx(math.e / (2 + math.e), abs=1e-12)
        assert p == pytest.approx(0.576117, abs=1e-6)
        assert learnable_bg_loss(p) == pytest.approx(0.551445, abs=1e-6)

    def test_symmetric(self):
        f = np.eye(6)[0]
        assert learnable_bg_prob(f, np.eye(6)[1:5], np.eye(6)[5], 0.3) == pytest.approx(1 / 5, abs=1e-15)

    def test_sharpening_limit(self):
        f = np.array([1.0, 0.2, 0.0])
        emb = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        assert abs(learnable_bg_prob(f, emb, f, 0.01) - 1.0) < 1e-9

    def test_loss_values(self):
        assert learnable_bg_loss(1.0) == 0.0
        assert learnable_bg_loss(1 / 3) == pytest.approx(1.098612, abs=1e-6)
        assert learnable_bg_loss(0.0) == pytest.approx(-math.log(1e-12))


class TestGroupLoss:
    # four orthonormal classes; tau = 1/ln 3 makes the positive's p_c = 3/6
    TAU = 1 / math.log(3)
    EMB = np.eye(5)[:4]
    POS = np.eye(5)[0]
    NEG = np.eye(5)[4]

    def test_sum_of_means(self):
        v = group_loss([self.POS], [0], [self.NEG], self.EMB, "soft_bg", self.TAU)
        assert v == pytest.approx(math.log(2) + math.log(4), abs=1e-12)
        assert v == pytest.approx(2.079441, abs=1e-6)

    def test_no_bg_drops_negatives(self):
        v = group_loss([self.POS], [0], [self.NEG], self.EMB, "no_bg", self.TAU)
        assert v == pytest.approx(0.693147, abs=1e-6)

    def test_mean_invariance(self):
        one = group_loss([self.POS], [0], [self.NEG], self.EMB, "soft_bg", self.TAU)
        two = group_loss([self.POS], [0], [self.NEG, self.NEG], self.EMB, "soft_bg", self.TAU)
        assert one == two

    def test_empty_positives(self):
        with pytest.raises(DataError):
            group_loss(np.zeros((0, 5)), [], [self.NEG], self.EMB)

    def test_learnable_mode(self):
        v = group_loss([self.POS], [0], [self.NEG], self.EMB, "learnable_bg", self.TAU, t_bg=self.NEG)
        want = math.log(2) - math.log(math.exp(1 / self.TAU) / (4 + math.exp(1 / self.TAU)))
        assert v == pytest.approx(want, abs=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            group_loss([self.POS], [0], [], self.EMB, "other")

    def test_agrees_with_single_term_functions(self):
        rng = np.random.default_rng(3)
        emb = rng.normal(size=(5, 8))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        pf, nf = rng.normal(size=(4, 8)), rng.normal(size=(3, 8))
        labels = [0, 2, 4, 1]
        want = np.mean([soft_bg_loss(n, emb, 0.2) for n in nf]) + np.mean(
            [positive_loss(p, c, emb, 0.2) for p, c in zip(pf, labels)])
        assert group_loss(pf, labels, nf, emb, "soft_bg", 0.2) == pytest.approx(want, rel=1e-9)


def _unit(rng, shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@pytest.mark.parametrize("mode", ["soft_bg", "learnable_bg", "no_bg"])
def test_embedding_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(4)
    emb, bg = _unit(rng, (5, 6)), _unit(rng, 6)
    pf, nf, labels = rng.normal(size=(4, 6)), rng.normal(size=(3, 6)), [0, 1, 4, 4]
    tau = 0.3
    _, d_emb, d_bg = objective_grad(pf, labels, nf, emb, mode, tau, bg)
    h = 1e-6
    for target, analytic in ((emb, d_emb), (bg, d_bg)):
        if analytic is None:
            assert mode != "learnable_bg"
            continue
        num = np.zeros_like(target)
        for i in np.ndindex(target.shape):
            old = target[i]
            target[i] = old + h
            up = objective_grad(pf, labels, nf, emb, mode, tau, bg)[0]
            target[i] = old - h
            down = objective_grad(pf, labels, nf, emb, mode, tau, bg)[0]
            target[i] = old
            num[i] = (up - down) / (2 * h)
        assert np.max(np.abs(num - analytic)) / np.max(np.abs(num)) < 1e-6


class TestProperties:
    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            c = rng.integers(2, 40)
            p = class_probs(rng.normal(size=16), rng.normal(size=(c, 16)), rng.uniform(0.005, 2.0))
            assert abs(p.sum() - 1.0) <= 1e-12
            assert np.all(p >= 0)

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0, 3.7, 1e-3])
    def test_scale_invariance_is_exact(self, alpha):
        rng = np.random.default_rng(1)
        for _ in range(300):
            f, emb = rng.normal(size=32), rng.normal(size=(20, 32))
            assert np.array_equal(class_probs(alpha * f, emb, 0.01), class_probs(f, emb, 0.01))

    def test_max_probability_decreases_with_temperature(self):
        rng = np.random.default_rng(2)
        f, emb = rng.normal(size=8), rng.normal(size=(5, 8))
        taus = np.geomspace(0.05, 5.0, 40)
        peaks = [class_probs(f, emb, t).max() for t in taus]
        assert all(a > b for a, b in zip(peaks, peaks[1:]))

    @settings(max_examples=100)
    @given(st.integers(0, 2**31), st.sampled_from(["soft_bg", "learnable_bg", "no_bg"]))
    def test_losses_nonnegative(self, seed, mode):
        rng = np.random.default_rng(seed)
        emb = _unit(rng, (4, 6))
        v = group_loss(rng.normal(size=(3, 6)), rng.integers(0, 4, 3), rng.normal(size=(2, 6)), emb,
                       mode, rng.uniform(0.01, 1.0), _unit(rng, 6))
        assert v >= 0.0

    def test_entropy(self):
        assert score_entropy(np.full(4, 0.25)) == pytest.approx(math.log(4))
        assert score_entropy(np.array([1.0, 0.0])) == 0.0
