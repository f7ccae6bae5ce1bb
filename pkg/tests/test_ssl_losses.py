import numpy as np
import pytest
from hypothesis import given, strategies as st

from bilevel_ssl import autodiff as ad
from bilevel_ssl.models import Architecture, features_of, init_predictor_params, init_task_params, logits_of
from bilevel_ssl.params import ParamSet
from bilevel_ssl.ssl_losses import (STRONG, WEAK, AugmentSpec, LabeledBatch, UnlabeledBatch, augment,
                                    consistency_loss, consistency_losses, labeled_loss, pseudo_labels,
                                    training_loss)

IDENTITY = AugmentSpec()
ARCH = Architecture(num_classes=4)


def confident_theta(cls_bias=(12.0, 0.0, 0.0, 0.0)):
    theta = init_task_params(0, ARCH)
    theta["cls.1.b"] = np.array(cls_bias)
    return theta


def batches(rng, n_lab=3, n_unl=4):
    lab = LabeledBatch(np.arange(n_lab), rng.normal(size=(n_lab, 16, 3)), rng.integers(0, 4, n_lab))
    raw = rng.normal(size=(n_unl, 16, 3))
    weak = np.stack([augment(c, WEAK, rng) for c in raw])
    strong = np.stack([augment(c, STRONG, rng) for c in raw])
    return lab, raw, weak, strong


class TestLabeledLoss:
    def test_large_margin_goes_to_zero(self):
        theta = confident_theta((200.0, 0.0, 0.0, 0.0))
        assert labeled_loss(theta, np.zeros((2, 8, 3)), [0, 0]).item() < 1e-30

    def test_uniform_eight_classes(self):
        arch = Architecture()
        theta = ParamSet({k: np.zeros_like(v) for k, v in init_task_params(0, arch).items()})
        assert labeled_loss(theta, np.ones((3, 8, 3)), [0, 5, 7]).item() == pytest.approx(np.log(8), abs=1e-12)
        assert np.log(8) == pytest.approx(2.0794, abs=1e-4)

    def test_batch_mean(self, rng):
        theta = init_task_params(1, ARCH)
        x, y = rng.normal(size=(5, 16, 3)), rng.integers(0, 4, 5)
        each = [labeled_loss(theta, x[i:i + 1], y[i:i + 1]).item() for i in range(5)]
        assert labeled_loss(theta, x, y).item() == pytest.approx(np.mean(each), rel=1e-12)

    def test_missing_labels(self):
        theta = init_task_params(1, ARCH)
        with pytest.raises(ValueError):
            labeled_loss(theta, np.zeros((2, 8, 3)), [0, -1])
        with pytest.raises(ValueError):
            labeled_loss(theta, np.zeros((2, 8, 3)), [0, None])


class TestAugment:
    def test_identity(self, rng):
        c = rng.normal(size=(32, 3))
        np.testing.assert_array_equal(augment(c, IDENTITY, rng), c)

    def test_rotation_is_isometry(self, rng):
        c = rng.normal(size=(32, 3))
        out = augment(c, AugmentSpec(rotation=np.pi), rng)
        d = lambda x: np.linalg.norm(x[:, None] - x[None], axis=-1)
        np.testing.assert_allclose(d(out), d(c), atol=1e-9)

    def test_jitter_displacement(self):
        sigma, rng = 0.01, np.random.default_rng(7)
        c = np.random.default_rng(0).normal(size=(1024, 3))
        disp = np.mean([np.linalg.norm(augment(c, AugmentSpec(jitter=sigma), rng) - c, axis=1).mean()
                        for _ in range(100)])
        assert disp == pytest.approx(sigma * np.sqrt(3) * np.sqrt(2 / np.pi), rel=0.2)
        # the exact chi(3) mean is sigma * sqrt(8 / pi)
        assert disp == pytest.approx(sigma * np.sqrt(8 / np.pi), rel=0.01)

    def test_dropout_keeps_point_count_and_members(self, rng):
        c = rng.normal(size=(40, 3))
        out = augment(c, AugmentSpec(dropout=0.5), rng)
        assert out.shape == c.shape
        assert {tuple(p) for p in out} <= {tuple(p) for p in c}

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            AugmentSpec(dropout=1.0)


class TestConsistency:
    def test_below_threshold_is_masked(self, rng):
        theta = confident_theta((0.0, 0.0, 0.0, 0.0))
        theta["cls.1.w"] = np.zeros_like(theta["cls.1.w"])  # uniform: confidence 0.25
        assert consistency_loss(theta, rng.normal(size=(16, 3)), 0.95, WEAK, STRONG, rng).item() == 0.0

    def test_identity_views(self, rng):
        theta = confident_theta()
        cloud = rng.normal(size=(16, 3))
        loss = consistency_loss(theta, cloud, 0.95, IDENTITY, IDENTITY, rng).item()
        z = logits_of(theta, cloud[None]).data[0]
        p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        assert p.max() >= 0.95
        assert loss == pytest.approx(-np.log(p.max()), rel=1e-12)

    def test_no_gradient_through_weak_view(self, rng):
        theta = confident_theta()
        weak, strong = rng.normal(size=(3, 16, 3)), rng.normal(size=(3, 16, 3))
        labels, mask = pseudo_labels(theta, weak, 0.5)
        assert mask.all()

        def grad(fn):
            tape = ad.Tape()
            with tape:
                return tape.gradient(fn(tape.watch(theta)))

        full = grad(lambda t: ad.sum(consistency_losses(t, weak, strong, 0.5)[1]))
        strong_only = grad(lambda t: ad.sum(ad.softmax_cross_entropy(logits_of(t, strong), labels)))
        assert full.equal(strong_only)

    def test_threshold_range(self, rng):
        with pytest.raises(ValueError):
            pseudo_labels(confident_theta(), rng.normal(size=(1, 8, 3)), 0.0)


class TestTrainingLoss:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.theta = init_task_params(2, ARCH)
        self.theta["cls.1.b"] = np.array([3.0, 0.0, 0.0, 0.0])
        self.phi = init_predictor_params(2, ARCH)
        self.lab, raw, weak, strong = batches(rng)
        self.unl = UnlabeledBatch(np.arange(10, 14), weak, strong, features_of(self.theta, raw))
        self.per = np.zeros(4)
        idx, losses = consistency_losses(self.theta, weak, strong, 0.5)
        self.per[idx] = losses.data
        assert (self.per > 0).sum() >= 2

    def value(self, weights, threshold=0.5, unl=None):
        return training_loss(self.theta, self.phi, self.lab, unl or self.unl, threshold, weights).item()

    def test_zero_weights(self):
        base = labeled_loss(self.theta, self.lab.clouds, self.lab.labels).item()
        assert self.value(np.zeros(4)) == base

    def test_unit_weights(self):
        base = labeled_loss(self.theta, self.lab.clouds, self.lab.labels).item()
        assert self.value(np.ones(4)) == pytest.approx(base + self.per.mean(), rel=1e-12)

    def test_half_weight_single_sample(self):
        j = int(np.flatnonzero(self.per)[0])
        one = UnlabeledBatch(self.unl.ids[j:j + 1], self.unl.weak[j:j + 1], self.unl.strong[j:j + 1],
                             self.unl.features[j:j + 1])
        base = labeled_loss(self.theta, self.lab.clouds, self.lab.labels).item()
        assert self.value(np.array([0.5]), unl=one) == pytest.approx(base + 0.5 * self.per[j], rel=1e-12)

    def test_predicted_weights_depend_on_phi(self):
        tape = ad.Tape()
        with tape:
            phi = tape.watch(self.phi)
            g = tape.gradient(training_loss(self.theta, phi, self.lab, self.unl, 0.5))
        assert g.norm() > 0

    def test_empty_labeled(self):
        empty = LabeledBatch(np.zeros(0, int), np.zeros((0, 16, 3)), np.zeros(0, int))
        with pytest.raises(ValueError):
            training_loss(self.theta, self.phi, empty, self.unl)


@given(st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4))
def test_training_loss_linear_in_weights(weights):
    t = TestTrainingLoss()
    t.setup_method()
    base = labeled_loss(t.theta, t.lab.clouds, t.lab.labels).item()
    w = np.array(weights)
    assert t.value(w) == pytest.approx(base + np.dot(w, t.per) / 4, rel=1e-10, abs=1e-12)
