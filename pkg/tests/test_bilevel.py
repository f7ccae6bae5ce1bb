import numpy as np
import pytest
from hypothesis import given, strategies as st

from bilevel_ssl import autodiff as ad
from bilevel_ssl import bilevel
from bilevel_ssl.bilevel import (DegenerateStep, MetaStepInputs, epsilon_of, hvp_meta_gradient, meta_step,
                                 mixed_partials, oracle_meta_gradient, virtual_step)
from bilevel_ssl.instances import CubicExpObjective, stationary_instance, two_class_instance
from bilevel_ssl.params import ParamSet
from bilevel_ssl.ssl_losses import UnlabeledBatch
from bilevel_ssl.training import SSLObjective


class Quadratic:
    """``L_tr = t.A.t / 2 + p.B.t + c.t``; ``L_val = |D t - y|^2 / 2`` or linear ``y.t``."""

    def __init__(self, seed, n_t=8, n_p=6, linear_val=False):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(n_t, n_t))
        self.A = m @ m.T / n_t + np.eye(n_t)
        self.B = rng.normal(size=(n_p, n_t))
        self.c = rng.normal(size=n_t)
        self.D = rng.normal(size=(n_t, n_t))
        self.y = rng.normal(size=n_t)
        self.linear_val = linear_val
        self.theta = ParamSet({"t": rng.normal(size=n_t)})
        self.phi = ParamSet({"p": rng.normal(size=n_p)})

    def train_loss(self, theta, phi):
        t = ad.reshape(theta["t"], (1, -1))
        p = ad.reshape(phi["p"], (1, -1))
        quad = ad.mul(ad.sum(ad.mul(ad.matmul(t, self.A), t)), 0.5)
        return ad.add(ad.add(quad, ad.sum(ad.mul(ad.matmul(p, self.B), t))), ad.sum(ad.mul(t, self.c)))

    def val_loss(self, theta):
        t = ad.reshape(theta["t"], (1, -1))
        if self.linear_val:
            return ad.sum(ad.mul(t, self.y))
        return ad.mul(ad.sum(ad.square(ad.sub(ad.matmul(t, self.D.T), self.y))), 0.5)

    def unlabeled_weights(self, phi):
        return ad.sigmoid(phi["p"])

    def validation_weights(self, phi):
        return ad.sigmoid(ad.neg(phi["p"]))

    def exact(self, alpha):
        t = self.theta["t"]
        g = self.A @ t + self.B.T @ self.phi["p"] + self.c
        ts = t - alpha * g
        v = self.y if self.linear_val else self.D.T @ (self.D @ ts - self.y)
        return -alpha * self.B @ v


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestVirtualStep:
    def test_arithmetic(self):
        out = virtual_step(ParamSet({"w": 1.0}), ParamSet({"w": 2.0}), 0.1)
        assert out["w"] == pytest.approx(0.8)

    def test_fixed_points(self, rng):
        th = ParamSet({"w": rng.normal(size=3)})
        assert virtual_step(th, th * 0.0, 0.5).equal(th)
        assert virtual_step(th, th, 0.0).equal(th)

    def test_missing_entry(self):
        with pytest.raises(KeyError):
            virtual_step(ParamSet({"a": 1.0, "b": 1.0}), ParamSet({"a": 1.0}), 0.1)

    def test_input_untouched(self):
        th = ParamSet({"w": [1.0]})
        virtual_step(th, ParamSet({"w": [1.0]}), 0.5)
        assert th["w"][0] == 1.0


class TestEpsilon:
    def test_norm_two(self):
        assert epsilon_of(ParamSet({"a": [2.0, 0.0]})) == 0.005

    def test_small(self):
        assert epsilon_of(ParamSet({"a": [0.006], "b": [0.008]})) == pytest.approx(1.0)
        assert epsilon_of(ParamSet({"a": [0.0, 1e-2]})) == 1.0

    def test_zero(self):
        with pytest.raises(DegenerateStep):
            epsilon_of(ParamSet({"a": [0.0]}))


class TestHVP:
    def test_quadratic_matches_dense_mixed_partials(self):
        obj = Quadratic(0)
        alpha = 0.05
        m = mixed_partials(obj, obj.theta, obj.phi)
        np.testing.assert_allclose(m, obj.B, atol=1e-6)
        t = obj.theta["t"]
        g = obj.A @ t + obj.B.T @ obj.phi["p"] + obj.c
        ts = t - alpha * g
        oracle = -alpha * m @ (obj.D.T @ (obj.D @ ts - obj.y))
        got = hvp_meta_gradient(obj, obj.theta, obj.phi, alpha).grad["p"]
        assert rel(got, oracle) <= 1e-3
        assert rel(got, obj.exact(alpha)) <= 1e-9

    def test_cubic_central_beats_forward(self):
        obj = CubicExpObjective(0)
        exact = obj.exact_meta_gradient(0.1)
        central = hvp_meta_gradient(obj, obj.theta, obj.phi, 0.1, "central").grad["p"]
        forward = hvp_meta_gradient(obj, obj.theta, obj.phi, 0.1, "forward").grad["p"]
        assert rel(central, exact) <= 1e-3
        assert rel(forward, exact) > rel(central, exact)

    def test_unknown_scheme(self):
        obj = Quadratic(0)
        with pytest.raises(ValueError):
            hvp_meta_gradient(obj, obj.theta, obj.phi, 0.1, "backward")

    def test_empty_unlabeled_gives_exact_zero(self):
        inst = two_class_instance(0)
        o = inst.objective
        empty = UnlabeledBatch(np.zeros(0, int), o.unlabeled.weak[:0], o.unlabeled.strong[:0],
                               o.unlabeled.features[:0])
        obj = SSLObjective(o.labeled, empty, o.val_ids, o.val_clouds, o.val_labels, o.val_features, o.threshold)
        got = hvp_meta_gradient(obj, inst.theta, inst.phi, 0.01).grad
        assert got.flat().tobytes() == np.zeros(inst.phi.size).tobytes()

    def test_matches_oracle_direction(self):
        inst = two_class_instance(0)
        hvp = hvp_meta_gradient(inst.objective, inst.theta, inst.phi, 0.1).grad.flat()
        orc = oracle_meta_gradient(inst.objective, inst.theta, inst.phi, 0.1).flat()
        assert hvp @ orc / (np.linalg.norm(hvp) * np.linalg.norm(orc)) >= 0.99

    def test_counter(self):
        obj = Quadratic(1)
        before = bilevel.calls["hvp"]
        hvp_meta_gradient(obj, obj.theta, obj.phi, 0.1)
        assert bilevel.calls["hvp"] == before + 1


class TestOracle:
    def test_linear_in_alpha(self):
        obj = Quadratic(2, linear_val=True)
        a = oracle_meta_gradient(obj, obj.theta, obj.phi, 0.05)["p"]
        b = oracle_meta_gradient(obj, obj.theta, obj.phi, 0.1)["p"]
        np.testing.assert_allclose(b, 2 * a, rtol=1e-6)

    def test_constant_weights_give_zero(self):
        class Detached(Quadratic):
            def train_loss(self, theta, phi):
                return super().train_loss(theta, ParamSet({"p": np.ones(6)}))
        obj = Detached(0)
        assert not oracle_meta_gradient(obj, obj.theta, obj.phi, 0.1)["p"].any()

    def test_step_convergence(self):
        obj = CubicExpObjective(1)
        a = oracle_meta_gradient(obj, obj.theta, obj.phi, 0.1, h=1e-4).flat()
        b = oracle_meta_gradient(obj, obj.theta, obj.phi, 0.1, h=1e-5).flat()
        assert np.linalg.norm(a - b) < 0.01 * np.linalg.norm(b)

    def test_size_limit(self):
        obj = Quadratic(0, n_p=501)
        with pytest.raises(ValueError):
            oracle_meta_gradient(obj, obj.theta, obj.phi, 0.1)


class TestTrivialSolution:
    def test_shared_validation_vanishes(self):
        inst = stationary_instance(0, shared=True)
        o = inst.objective
        tape = ad.Tape()
        with tape:
            g = tape.gradient(o.val_loss(tape.watch(inst.theta)))
        assert g.norm() <= 1e-8
        assert hvp_meta_gradient(o, inst.theta, inst.phi, 0.01).grad.norm() <= 1e-6

    def test_held_out_validation_does_not(self):
        inst = stationary_instance(0, shared=False)
        assert hvp_meta_gradient(inst.objective, inst.theta, inst.phi, 0.01).grad.norm() >= 1e-3

    def test_overlap_rejected_without_flag(self):
        inst = stationary_instance(0, shared=True)
        o = inst.objective
        with pytest.raises(ValueError):
            SSLObjective(o.labeled, o.unlabeled, o.labeled.ids, o.val_clouds, o.val_labels, o.val_features, 0.8)


class TestMetaStep:
    def test_hvp_only(self):
        obj = Quadratic(3)
        inp = MetaStepInputs(obj.theta, obj.phi, obj, alpha=0.1, meta_rate=0.5)
        new, rep = meta_step(inp)
        hv = hvp_meta_gradient(obj, obj.theta, obj.phi, 0.1).grad
        assert new.equal(obj.phi - hv * 0.5)
        assert rep.hvp_norm == pytest.approx(hv.norm())

    def test_regularizers_combine(self):
        obj = Quadratic(3)
        targets = np.full(6, 0.3)
        inp = MetaStepInputs(obj.theta, obj.phi, obj, alpha=0.1, gamma=0.1, xi=0.01, eta=0.02,
                             meta_rate=1.0, reg_targets=targets)
        new, rep = meta_step(inp)
        from bilevel_ssl.regularizers import loss_entropy, loss_matr, weight_od

        def g(fn):
            tape = ad.Tape()
            with tape:
                return tape.gradient(fn(tape.watch(obj.phi)))

        expected = (hvp_meta_gradient(obj, obj.theta, obj.phi, 0.1).grad
                    + g(lambda p: loss_matr(obj.unlabeled_weights(p), targets)) * 0.1
                    + g(lambda p: loss_entropy(obj.unlabeled_weights(p))) * 0.01
                    + g(lambda p: weight_od(obj.validation_weights(p))) * 0.02)
        np.testing.assert_allclose((obj.phi - new)["p"], expected["p"], rtol=1e-12)
        for name in ("hvp_norm", "reg_norm", "ent_norm", "od_norm", "total_norm"):
            v = getattr(rep, name)
            assert v >= 0 and np.isfinite(v)

    def test_all_zero_terms(self):
        obj = Quadratic(4, linear_val=True)
        obj.y = np.zeros_like(obj.y)
        new, rep = meta_step(MetaStepInputs(obj.theta, obj.phi, obj, alpha=0.1))
        assert rep.skipped
        assert new.equal(obj.phi)

    def test_degenerate_step_applies_regularizers_only(self):
        obj = Quadratic(4, linear_val=True)
        obj.y = np.zeros_like(obj.y)
        new, rep = meta_step(MetaStepInputs(obj.theta, obj.phi, obj, alpha=0.1, eta=1.0, meta_rate=1.0))
        assert rep.skipped and rep.od_norm > 0
        assert not new.equal(obj.phi)

    def test_input_validation(self):
        obj = Quadratic(0)
        with pytest.raises(ValueError):
            MetaStepInputs(obj.theta, obj.phi, obj, alpha=0.0)
        with pytest.raises(ValueError):
            MetaStepInputs(obj.theta, obj.phi, obj, alpha=0.1, gamma=-1)


@given(seed=st.integers(0, 10**6), alpha=st.floats(1e-3, 0.2))
def test_hvp_exact_on_bilinear_coupling(seed, alpha):
    obj = Quadratic(seed)
    got = hvp_meta_gradient(obj, obj.theta, obj.phi, alpha).grad["p"]
    assert rel(got, obj.exact(alpha)) <= 1e-6
