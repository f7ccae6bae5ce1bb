"""Small closed-form and point-cloud problems used to check the meta-gradient machinery."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import make_block, make_shape, strong_transform
from .models import Architecture, features_of, init_predictor_params, init_task_params
from .params import ParamSet
from .ssl_losses import STRONG, WEAK, LabeledBatch, UnlabeledBatch, augment_batch
from .training import SSLObjective


class CubicExpObjective:
    """``L_tr = sum_k sigmoid(c_k.phi) * (exp(a_k.theta) + (b_k.theta)^3 / 3)``, ``L_val = |D theta - y|^2 / 2``.

    Every derivative needed by the one-step meta-gradient has a closed form,
    and the third derivatives in ``theta`` are non-zero, so forward and
    central differences have visibly different truncation errors.
    """

    def __init__(self, seed: int = 0, n_theta: int = 12, n_phi: int = 10, terms: int = 6):
        rng = np.random.default_rng(seed)
        self.A = rng.normal(0.0, 0.3, size=(terms, n_theta))
        self.B = rng.normal(0.0, 0.3, size=(terms, n_theta))
        self.C = rng.normal(0.0, 0.5, size=(terms, n_phi))
        self.D = rng.normal(0.0, 1.0, size=(n_theta, n_theta))
        self.y = rng.normal(0.0, 1.0, size=n_theta)
        self.theta = ParamSet({"t": rng.normal(0.0, 0.5, size=n_theta)})
        self.phi = ParamSet({"p": rng.normal(0.0, 0.5, size=n_phi)})

    def train_loss(self, theta, phi) -> Tensor:
        t = ad.reshape(theta["t"], (1, -1))
        s = ad.sigmoid(ad.matmul(ad.reshape(phi["p"], (1, -1)), self.C.T))
        q = ad.matmul(t, self.B.T)
        f = ad.add(ad.exp(ad.matmul(t, self.A.T)), ad.mul(ad.mul(ad.mul(q, q), q), 1.0 / 3.0))
        return ad.sum(ad.mul(s, f))

    def val_loss(self, theta) -> Tensor:
        r = ad.sub(ad.matmul(ad.reshape(theta["t"], (1, -1)), self.D.T), self.y[None])
        return ad.mul(ad.sum(ad.square(r)), 0.5)

    # closed forms, written directly in numpy
    def _s(self, p):
        return 1.0 / (1.0 + np.exp(-(self.C @ p)))

    def grad_theta(self, t, p) -> np.ndarray:
        s = self._s(p)
        return self.A.T @ (s * np.exp(self.A @ t)) + self.B.T @ (s * (self.B @ t) ** 2)

    def mixed(self, t, p) -> np.ndarray:
        """``d2 L_tr / dphi dtheta`` as an (n_phi, n_theta) matrix."""
        s = self._s(p)
        inner = np.exp(self.A @ t)[:, None] * self.A + ((self.B @ t) ** 2)[:, None] * self.B
        return self.C.T @ ((s * (1 - s))[:, None] * inner)

    def exact_meta_gradient(self, alpha: float) -> np.ndarray:
        t, p = self.theta["t"], self.phi["p"]
        t_star = t - alpha * self.grad_theta(t, p)
        v = self.D.T @ (self.D @ t_star - self.y)
        return -alpha * self.mixed(t, p) @ v


def _clouds(rng, classes, n_points):
    return np.stack([make_shape(rng, int(c), n_points) for c in classes])


def _strong_clouds(rng, count, n_points):
    return np.stack([strong_transform(make_block(rng, n_points, 2)[0], rng) for _ in range(count)])


def _unlabeled(rng, theta, raw, ids) -> UnlabeledBatch:
    return UnlabeledBatch(ids, augment_batch(raw, WEAK, rng), augment_batch(raw, STRONG, rng),
                          features_of(theta, raw), np.array(["U"] * len(ids)))


TINY_ARCH = Architecture(encoder=(3, 16, 8), classifier_hidden=(), predictor=(8, 6, 4, 1), num_classes=2)


@dataclass
class PointInstance:
    objective: SSLObjective
    theta: ParamSet
    phi: ParamSet


def two_class_instance(seed: int = 0, n_points: int = 32) -> PointInstance:
    """Ten clouds: 2 labeled, 4 validation, 2 clean and 2 corrupted unlabeled.

    With two classes and threshold 0.5 every unlabeled sample is confident,
    so the pseudo-label mask cannot flip under small perturbations.
    """
    rng = np.random.default_rng([seed, 3])
    theta = init_task_params(seed, TINY_ARCH)
    phi = init_predictor_params(seed, TINY_ARCH)
    lab = LabeledBatch(np.array([0, 1]), _clouds(rng, [0, 1], n_points), np.array([0, 1]))
    val_x = _clouds(rng, [0, 1, 0, 1], n_points)
    raw = np.concatenate([_clouds(rng, [0, 1], n_points), _strong_clouds(rng, 2, n_points)])
    unl = _unlabeled(rng, theta, raw, np.arange(6, 10))
    obj = SSLObjective(lab, unl, np.arange(2, 6), val_x, np.array([0, 1, 0, 1]),
                       features_of(theta, val_x), threshold=0.5)
    return PointInstance(obj, theta, phi)


def stationary_instance(seed: int = 0, n_points: int = 32, shared: bool = True) -> PointInstance:
    """Two-class task network at an exact stationary point of the labeled loss.

    The final classifier layer has zero weights and a bias giving class
    probabilities (0.9, 0.1) for every input; each labeled cloud appears nine
    times with label 0 and once with label 1, so its gradients ``p - e_c``
    cancel. Unlabeled clouds are pseudo-labeled 0 with confidence 0.9, away
    from any tie. ``shared=True`` reuses the labeled batch for validation; otherwise
    the validation clouds come from a shifted distribution (stretched,
    offset shapes, all of class 1).
    """
    rng = np.random.default_rng([seed, 5])
    arch = Architecture(encoder=(3, 16, 8), classifier_hidden=(6,), predictor=(8, 6, 4, 1), num_classes=2)
    theta = init_task_params(seed, arch)
    theta["cls.1.w"] = np.zeros_like(theta["cls.1.w"])
    theta["cls.1.b"] = np.log(np.array([9.0, 1.0]))
    phi = init_predictor_params(seed, arch)
    base = _clouds(rng, [0, 1], n_points)
    clouds = np.repeat(base, 10, axis=0)
    labels = np.tile([0] * 9 + [1], len(base))
    lab = LabeledBatch(np.arange(len(labels)), clouds, labels)
    raw = np.concatenate([_clouds(rng, [0, 1], n_points), _strong_clouds(rng, 2, n_points)])
    unl = _unlabeled(rng, theta, raw, np.arange(100, 100 + len(raw)))
    threshold = 0.8
    if shared:
        obj = SSLObjective(lab, unl, lab.ids, lab.clouds, lab.labels, features_of(theta, lab.clouds),
                           threshold, shared_validation=True)
    else:
        val_x = _clouds(rng, [1, 1], n_points) * np.array([1.6, 1.6, 0.5]) + np.array([0.3, -0.2, 0.4])
        obj = SSLObjective(lab, unl, np.array([200, 201]), val_x, np.array([1, 1]),
                           features_of(theta, val_x), threshold)
    return PointInstance(obj, theta, phi)
