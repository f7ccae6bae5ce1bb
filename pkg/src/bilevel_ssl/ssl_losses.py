"""Labeled cross-entropy, point-cloud augmentation and the weighted SSL loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import logits_of, predict_weight


@dataclass(frozen=True)
class AugmentSpec:
    rotation: float = 0.0  # max |angle| about the vertical (z) axis, radians
    jitter: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.rotation < 0 or self.jitter < 0:
            raise ValueError("rotation and jitter must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


WEAK = AugmentSpec(rotation=np.pi / 18, jitter=0.005, dropout=0.0)
STRONG = AugmentSpec(rotation=np.pi / 2, jitter=0.02, dropout=0.2)


def augment(cloud: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Rotate about z, jitter every coordinate, and replace dropped points by survivors.

    The number of points is preserved. An all-zero spec returns an exact copy.
    """
    out = np.array(cloud, dtype=np.float64)
    if spec.rotation > 0:
        a = rng.uniform(-spec.rotation, spec.rotation)
        c, s = np.cos(a), np.sin(a)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        out = out @ rot.T
    if spec.jitter > 0:
        out = out + rng.normal(0.0, spec.jitter, size=out.shape)
    if spec.dropout > 0:
        n = len(out)
        k = int(np.floor(spec.dropout * n))
        if 0 < k < n:
            dropped = rng.choice(n, size=k, replace=False)
            keep = np.setdiff1d(np.arange(n), dropped)
            out[dropped] = out[rng.choice(keep, size=k)]
    return out


def augment_batch(clouds: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(c, spec, rng) for c in clouds]) if len(clouds) else np.asarray(clouds)


def _check_labels(labels) -> np.ndarray:
    if labels is None or any(l is None for l in labels):
        raise ValueError("labeled loss needs a label for every sample")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise ValueError("labeled loss needs a label for every sample")
    return labels


def labeled_loss(theta, clouds, labels) -> Tensor:
    """Mean softmax cross-entropy over a labeled batch."""
    labels = _check_labels(labels)
    if len(labels) == 0:
        raise ValueError("empty labeled batch")
    return ad.mean(ad.softmax_cross_entropy(logits_of(theta, clouds), labels))


def pseudo_labels(theta, weak_clouds, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Argmax pseudo-labels and the confidence mask, computed without gradient."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    with ad.no_grad():
        z = logits_of(theta, weak_clouds).data
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    conf = p.max(axis=1)
    return p.argmax(axis=1), ~(conf < threshold)


def consistency_losses(theta, weak_clouds, strong_clouds, threshold: float):
    """Per-sample FixMatch losses.

    Returns ``(index, losses)`` where ``index`` lists the confident samples and
    ``losses`` is the tensor of their cross-entropies on the strong view; all
    other samples contribute exactly zero.
    """
    labels, mask = pseudo_labels(theta, weak_clouds, threshold)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return idx, None
    logits = logits_of(theta, strong_clouds[idx])
    return idx, ad.softmax_cross_entropy(logits, labels[idx])


def consistency_loss(theta, cloud, threshold: float, weak: AugmentSpec, strong: AugmentSpec,
                     rng: np.random.Generator) -> Tensor:
    """FixMatch loss of a single cloud: weak view labels, strong view learns."""
    w = augment(cloud, weak, rng)[None]
    s = augment(cloud, strong, rng)[None]
    idx, losses = consistency_losses(theta, w, s, threshold)
    if losses is None:
        return Tensor(0.0)
    return ad.sum(losses)


@dataclass
class LabeledBatch:
    ids: np.ndarray
    clouds: np.ndarray
    labels: np.ndarray


@dataclass
class UnlabeledBatch:
    """Unlabeled samples with their pre-drawn views.

    ``features`` are detached global features of the raw clouds; they are the
    weight predictor's input and carry no gradient into the task network.
    """

    ids: np.ndarray
    weak: np.ndarray
    strong: np.ndarray
    features: np.ndarray
    cohorts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="<U1"))

    def __len__(self) -> int:
        return len(self.ids)


def training_loss(theta, phi, labeled: LabeledBatch, unlabeled: UnlabeledBatch | None,
                  threshold: float = 0.95, weights: np.ndarray | None = None) -> Tensor:
    """Labeled mean CE plus the per-sample weighted consistency term.

    ``(1/N_l) sum L_l + (1/N_u) sum lambda_j L_u(X_j)``. When ``weights`` is
    given the weights are constants and ``phi`` is ignored; otherwise they come
    from ``predict_weight(phi, features)``.
    """
    if len(labeled.ids) == 0:
        raise ValueError("empty labeled batch")
    total = labeled_loss(theta, labeled.clouds, labeled.labels)
    if unlabeled is None or len(unlabeled) == 0:
        return total
    idx, losses = consistency_losses(theta, unlabeled.weak, unlabeled.strong, threshold)
    if losses is None:
        return total
    if weights is not None:
        lam = Tensor(np.asarray(weights, dtype=np.float64)[idx])
    else:
        lam = predict_weight(phi, unlabeled.features[idx])
    return ad.add(total, ad.mul(ad.sum(ad.mul(lam, losses)), 1.0 / len(unlabeled)))


def unlabeled_losses(theta, unlabeled: UnlabeledBatch, threshold: float) -> np.ndarray:
    """Per-sample consistency losses as plain numbers (zeros where masked)."""
    out = np.zeros(len(unlabeled))
    with ad.no_grad():
        idx, losses = consistency_losses(theta, unlabeled.weak, unlabeled.strong, threshold)
    if losses is not None:
        out[idx] = losses.data
    return out
