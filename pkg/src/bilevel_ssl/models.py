"""Point encoder, classifier head and the sample-weight predictor.

All three are plain MLPs stored in a single :class:`ParamSet` under the
prefixes ``enc.``, ``cls.`` and ``pred.``. Functions accept either raw
arrays or tape-watched tensors, so the same code serves evaluation and
differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .params import ParamSet

ENCODER_WIDTHS = (3, 32, 64, 64)
CLASSIFIER_HIDDEN = (32,)
PREDICTOR_WIDTHS = (64, 32, 16, 1)


@dataclass(frozen=True)
class Architecture:
    encoder: tuple[int, ...] = ENCODER_WIDTHS
    classifier_hidden: tuple[int, ...] = CLASSIFIER_HIDDEN
    predictor: tuple[int, ...] = PREDICTOR_WIDTHS
    num_classes: int = 8

    def __post_init__(self):
        if self.encoder[0] != 3:
            raise ValueError("encoder input width must be 3")
        if self.predictor[0] != self.encoder[-1] or self.predictor[-1] != 1:
            raise ValueError(
                f"predictor widths {self.predictor} must run from {self.encoder[-1]} to 1"
            )

    @property
    def classifier(self) -> tuple[int, ...]:
        return (self.encoder[-1], *self.classifier_hidden, self.num_classes)


def init_params(seed: int, widths: Sequence[int], prefix: str = "") -> ParamSet:
    """Glorot-uniform weights and zero biases for an MLP with the given widths."""
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("need at least an input and an output width")
    if any(w <= 0 for w in widths):
        raise ValueError(f"zero-width layer in {widths}")
    rng = np.random.default_rng(seed)
    out = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        out[f"{prefix}{i}.w"] = rng.uniform(-s, s, size=(fan_in, fan_out))
        out[f"{prefix}{i}.b"] = np.zeros(fan_out)
    return ParamSet(out)


def init_task_params(seed: int, arch: Architecture) -> ParamSet:
    enc = init_params(seed, arch.encoder, "enc.")
    cls = init_params(seed + 1_000_003, arch.classifier, "cls.")
    return enc.merged(cls)


def init_predictor_params(seed: int, arch: Architecture) -> ParamSet:
    return init_params(seed + 2_000_003, arch.predictor, "pred.")


def _layers(params: Mapping, prefix: str) -> list[tuple]:
    out, i = [], 0
    while f"{prefix}{i}.w" in params:
        out.append((params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"]))
        i += 1
    if not out:
        raise KeyError(f"no layers with prefix {prefix!r}")
    return out


def _in_width(w) -> int:
    return (w.shape if isinstance(w, Tensor) else np.shape(w))[0]


def encode_global(params: Mapping, clouds) -> Tensor:
    """Shared per-point MLP followed by a max-pool over points.

    ``clouds`` is ``(N, 3)`` for one cloud or ``(B, N, 3)`` for a batch; the
    result is ``(W,)`` or ``(B, W)`` respectively.
    """
    x = ad.as_tensor(clouds)
    single = x.data.ndim == 2
    if single:
        x = ad.reshape(x, (1, *x.shape))
    if x.data.ndim != 3 or x.shape[-1] != 3:
        raise ShapeError("encode_global", x.shape)
    b, n, _ = x.shape
    if n == 0:
        raise ValueError("encode_global: empty point cloud")
    h = ad.reshape(x, (b * n, 3))
    for w, bias in _layers(params, "enc."):
        h = ad.relu(ad.add(ad.matmul(h, w), bias))
    h = ad.reshape(h, (b, n, h.shape[-1]))
    feat = ad.max(h, axis=1)
    return ad.reshape(feat, (feat.shape[-1],)) if single else feat


def classify(params: Mapping, features) -> Tensor:
    f = ad.as_tensor(features)
    layers = _layers(params, "cls.")
    if f.shape[-1] != _in_width(layers[0][0]):
        raise ShapeError("classify", f.shape, np.shape(ad.as_tensor(layers[0][0]).data))
    for i, (w, bias) in enumerate(layers):
        f = ad.add(ad.matmul(f, w), bias)
        if i < len(layers) - 1:
            f = ad.relu(f)
    return f


def logits_of(params: Mapping, clouds) -> Tensor:
    return classify(params, encode_global(params, clouds))


def predict_weight(params: Mapping, features) -> Tensor:
    """Per-sample weight in (0, 1): (linear, standardize, relu) x2, linear, sigmoid."""
    f = ad.as_tensor(features)
    layers = _layers(params, "pred.")
    if f.shape[-1] != _in_width(layers[0][0]):
        raise ShapeError("predict_weight", f.shape, np.shape(ad.as_tensor(layers[0][0]).data))
    for i, (w, bias) in enumerate(layers):
        f = ad.add(ad.matmul(f, w), bias)
        if i < len(layers) - 1:
            f = ad.relu(ad.standardize(f))
    out = ad.sigmoid(f)
    # (..., 1) -> (...)
    return ad.reshape(out, out.shape[:-1])


def features_of(theta: Mapping, clouds) -> np.ndarray:
    """Detached global features, as fed to the weight predictor."""
    with ad.no_grad():
        return encode_global(theta, clouds).data


def infer_features(theta: Mapping, clouds, chunk: int = 128) -> np.ndarray:
    clouds = np.asarray(clouds)
    parts = [features_of(theta, clouds[i:i + chunk]) for i in range(0, len(clouds), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, 0))


def infer_weights(phi: Mapping, theta: Mapping, clouds, chunk: int = 128) -> np.ndarray:
    clouds = np.asarray(clouds)
    out = []
    with ad.no_grad():
        for i in range(0, len(clouds), chunk):
            feats = encode_global(theta, clouds[i:i + chunk]).data
            out.append(predict_weight(phi, feats).data)
    return np.concatenate(out) if out else np.zeros(0)


def predict_labels(theta: Mapping, clouds, chunk: int = 128) -> np.ndarray:
    clouds = np.asarray(clouds)
    out = []
    with ad.no_grad():
        for i in range(0, len(clouds), chunk):
            out.append(np.argmax(logits_of(theta, clouds[i:i + chunk]).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
