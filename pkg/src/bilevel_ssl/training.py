"""Warm-up, the alternating bi-level loop, fixed-weight retraining and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .bilevel import MetaStepInputs, meta_step
from .datagen import epoch_split
from .dataset import Dataset, Sample, stack
from .metrics import MetricsRecord
from .models import (Architecture, features_of, init_predictor_params, init_task_params,
                     encode_global, classify, infer_features, infer_weights, predict_labels, predict_weight)
from .params import ParamSet, load_params, save_params
from .regularizers import WeightLedger, entropy_weight
from .ssl_losses import (AugmentSpec, LabeledBatch, UnlabeledBatch, augment_batch,
                         consistency_losses, labeled_loss, training_loss)

log = logging.getLogger(__name__)

_ITER_STREAM = 11
_SPLIT_STREAM = 13


@dataclass
class TrainConfig:
    alpha: float = 0.01
    meta_rate: float = 1e-3
    warmup_rate: float = 1e-3  # Adam step size for the predictor warm-up
    warmup_predictor_steps: int = 20
    beta: float = 0.5
    gamma: float = 0.1
    eta: float = 0.01
    delta: float = 0.01
    threshold: float = 0.95
    warmup_epochs: int = 30
    epochs: int = 150
    iters_per_epoch: int = 0  # 0: one pass over the unlabeled pool
    labeled_batch: int = 32
    unlabeled_batch: int = 64
    val_batch: int = 32
    meta_every: int = 1
    regularizer: str = "matr"
    entropy: bool = True
    continuous_schedule: bool = False
    freeze_weights: float | None = None
    scheme: str = "central"
    eval_every: int = 10
    seed: int = 0
    encoder: tuple[int, ...] = (3, 32, 64, 64)
    classifier_hidden: tuple[int, ...] = (32,)
    predictor_hidden: tuple[int, ...] = (32, 16)
    weak: AugmentSpec = field(default_factory=lambda: AugmentSpec(np.pi / 18, 0.005, 0.0))
    strong: AugmentSpec = field(default_factory=lambda: AugmentSpec(np.pi / 2, 0.02, 0.2))

    def __post_init__(self):
        if not (self.alpha > 0 and self.warmup_rate > 0):
            raise ValueError("learning rates must be positive")
        if self.warmup_predictor_steps < 1:
            raise ValueError("warmup_predictor_steps must be at least 1")
        if self.meta_rate < 0:
            raise ValueError("meta_rate must be non-negative")
        if min(self.gamma, self.eta, self.delta) < 0:
            raise ValueError("regularizer coefficients must be non-negative")
        if self.regularizer not in ("matr", "dtr"):
            raise ValueError("regularizer must be 'matr' or 'dtr'")
        self.encoder = tuple(int(w) for w in self.encoder)
        self.classifier_hidden = tuple(int(w) for w in self.classifier_hidden)
        self.predictor_hidden = tuple(int(w) for w in self.predictor_hidden)
        if isinstance(self.weak, dict):
            self.weak = AugmentSpec(**self.weak)
        if isinstance(self.strong, dict):
            self.strong = AugmentSpec(**self.strong)

    def architecture(self, num_classes: int) -> Architecture:
        return Architecture(self.encoder, self.classifier_hidden,
                            (self.encoder[-1], *self.predictor_hidden, 1), num_classes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainData:
    """Arrays for one run: labeled pool, unlabeled pool and in-distribution test set."""

    labeled_ids: np.ndarray
    labeled: np.ndarray
    labels: np.ndarray
    unlabeled_ids: np.ndarray
    unlabeled: np.ndarray
    cohorts: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    num_classes: int

    @classmethod
    def from_dataset(cls, ds: Dataset, unlabeled_cohorts=("U", "W", "S", "O"),
                     extra_unlabeled: list[Sample] | None = None) -> "TrainData":
        lab = ds.cohort("L")
        unl = ds.cohort(*unlabeled_cohorts) + list(extra_unlabeled or [])
        test = ds.cohort("T")
        lid, lx = stack(lab)
        uid, ux = stack(unl)
        _, tx = stack(test)
        return cls(lid, lx, np.array([s.label for s in lab], dtype=np.int64),
                   uid, ux, np.array([s.cohort for s in unl]),
                   tx, np.array([s.label for s in test], dtype=np.int64), ds.num_classes)

    def restrict_unlabeled(self, keep: np.ndarray) -> "TrainData":
        return replace(self, unlabeled_ids=self.unlabeled_ids[keep], unlabeled=self.unlabeled[keep],
                       cohorts=self.cohorts[keep])


@dataclass
class TrainState:
    theta: ParamSet
    phi: ParamSet
    ledger: WeightLedger
    config: TrainConfig
    epoch: int = 0
    meta_steps: int = 0
    history: dict[int, dict[int, float]] = field(default_factory=dict)
    predictor_warm: bool = False

    def copy(self) -> "TrainState":
        return TrainState(self.theta.copy(), self.phi.copy(), self.ledger.snapshot(), self.config,
                          self.epoch, self.meta_steps, {k: dict(v) for k, v in self.history.items()},
                          self.predictor_warm)


def init_state(config: TrainConfig, num_classes: int) -> TrainState:
    arch = config.architecture(num_classes)
    return TrainState(init_task_params(config.seed, arch), init_predictor_params(config.seed, arch),
                      WeightLedger(config.beta), config)


class SSLObjective:
    """The training/validation losses of one iteration, with views and features frozen."""

    def __init__(self, labeled: LabeledBatch, unlabeled: UnlabeledBatch, val_ids, val_clouds,
                 val_labels, val_features, threshold: float, shared_validation: bool = False):
        # shared_validation reuses the labeled training batch, which is only
        # meant for demonstrating the degenerate meta-gradient
        overlap = np.intersect1d(labeled.ids, val_ids)
        if overlap.size and not shared_validation:
            raise ValueError(f"validation batch overlaps labeled training batch: {overlap[:5]}")
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.val_ids = np.asarray(val_ids)
        self.val_clouds = val_clouds
        self.val_labels = val_labels
        self.val_features = val_features
        self.threshold = threshold

    def train_loss(self, theta, phi) -> Tensor:
        return training_loss(theta, phi, self.labeled, self.unlabeled, self.threshold)

    def phi_train_loss(self, theta, phi) -> Tensor:
        """``train_loss`` minus its predictor-independent labeled term."""
        idx, losses = consistency_losses(theta, self.unlabeled.weak, self.unlabeled.strong, self.threshold)
        if losses is None:
            return Tensor(0.0)
        lam = predict_weight(phi, self.unlabeled.features[idx])
        return ad.mul(ad.sum(ad.mul(lam, losses)), 1.0 / len(self.unlabeled))

    def val_loss(self, theta) -> Tensor:
        return labeled_loss(theta, self.val_clouds, self.val_labels)

    def unlabeled_weights(self, phi) -> Tensor:
        return predict_weight(phi, self.unlabeled.features)

    def validation_weights(self, phi) -> Tensor:
        return predict_weight(phi, self.val_features)


def iterations_per_epoch(config: TrainConfig, data: TrainData) -> int:
    if config.iters_per_epoch > 0:
        return config.iters_per_epoch
    return max(1, math.ceil(len(data.unlabeled_ids) / config.unlabeled_batch))


def _pick(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    if k >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


@dataclass
class _Batches:
    labeled: LabeledBatch
    unlabeled: UnlabeledBatch
    raw_unlabeled: np.ndarray
    val_ids: np.ndarray
    val_clouds: np.ndarray
    val_labels: np.ndarray


def _draw(config: TrainConfig, data: TrainData, split, epoch: int, it: int, views: bool) -> _Batches:
    rng = np.random.default_rng([config.seed, _ITER_STREAM, epoch, it])
    train_ids, val_ids = split
    pos = {int(s): i for i, s in enumerate(data.labeled_ids)}
    tr = np.array([pos[int(s)] for s in train_ids])
    va = np.array([pos[int(s)] for s in val_ids])
    tr = tr[_pick(rng, len(tr), config.labeled_batch)]
    va = va[_pick(rng, len(va), config.val_batch)]
    labeled = LabeledBatch(data.labeled_ids[tr], data.labeled[tr], data.labels[tr])
    ui = _pick(rng, len(data.unlabeled_ids), config.unlabeled_batch)
    raw = data.unlabeled[ui]
    if views and len(ui):
        weak = augment_batch(raw, config.weak, rng)
        strong = augment_batch(raw, config.strong, rng)
    else:
        weak = strong = raw[:0]
    unl = UnlabeledBatch(data.unlabeled_ids[ui], weak, strong, np.zeros((len(ui), 0)), data.cohorts[ui])
    return _Batches(labeled, unl, raw, data.labeled_ids[va], data.labeled[va], data.labels[va])


def split_for_epoch(config: TrainConfig, data: TrainData, epoch: int):
    return epoch_split(data.labeled_ids, np.random.default_rng([config.seed, _SPLIT_STREAM, epoch]))


def _val_features_and_loss(theta, clouds, labels) -> tuple[np.ndarray, float]:
    with ad.no_grad():
        feats = encode_global(theta, clouds)
        loss = ad.mean(ad.softmax_cross_entropy(classify(theta, feats), labels))
    return feats.data, float(loss.data)


def _cohort_means(rec: MetricsRecord, cohorts: np.ndarray, lam: np.ndarray) -> None:
    for c in ("U", "W", "S", "O"):
        m = cohorts == c
        if m.any():
            setattr(rec, f"lambda_{c}", float(lam[m].mean()))


def _sgd(params: ParamSet, grad: ParamSet, rate: float) -> ParamSet:
    return params - grad * rate


class Adam:
    """Adam moments for the predictor warm-up; the bi-level steps use plain gradient descent."""

    def __init__(self, rate: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.rate, self.b1, self.b2, self.eps = rate, b1, b2, eps
        self.t = 0
        self.m: ParamSet | None = None
        self.v: ParamSet | None = None

    def step(self, params: ParamSet, grad: ParamSet) -> ParamSet:
        if self.m is None:
            self.m, self.v = params * 0.0, params * 0.0
        self.t += 1
        self.m = self.m * self.b1 + grad * (1 - self.b1)
        self.v = self.v * self.b2 + ParamSet({k: g * g for k, g in grad.items()}) * (1 - self.b2)
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        return ParamSet({k: p - self.rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
                         for k, p in params.items()})


Sink = Callable[[MetricsRecord], None]
Hook = Callable[[TrainState], None]


def _record_epoch(state: TrainState, data: TrainData, rec: MetricsRecord | None) -> None:
    state.history[state.epoch] = dict(state.ledger.current)
    cfg = state.config
    if rec is not None and cfg.eval_every > 0 and (state.epoch + 1) % cfg.eval_every == 0 and len(data.test):
        rec.accuracy = evaluate(state.theta, data.test, data.test_labels)


def warmup(state: TrainState, data: TrainData, sink: Sink | None = None,
           train_predictor: bool = True, hook: Hook | None = None) -> TrainState:
    """Labeled-only task training, then the predictor learns 0 for unlabeled, 1 for validation.

    The predictor is fitted on global features of the warmed-up task network,
    replaying each warm-up epoch's validation half against the whole
    unlabeled pool. Fitting it on features that are still moving leaves it
    unable to tell validation clouds from unlabeled in-distribution clouds.
    """
    cfg = state.config
    n_iter = iterations_per_epoch(cfg, data)
    while state.epoch < cfg.warmup_epochs:
        split = split_for_epoch(cfg, data, state.epoch)
        rec = None
        for it in range(n_iter):
            b = _draw(cfg, data, split, state.epoch, it, views=False)
            rec = MetricsRecord("warmup", state.epoch, it, math.nan, math.nan)
            _, rec.val_loss = _val_features_and_loss(state.theta, b.val_clouds, b.val_labels)
            tape = Tape()
            with tape:
                loss = labeled_loss(tape.watch(state.theta), b.labeled.clouds, b.labeled.labels)
            state.theta = _sgd(state.theta, tape.gradient(loss), cfg.alpha)
            rec.train_loss = float(loss.data)
            if sink:
                sink(rec)
        _record_epoch(state, data, rec)
        state.epoch += 1
        if hook:
            hook(state)
    if train_predictor and not state.predictor_warm:
        fit_warmup_predictor(state, data)
    return state


def fit_warmup_predictor(state: TrainState, data: TrainData) -> TrainState:
    """Class-balanced cross-entropy: unlabeled weights toward 0, validation weights toward 1."""
    cfg = state.config
    feats_u = infer_features(state.theta, data.unlabeled)
    feats_l = infer_features(state.theta, data.labeled)
    pos = {int(s): i for i, s in enumerate(data.labeled_ids)}
    opt = Adam(cfg.warmup_rate)
    steps = iterations_per_epoch(cfg, data) * cfg.warmup_predictor_steps
    for epoch in range(cfg.warmup_epochs):
        _, val_ids = split_for_epoch(cfg, data, epoch)
        feats_v = feats_l[[pos[int(s)] for s in val_ids]]
        for _ in range(steps):
            tape = Tape()
            with tape:
                phi = tape.watch(state.phi)
                lam_u = predict_weight(phi, feats_u)
                lam_v = predict_weight(phi, feats_v)
                bce = ad.add(ad.neg(ad.mean(ad.log(ad.sub(1.0, lam_u)))),
                             ad.neg(ad.mean(ad.log(lam_v))))
            state.phi = opt.step(state.phi, tape.gradient(bce))
    state.predictor_warm = True
    return state


def _weights_for(state: TrainState, ids, fixed: dict[int, float] | None, predicted) -> np.ndarray:
    if fixed is not None:
        try:
            return np.array([fixed[int(s)] for s in ids], dtype=np.float64)
        except KeyError as e:
            raise KeyError(f"no fixed weight for unlabeled sample {e.args[0]}") from None
    if state.config.freeze_weights is not None:
        return np.full(len(ids), float(state.config.freeze_weights))
    return predicted


def _main_loop(state: TrainState, data: TrainData, epochs: int, sink: Sink | None,
               fixed: dict[int, float] | None, meta: bool, phase: str, hook: Hook | None = None) -> TrainState:
    cfg = state.config
    n_iter = iterations_per_epoch(cfg, data)
    stop = state.epoch + epochs
    while state.epoch < stop:
        split = split_for_epoch(cfg, data, state.epoch)
        main_epoch = max(0, state.epoch - cfg.warmup_epochs)
        xi = entropy_weight(main_epoch, cfg.delta, cfg.continuous_schedule) if cfg.entropy else 0.0
        rec = None
        for it in range(n_iter):
            b = _draw(cfg, data, split, state.epoch, it, views=True)
            rec = MetricsRecord(phase, state.epoch, it, math.nan, math.nan)
            feats_v, rec.val_loss = _val_features_and_loss(state.theta, b.val_clouds, b.val_labels)
            need_pred = fixed is None and (meta or cfg.freeze_weights is None)
            if need_pred:
                b.unlabeled.features = features_of(state.theta, b.raw_unlabeled)
            if meta and it % cfg.meta_every == 0:
                with ad.no_grad():
                    lam_before = predict_weight(state.phi, b.unlabeled.features).data
                targets = state.ledger.targets(b.unlabeled.ids, lam_before, cfg.regularizer)
                obj = SSLObjective(b.labeled, b.unlabeled, b.val_ids, b.val_clouds, b.val_labels,
                                   feats_v, cfg.threshold)
                state.phi, report = meta_step(MetaStepInputs(
                    state.theta, state.phi, obj, cfg.alpha, gamma=cfg.gamma, xi=xi, eta=cfg.eta,
                    meta_rate=cfg.meta_rate, reg_targets=targets, scheme=cfg.scheme))
                state.meta_steps += 1
                rec.hvp_norm, rec.reg_norm = report.hvp_norm, report.reg_norm
                rec.ent_norm, rec.od_norm = report.ent_norm, report.od_norm
                rec.epsilon, rec.meta_skipped = report.epsilon, int(report.skipped)
            rec.xi = xi
            predicted = None
            if need_pred:
                with ad.no_grad():
                    predicted = predict_weight(state.phi, b.unlabeled.features).data
            lam = _weights_for(state, b.unlabeled.ids, fixed, predicted)
            tape = Tape()
            with tape:
                loss = training_loss(tape.watch(state.theta), None, b.labeled, b.unlabeled,
                                     cfg.threshold, weights=lam)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {state.epoch} iteration {it}")
            grad = tape.gradient(loss)
            state.theta = _sgd(state.theta, grad, cfg.alpha)
            state.ledger.update_many(b.unlabeled.ids, lam, b.unlabeled.cohorts)
            rec.train_loss = float(loss.data)
            _cohort_means(rec, b.unlabeled.cohorts, lam)
            if sink:
                sink(rec)
        _record_epoch(state, data, rec)
        state.epoch += 1
        if hook:
            hook(state)
    return state


def train_rebo(state: TrainState, data: TrainData, sink: Sink | None = None,
               epochs: int | None = None, hook: Hook | None = None) -> TrainState:
    """Alternate predictor meta-steps and weighted task steps."""
    if state.epoch < state.config.warmup_epochs:
        raise RuntimeError("run warmup before the bi-level loop")
    epochs = state.config.epochs if epochs is None else epochs
    return _main_loop(state, data, epochs, sink, None, meta=True, phase="rebo", hook=hook)


def train_fixed(state: TrainState, data: TrainData, weights: dict[int, float],
                sink: Sink | None = None, epochs: int | None = None, phase: str = "fixed",
                hook: Hook | None = None) -> TrainState:
    """Weighted SSL with constant per-sample weights and no predictor updates."""
    epochs = state.config.epochs if epochs is None else epochs
    return _main_loop(state, data, epochs, sink, weights, meta=False, phase=phase, hook=hook)


def uniform_weights(data: TrainData, value: float = 1.0) -> dict[int, float]:
    return {int(s): float(value) for s in data.unlabeled_ids}


def _remaining(state: TrainState) -> int:
    return max(0, state.config.warmup_epochs + state.config.epochs - max(state.epoch, state.config.warmup_epochs))


def run_baseline(config: TrainConfig, data: TrainData, sink: Sink | None = None,
                 state: TrainState | None = None, hook: Hook | None = None) -> TrainState:
    """Uniform-weight SSL: labeled-only warm-up, then every unlabeled weight is 1.

    Passing a restored ``state`` resumes where it stopped.
    """
    state = state or init_state(config, data.num_classes)
    warmup(state, data, sink, train_predictor=False, hook=hook)
    return train_fixed(state, data, uniform_weights(data), sink, epochs=_remaining(state),
                       phase="baseline", hook=hook)


def run_rebo(config: TrainConfig, data: TrainData, sink: Sink | None = None,
             state: TrainState | None = None, hook: Hook | None = None) -> TrainState:
    state = state or init_state(config, data.num_classes)
    warmup(state, data, sink, hook=hook)
    return train_rebo(state, data, sink, epochs=_remaining(state), hook=hook)


def estimate_weights(state: TrainState, data: TrainData) -> dict[int, float]:
    """Predictor weights for every unlabeled sample; a pure function of (theta, phi, sample)."""
    w = infer_weights(state.phi, state.theta, data.unlabeled)
    return {int(s): float(v) for s, v in zip(data.unlabeled_ids, w)}


def transfer_retrain(weights: dict[int, float], data: TrainData, config: TrainConfig,
                     sink: Sink | None = None) -> TrainState:
    """Fresh task network trained with frozen per-sample weights; no meta-gradients."""
    missing = [int(s) for s in data.unlabeled_ids if int(s) not in weights]
    if missing:
        raise KeyError(f"no weight for unlabeled samples {missing[:5]}")
    state = init_state(config, data.num_classes)
    warmup(state, data, sink, train_predictor=False)
    return train_fixed(state, data, weights, sink, phase="transfer")


def finetune(state: TrainState, data: TrainData, epochs: int = 50, sink: Sink | None = None) -> TrainState:
    """Continue bi-level training of both networks on the full data."""
    if epochs == 0:
        return state
    return _main_loop(state, data, epochs, sink, None, meta=True, phase="finetune")


def subset_unlabeled(data: TrainData, fraction: float, seed: int) -> TrainData:
    rng = np.random.default_rng([seed, 17])
    k = max(1, int(round(fraction * len(data.unlabeled_ids))))
    return data.restrict_unlabeled(np.sort(rng.choice(len(data.unlabeled_ids), size=k, replace=False)))


def continual_unseen(state: TrainState, data: TrainData, unseen: list[Sample], mode: str,
                     epochs: int = 50, sink: Sink | None = None) -> TrainState:
    """Extend training to unseen unlabeled samples.

    ``estimate-fix`` infers their weights once and trains only the task
    network; ``fine-tune`` runs the full bi-level loop with them included.
    """
    uid, ux = stack(unseen)
    merged = replace(data, unlabeled_ids=np.concatenate([data.unlabeled_ids, uid]),
                     unlabeled=np.concatenate([data.unlabeled, ux]) if len(ux) else data.unlabeled,
                     cohorts=np.concatenate([data.cohorts, np.array([s.cohort for s in unseen])]))
    if mode == "estimate-fix":
        weights = estimate_weights(state, merged)
        return train_fixed(state, merged, weights, sink, epochs=epochs, phase="estimate-fix")
    if mode == "fine-tune":
        return finetune(state, merged, epochs, sink)
    raise ValueError(f"unknown continual mode {mode!r}")


def evaluate(theta: ParamSet, clouds: np.ndarray, labels: np.ndarray) -> float:
    """Overall accuracy of argmax predictions."""
    if len(labels) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict_labels(theta, clouds) == np.asarray(labels)))


# -- persistence ----------------------------------------------------------------

def save_state(state: TrainState, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_params(state.theta.merged(state.phi), d / "params.ckpt")
    state.ledger.to_csv(d / "ledger.csv")
    (d / "state.json").write_text(json.dumps(
        {"epoch": state.epoch, "meta_steps": state.meta_steps,
         "predictor_warm": state.predictor_warm}, indent=2) + "\n")


def load_state(directory: str | Path, config: TrainConfig) -> TrainState:
    d = Path(directory)
    params = load_params(d / "params.ckpt")
    meta = json.loads((d / "state.json").read_text())
    theta = ParamSet({k: v for k, v in params.items() if not k.startswith("pred.")})
    phi = params.subset("pred.")
    ledger = WeightLedger.from_csv(d / "ledger.csv", config.beta)
    return TrainState(theta, phi, ledger, config, meta["epoch"], meta["meta_steps"],
                      predictor_warm=meta.get("predictor_warm", False))
