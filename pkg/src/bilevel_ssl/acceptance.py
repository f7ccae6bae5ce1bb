"""The acceptance suite: thirteen checks, each returning a verdict with its measurements."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import bilevel
from .datagen import Box, DatasetSpec, generate_dataset, perturb_box
from .instances import CubicExpObjective, stationary_instance, two_class_instance
from .models import init_params, infer_weights
from .params import ParamSet
from .regularizers import entropy_weight
from .ssl_losses import labeled_loss
from .training import (TrainConfig, TrainData, TrainState, estimate_weights, evaluate,
                       fit_warmup_predictor, init_state, run_baseline, run_rebo, split_for_epoch,
                       train_fixed, train_rebo, transfer_retrain, uniform_weights, warmup)

log = logging.getLogger(__name__)


@dataclass
class Verdict:
    number: int
    name: str
    passed: bool
    detail: dict
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name} ({self.seconds:.1f}s)"


# Desk-scale training schedule shared by criteria 5-9 and 12. The task rate
# and the iteration budget are tuned for one CPU core; everything else keeps
# the library defaults.
DESK_TRAIN = dict(alpha=0.1, warmup_epochs=30, epochs=120, iters_per_epoch=2, eval_every=0)


@dataclass
class SuiteConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    train: dict = field(default_factory=lambda: dict(DESK_TRAIN))
    dataset: dict = field(default_factory=lambda: {"L": 40, "U": 400, "W": 200, "S": 200, "O": 0, "T": 400})
    sabotage: bool = False  # force every weight to 1 (negative control)


@dataclass
class SeedRun:
    acc_clean: float
    acc_contaminated: float
    acc_rebo: float
    acc_transfer: float
    transfer_meta_calls: int
    warm_unlabeled: float
    warm_validation: float
    cohort_means: dict
    final_weights: np.ndarray
    final_weights_no_entropy: np.ndarray
    std_matr: float
    std_no_matr: float
    seconds: float


def _trajectory_std(state: TrainState, last: int) -> float:
    """Mean over samples of the std of the recorded weight over the last ``last`` epochs."""
    epochs = sorted(state.history)[-last:]
    ids = sorted(set().union(*(state.history[e].keys() for e in epochs)))
    stds = []
    for sid in ids:
        series = [state.history[e][sid] for e in epochs if sid in state.history[e]]
        if len(series) > 1:
            stds.append(np.std(series))
    return float(np.mean(stds))


class DeskRuns:
    """Lazily runs and caches the desk-scale experiments per seed."""

    def __init__(self, cfg: SuiteConfig):
        self.cfg = cfg
        self._runs: dict[int, SeedRun] = {}

    def config(self, seed: int, **over) -> TrainConfig:
        kw = dict(self.cfg.train, seed=seed)
        if self.cfg.sabotage:
            kw["freeze_weights"] = 1.0
        kw.update(over)
        return TrainConfig(**kw)

    def seed(self, seed: int) -> SeedRun:
        if seed not in self._runs:
            self._runs[seed] = self._run(seed)
        return self._runs[seed]

    def all(self) -> list[SeedRun]:
        return [self.seed(s) for s in self.cfg.seeds]

    def _run(self, seed: int) -> SeedRun:
        t0 = time.time()
        ds = generate_dataset(DatasetSpec(counts=dict(self.cfg.dataset), seed=seed))
        full = TrainData.from_dataset(ds, ("U", "W", "S", "O"))
        clean = TrainData.from_dataset(ds, ("U",))
        cfg = self.config(seed)

        # the labeled-only warm-up does not depend on the unlabeled pool, so it is shared
        warm = warmup(init_state(cfg, ds.num_classes), full, train_predictor=False)
        acc = {}
        for name, data in (("clean", clean), ("contaminated", full)):
            st = train_fixed(warm.copy(), data, uniform_weights(data), phase="baseline")
            acc[name] = evaluate(st.theta, data.test, data.test_labels)

        rebo0 = fit_warmup_predictor(warm.copy(), full)
        _, val_ids = split_for_epoch(cfg, full, cfg.warmup_epochs - 1)
        val_mask = np.isin(full.labeled_ids, val_ids)
        warm_u = float(infer_weights(rebo0.phi, rebo0.theta, full.unlabeled).mean())
        warm_v = float(infer_weights(rebo0.phi, rebo0.theta, full.labeled[val_mask]).mean())

        rebo = train_rebo(rebo0.copy(), full)
        acc["rebo"] = evaluate(rebo.theta, full.test, full.test_labels)
        no_ent = rebo0.copy()
        no_ent.config = replace(cfg, entropy=False)
        no_ent = train_rebo(no_ent, full)
        no_matr = rebo0.copy()
        no_matr.config = replace(cfg, gamma=0.0)
        no_matr = train_rebo(no_matr, full)

        before = bilevel.calls["hvp"]
        transfer = transfer_retrain(estimate_weights(rebo, full), full, cfg)
        calls = bilevel.calls["hvp"] - before
        run = SeedRun(
            acc_clean=acc["clean"], acc_contaminated=acc["contaminated"], acc_rebo=acc["rebo"],
            acc_transfer=evaluate(transfer.theta, full.test, full.test_labels), transfer_meta_calls=calls,
            warm_unlabeled=warm_u, warm_validation=warm_v, cohort_means=rebo.ledger.cohort_means(),
            final_weights=rebo.ledger.values(), final_weights_no_entropy=no_ent.ledger.values(),
            std_matr=_trajectory_std(rebo, 50), std_no_matr=_trajectory_std(no_matr, 50),
            seconds=time.time() - t0)
        log.info("seed %d done in %.0fs", seed, run.seconds)
        return run


# -- criteria ------------------------------------------------------------------

def random_mlp_instance(rng: np.random.Generator):
    """A random sigmoid MLP with softmax cross-entropy, at most 500 parameters."""
    while True:
        widths = [int(rng.integers(2, 9))] + [int(rng.integers(2, 13)) for _ in range(int(rng.integers(1, 4)))]
        widths.append(int(rng.integers(2, 6)))
        params = init_params(int(rng.integers(1 << 30)), widths)
        if params.size <= 500:
            break
    params = ParamSet({k: v + rng.normal(0.0, 0.1, size=v.shape) for k, v in params.items()})
    x = rng.normal(size=(int(rng.integers(3, 9)), widths[0]))
    y = rng.integers(0, widths[-1], size=len(x))
    n_layers = len(widths) - 1

    def loss(p):
        h = ad.Tensor(x)
        for i in range(n_layers):
            h = ad.add(ad.matmul(h, p[f"{i}.w"]), p[f"{i}.b"])
            if i < n_layers - 1:
                h = ad.sigmoid(h)
        return ad.mean(ad.softmax_cross_entropy(h, y))

    return loss, params


def c1_autodiff(_: DeskRuns) -> tuple[bool, dict]:
    rng = np.random.default_rng(1)
    errs, sizes = [], []
    for _ in range(50):
        loss, params = random_mlp_instance(rng)
        errs.append(ad.grad_check(loss, params, 1e-5))
        sizes.append(params.size)
    return max(errs) <= 1e-6, {"max_rel_error": max(errs), "instances": 50, "max_params": max(sizes)}


def c2_hvp_fidelity(_: DeskRuns) -> tuple[bool, dict]:
    obj = CubicExpObjective(0)
    alpha = 0.1
    exact = obj.exact_meta_gradient(alpha)
    err = {}
    for scheme in ("central", "forward"):
        got = bilevel.hvp_meta_gradient(obj, obj.theta, obj.phi, alpha, scheme).grad["p"]
        err[scheme] = float(np.linalg.norm(got - exact) / np.linalg.norm(exact))
    ok = err["central"] <= 1e-3 and err["forward"] > err["central"]
    return ok, {"central_rel_error": err["central"], "forward_rel_error": err["forward"],
                "theta_size": obj.theta.size, "phi_size": obj.phi.size}


def c3_meta_gradient(_: DeskRuns) -> tuple[bool, dict]:
    inst = two_class_instance(0)
    alpha = 0.1
    hvp = bilevel.hvp_meta_gradient(inst.objective, inst.theta, inst.phi, alpha).grad.flat()
    oracle = bilevel.oracle_meta_gradient(inst.objective, inst.theta, inst.phi, alpha).flat()
    cos = float(hvp @ oracle / (np.linalg.norm(hvp) * np.linalg.norm(oracle)))
    return cos >= 0.99, {"cosine": cos, "phi_size": inst.phi.size}


def c4_trivial_solution(_: DeskRuns) -> tuple[bool, dict]:
    alpha = 0.01
    out = {}
    for key, shared in (("shared", True), ("held_out", False)):
        inst = stationary_instance(0, shared=shared)
        lab = inst.objective.labeled
        tape = ad.Tape()
        with tape:
            loss = labeled_loss(tape.watch(inst.theta), lab.clouds, lab.labels)
        out[f"{key}_labeled_grad_norm"] = tape.gradient(loss).norm()
        out[f"{key}_hvp_norm"] = bilevel.hvp_meta_gradient(inst.objective, inst.theta, inst.phi, alpha).grad.norm()
    ok = (out["shared_labeled_grad_norm"] <= 1e-8 and out["held_out_labeled_grad_norm"] <= 1e-8
          and out["shared_hvp_norm"] <= 1e-6 and out["held_out_hvp_norm"] >= 1e-3)
    return ok, out


def c5_ordering(runs: DeskRuns) -> tuple[bool, dict]:
    rs = runs.all()
    clean = float(np.mean([r.acc_clean for r in rs]))
    cont = float(np.mean([r.acc_contaminated for r in rs]))
    rebo = float(np.mean([r.acc_rebo for r in rs]))
    return clean > cont and rebo > cont, {
        "clean_baseline": clean, "contaminated_baseline": cont, "rebo": rebo,
        "per_seed": [[r.acc_clean, r.acc_contaminated, r.acc_rebo] for r in rs]}


def c6_separation(runs: DeskRuns) -> tuple[bool, dict]:
    gaps = [r.cohort_means.get("U", np.nan) - r.cohort_means.get("S", np.nan) for r in runs.all()]
    return bool(np.all(np.array(gaps) >= 0.2)), {"gap_U_minus_S": gaps}


def c7_warmup(runs: DeskRuns) -> tuple[bool, dict]:
    rs = runs.all()
    u = [r.warm_unlabeled for r in rs]
    v = [r.warm_validation for r in rs]
    return max(u) <= 0.1 and min(v) >= 0.9, {"unlabeled_mean": u, "validation_mean": v}


def _mid_fraction(w: np.ndarray) -> float:
    return float(np.mean((w >= 0.2) & (w <= 0.8)))


def c8_entropy(runs: DeskRuns) -> tuple[bool, dict]:
    rs = runs.all()
    on = float(np.mean([_mid_fraction(r.final_weights) for r in rs]))
    off = float(np.mean([_mid_fraction(r.final_weights_no_entropy) for r in rs]))
    return on < off, {"mid_fraction_entropy": on, "mid_fraction_no_entropy": off}


def c9_matr(runs: DeskRuns) -> tuple[bool, dict]:
    rs = runs.all()
    with_ = float(np.mean([r.std_matr for r in rs]))
    without = float(np.mean([r.std_no_matr for r in rs]))
    return with_ < without, {"std_matr": with_, "std_no_matr": without}


def c10_schedule(_: DeskRuns) -> tuple[bool, dict]:
    expected = {25: 0.0, 75: 0.0025, 100: 0.005, 101: 0.01}
    got = {e: entropy_weight(e, 0.01) for e in expected}
    ok = all(abs(got[e] - v) <= 1e-15 for e, v in expected.items())
    return ok, {"values": got}


def c11_box_law(_: DeskRuns) -> tuple[bool, dict]:
    rng = np.random.default_rng(11)
    box = Box((0.0, 0.0, 0.0), (1.0, 2.0, 0.5))
    shifts, ratios = [], []
    for _ in range(10_000):
        b = perturb_box(box, rng)
        shifts.append(np.abs(b.center - box.center) / box.size)
        ratios.append(b.size / box.size)
    shifts, ratios = np.array(shifts), np.array(ratios)
    violations = int(np.sum((shifts < 0.5) | (shifts > 1.0)))
    std = float(ratios.std(ddof=1))
    return violations == 0 and abs(std - 0.2) <= 0.02, {"violations": violations, "size_ratio_std": std,
                                                        "size_ratio_mean": float(ratios.mean())}


def c12_transfer(runs: DeskRuns) -> tuple[bool, dict]:
    rs = runs.all()
    transfer = float(np.mean([r.acc_transfer for r in rs]))
    cont = float(np.mean([r.acc_contaminated for r in rs]))
    calls = sum(r.transfer_meta_calls for r in rs)
    return transfer >= cont and calls == 0, {"transfer": transfer, "contaminated_baseline": cont,
                                             "meta_gradient_calls": calls}


def c13_baseline_equivalence(_: DeskRuns) -> tuple[bool, dict]:
    ds = generate_dataset(DatasetSpec(num_points=64, counts={"L": 12, "U": 24, "W": 8, "S": 8, "O": 0, "T": 8},
                                      seed=3))
    data = TrainData.from_dataset(ds)
    cfg = TrainConfig(alpha=0.1, warmup_epochs=2, epochs=3, iters_per_epoch=2, labeled_batch=4,
                      unlabeled_batch=8, val_batch=4, threshold=0.3, eval_every=0, seed=3)
    base = run_baseline(cfg, data)
    rebo = run_rebo(replace(cfg, meta_rate=0.0, freeze_weights=1.0), data)
    same = base.theta.equal(rebo.theta)
    return same, {"epochs": cfg.warmup_epochs + cfg.epochs, "bitwise_equal": same}


CRITERIA: list[tuple[int, str, Callable[[DeskRuns], tuple[bool, dict]]]] = [
    (1, "autodiff gradient check", c1_autodiff),
    (2, "finite-difference HVP fidelity", c2_hvp_fidelity),
    (3, "one-step meta-gradient vs oracle", c3_meta_gradient),
    (4, "trivial-solution invariant", c4_trivial_solution),
    (5, "accuracy ordering", c5_ordering),
    (6, "weight separation U vs S", c6_separation),
    (7, "warm-up contract", c7_warmup),
    (8, "entropy bimodality", c8_entropy),
    (9, "moving-average smoothing", c9_matr),
    (10, "entropy schedule values", c10_schedule),
    (11, "box perturbation law", c11_box_law),
    (12, "transfer retraining", c12_transfer),
    (13, "baseline equivalence", c13_baseline_equivalence),
]


def run_criterion(number: int, runs: DeskRuns) -> Verdict:
    for n, name, fn in CRITERIA:
        if n == number:
            t0 = time.time()
            try:
                ok, detail = fn(runs)
            except Exception as e:  # a crash is a failed criterion, not a crashed suite
                log.exception("criterion %d raised", n)
                ok, detail = False, {"error": f"{type(e).__name__}: {e}"}
            return Verdict(n, name, bool(ok), detail, time.time() - t0)
    raise KeyError(f"no criterion {number}")


def run_suite(cfg: SuiteConfig | None = None, only: list[int] | None = None,
              echo: Callable[[str], None] | None = None) -> list[Verdict]:
    runs = DeskRuns(cfg or SuiteConfig())
    out = []
    for n, _, _ in CRITERIA:
        if only and n not in only:
            continue
        v = run_criterion(n, runs)
        if echo:
            echo(v.line())
        out.append(v)
    return out


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj
