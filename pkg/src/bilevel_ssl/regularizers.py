"""Meta-objective regularizers, the weight ledger and the entropy schedule."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import predict_weight


def loss_od(phi, features) -> Tensor:
    """Outlier-detection term: sum of -log(weight) over validation samples."""
    lam = predict_weight(phi, features)
    return weight_od(lam)


def weight_od(lam) -> Tensor:
    return ad.neg(ad.sum(ad.log(lam)))


def _squared_distance(op: str, w, target) -> Tensor:
    w = ad.as_tensor(w)
    target = np.asarray(target, dtype=np.float64)
    if w.shape != target.shape:
        raise ad.ShapeError(op, w.shape, target.shape)
    d = ad.sub(w, Tensor(target))
    return ad.sum(ad.square(d))


def loss_dtr(w_t, w_prev) -> Tensor:
    """Squared distance to the previous iteration's weights (held constant)."""
    return _squared_distance("loss_dtr", w_t, w_prev)


def loss_matr(w_t, w_avg_prev) -> Tensor:
    """Squared distance to the moving-average weights (held constant)."""
    return _squared_distance("loss_matr", w_t, w_avg_prev)


def loss_entropy(w) -> Tensor:
    """Mean binary entropy of the weights."""
    w = ad.as_tensor(w)
    if w.data.size == 0:
        return Tensor(0.0)
    one_minus = ad.sub(1.0, w)
    h = ad.add(ad.mul(w, ad.log(w)), ad.mul(one_minus, ad.log(one_minus)))
    return ad.neg(ad.mean(h))


def entropy_weight(epoch: int, delta: float, continuous: bool = False) -> float:
    """Piecewise schedule for the entropy coefficient.

    0 before epoch 50, ``delta * (epoch - 50) / 100`` on [50, 100], ``delta``
    after 100, which leaves a jump from ``delta / 2`` to ``delta`` at 100.
    ``continuous=True`` ramps over [50, 100] to reach ``delta`` without the jump.
    """
    if epoch < 0 or delta < 0:
        raise ValueError("epoch and delta must be non-negative")
    if epoch < 50:
        return 0.0
    if epoch <= 100:
        return delta * (epoch - 50) / (50 if continuous else 100)
    return float(delta)


@dataclass
class WeightLedger:
    """Per-sample current weight and its exponential moving average."""

    beta: float = 0.5
    current: dict[int, float] = field(default_factory=dict)
    average: dict[int, float] = field(default_factory=dict)
    cohort: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")

    def __contains__(self, sample_id: int) -> bool:
        return int(sample_id) in self.current

    def __len__(self) -> int:
        return len(self.current)

    def update(self, sample_id: int, w: float, cohort: str | None = None) -> None:
        sid = int(sample_id)
        w = float(w)
        old = self.average.get(sid)
        self.average[sid] = w if old is None else self.beta * old + (1.0 - self.beta) * w
        self.current[sid] = w
        if cohort is not None:
            self.cohort[sid] = str(cohort)

    def update_many(self, ids, weights, cohorts=None) -> None:
        for i, sid in enumerate(ids):
            self.update(sid, weights[i], None if cohorts is None else cohorts[i])

    def targets(self, ids, fallback, kind: str = "matr") -> np.ndarray:
        """Regularization targets for ``ids``; unseen ids use ``fallback``.

        ``kind`` is ``"matr"`` for the moving average or ``"dtr"`` for the
        previous weight.
        """
        table = self.average if kind == "matr" else self.current
        if kind not in ("matr", "dtr"):
            raise ValueError(f"unknown regularizer kind {kind!r}")
        fallback = np.asarray(fallback, dtype=np.float64)
        return np.array([table.get(int(s), fallback[i]) for i, s in enumerate(ids)], dtype=np.float64)

    def snapshot(self) -> "WeightLedger":
        return WeightLedger(self.beta, dict(self.current), dict(self.average), dict(self.cohort))

    def cohort_means(self) -> dict[str, float]:
        out: dict[str, list[float]] = {}
        for sid, w in self.current.items():
            out.setdefault(self.cohort.get(sid, "?"), []).append(w)
        return {c: float(np.mean(v)) for c, v in sorted(out.items())}

    def values(self, cohort: str | None = None) -> np.ndarray:
        return np.array([w for sid, w in sorted(self.current.items())
                         if cohort is None or self.cohort.get(sid) == cohort])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["sample_id", "cohort", "w", "w_avg"])
            for sid in sorted(self.current):
                out.writerow([sid, self.cohort.get(sid, ""), repr(self.current[sid]),
                              repr(self.average[sid])])

    @classmethod
    def from_csv(cls, path: str | Path, beta: float = 0.5) -> "WeightLedger":
        ledger = cls(beta)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                sid = int(row["sample_id"])
                ledger.current[sid] = float(row["w"])
                ledger.average[sid] = float(row["w_avg"])
                if row["cohort"]:
                    ledger.cohort[sid] = row["cohort"]
        return ledger


def update_moving_average(ledger: WeightLedger, sample_id: int, w_t: float) -> WeightLedger:
    ledger.update(sample_id, w_t)
    return ledger
