"""One-step unrolled meta-gradients for the sample-weight predictor.

The outer variable ``phi`` only reaches the validation loss through the
one-step update ``theta* = theta - alpha * grad_theta L_tr(theta, phi)``. Its
gradient is the mixed second derivative of ``L_tr`` applied to
``v = grad L_val(theta*)``, which :func:`hvp_meta_gradient` approximates with
a difference of ``grad_phi L_tr`` at ``theta +/- eps * v``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .params import ParamSet
from .regularizers import loss_entropy, loss_matr, weight_od

EPS_SCALE = 1e-2

# instrumentation: number of finite-difference meta-gradients evaluated
calls: Counter = Counter()


class DegenerateStep(ArithmeticError):
    """The validation gradient vanished, so the finite-difference step is undefined."""


class NonFiniteStage(ArithmeticError):
    pass


class BilevelObjective(Protocol):
    def train_loss(self, theta, phi) -> Tensor: ...

    def val_loss(self, theta) -> Tensor: ...


class WeightedObjective(BilevelObjective, Protocol):
    def unlabeled_weights(self, phi) -> Tensor: ...

    def validation_weights(self, phi) -> Tensor: ...


def _consts(params) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def grad_theta_train(obj: BilevelObjective, theta: ParamSet, phi: ParamSet) -> tuple[float, ParamSet]:
    tape = Tape()
    with tape:
        loss = obj.train_loss(tape.watch(theta), _consts(phi))
    return float(loss.data), tape.gradient(loss)


def grad_phi_train(obj: BilevelObjective, theta: ParamSet, phi: ParamSet) -> ParamSet:
    # objectives may drop phi-independent terms here; the gradient is unchanged
    fn = getattr(obj, "phi_train_loss", obj.train_loss)
    tape = Tape()
    with tape:
        loss = fn(_consts(theta), tape.watch(phi))
    return tape.gradient(loss)


def grad_val(obj: BilevelObjective, theta: ParamSet) -> tuple[float, ParamSet]:
    tape = Tape()
    with tape:
        loss = obj.val_loss(tape.watch(theta))
    return float(loss.data), tape.gradient(loss)


def virtual_step(theta: ParamSet, grad: ParamSet, alpha: float) -> ParamSet:
    missing = [k for k in theta if k not in grad]
    if missing:
        raise KeyError(f"gradient missing for {missing}")
    return ParamSet({k: v - alpha * grad[k] for k, v in theta.items()})


def epsilon_of(v: ParamSet) -> float:
    norm = v.norm()
    if not norm > 0.0:
        raise DegenerateStep("validation gradient has zero norm")
    return EPS_SCALE / norm


@dataclass
class HVPResult:
    grad: ParamSet
    epsilon: float
    val_loss: float
    val_grad_norm: float


def _finite(stage: str, p: ParamSet) -> ParamSet:
    if not p.is_finite():
        raise NonFiniteStage(f"non-finite values at stage {stage!r}")
    return p


def hvp_meta_gradient(obj: BilevelObjective, theta: ParamSet, phi: ParamSet, alpha: float,
                      scheme: str = "central") -> HVPResult:
    """Finite-difference approximation of ``-alpha * d2L_tr/dphi dtheta . v``.

    ``scheme="central"`` differences ``grad_phi L_tr`` at ``theta +/- eps v``;
    ``scheme="forward"`` uses ``theta + eps v`` and ``theta`` and is kept only
    for comparison. Raises :class:`DegenerateStep` when ``v`` vanishes.
    """
    if scheme not in ("central", "forward"):
        raise ValueError(f"unknown scheme {scheme!r}")
    calls["hvp"] += 1
    _, g_train = grad_theta_train(obj, theta, phi)
    theta_star = _finite("virtual step", virtual_step(theta, _finite("train gradient", g_train), alpha))
    val_loss, v = grad_val(obj, theta_star)
    _finite("validation gradient", v)
    eps = epsilon_of(v)
    g_plus = grad_phi_train(obj, theta + v * eps, phi)
    if scheme == "central":
        g_minus = grad_phi_train(obj, theta - v * eps, phi)
        hv = (g_plus - g_minus) * (1.0 / (2.0 * eps))
    else:
        g_base = grad_phi_train(obj, theta, phi)
        hv = (g_plus - g_base) * (1.0 / eps)
    # adding +0.0 turns the -0.0 of a vanishing difference into an exact zero
    grad = _finite("hessian-vector product", hv * (-alpha) + 0.0)
    return HVPResult(grad, eps, val_loss, v.norm())


def meta_objective(obj: BilevelObjective, theta: ParamSet, phi: ParamSet, alpha: float) -> float:
    """``L_val(theta - alpha grad_theta L_tr(theta, phi))`` as a number."""
    _, g = grad_theta_train(obj, theta, phi)
    with ad.no_grad():
        return float(obj.val_loss(_consts(virtual_step(theta, g, alpha))).data)


def oracle_meta_gradient(obj: BilevelObjective, theta: ParamSet, phi: ParamSet, alpha: float,
                         h: float = 1e-5) -> ParamSet:
    """Per-coordinate central differences of the one-step meta-objective in ``phi``."""
    if phi.size > 500:
        raise ValueError("oracle probing is limited to 500 predictor scalars")
    flat = phi.flat()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            vals.append(meta_objective(obj, theta, phi.unflatten(probe), alpha))
        out[i] = (vals[0] - vals[1]) / (2.0 * h)
    return phi.unflatten(out)


def mixed_partials(obj: BilevelObjective, theta: ParamSet, phi: ParamSet, h: float = 1e-4) -> np.ndarray:
    """Dense ``d2 L_tr / dphi_i dtheta_j`` from nested central differences of the loss value."""
    tf, pf = theta.flat(), phi.flat()

    def f(t, p):
        with ad.no_grad():
            return float(obj.train_loss(_consts(theta.unflatten(t)), _consts(phi.unflatten(p))).data)

    out = np.zeros((pf.size, tf.size))
    for i in range(pf.size):
        ei = np.zeros_like(pf)
        ei[i] = h
        for j in range(tf.size):
            ej = np.zeros_like(tf)
            ej[j] = h
            out[i, j] = (f(tf + ej, pf + ei) - f(tf + ej, pf - ei)
                         - f(tf - ej, pf + ei) + f(tf - ej, pf - ei)) / (4.0 * h * h)
    return out


@dataclass
class MetaStepInputs:
    """Everything one predictor update needs.

    ``reg_targets`` are the (constant) previous or moving-average weights of
    the unlabeled batch; ``None`` disables the temporal term.
    """

    theta: ParamSet
    phi: ParamSet
    objective: BilevelObjective
    alpha: float
    gamma: float = 0.0
    xi: float = 0.0
    eta: float = 0.0
    meta_rate: float = 1e-3
    reg_targets: np.ndarray | None = None
    scheme: str = "central"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if min(self.gamma, self.xi, self.eta) < 0:
            raise ValueError("regularizer coefficients must be non-negative")


@dataclass
class HypergradientReport:
    hvp_norm: float = 0.0
    reg_norm: float = 0.0
    ent_norm: float = 0.0
    od_norm: float = 0.0
    total_norm: float = 0.0
    epsilon: float = float("nan")
    val_loss: float = float("nan")
    skipped: bool = False
    extra: dict = field(default_factory=dict)


def regularizer_gradients(inputs: MetaStepInputs) -> dict[str, ParamSet]:
    """Analytic predictor gradients of the temporal, entropy and outlier terms."""
    out: dict[str, ParamSet] = {}
    wanted = {
        "reg": inputs.gamma > 0 and inputs.reg_targets is not None,
        "ent": inputs.xi > 0,
        "od": inputs.eta > 0,
    }
    if not any(wanted.values()):
        return out
    obj = inputs.objective
    tape = Tape()
    with tape:
        phi = tape.watch(inputs.phi)
        lam_u = obj.unlabeled_weights(phi) if (wanted["reg"] or wanted["ent"]) else None
        if wanted["reg"]:
            out["reg"] = tape.gradient(loss_matr(lam_u, inputs.reg_targets))
        if wanted["ent"]:
            out["ent"] = tape.gradient(loss_entropy(lam_u))
        if wanted["od"]:
            out["od"] = tape.gradient(weight_od(obj.validation_weights(phi)))
    return out


def meta_step(inputs: MetaStepInputs) -> tuple[ParamSet, HypergradientReport]:
    """One plain gradient-descent update of the predictor on the combined meta-objective.

    If the validation gradient vanishes the finite-difference term is skipped
    and only the regularizer gradients are applied.
    """
    report = HypergradientReport()
    zero = inputs.phi * 0.0
    try:
        hvp = hvp_meta_gradient(inputs.objective, inputs.theta, inputs.phi, inputs.alpha, inputs.scheme)
        total = hvp.grad
        report.hvp_norm = hvp.grad.norm()
        report.epsilon = hvp.epsilon
        report.val_loss = hvp.val_loss
    except DegenerateStep:
        total = zero
        report.skipped = True
    regs = regularizer_gradients(inputs)
    coef = {"reg": inputs.gamma, "ent": inputs.xi, "od": inputs.eta}
    for name, g in regs.items():
        setattr(report, f"{name}_norm", g.norm())
        total = total + g * coef[name]
    report.total_norm = total.norm()
    return inputs.phi - total * inputs.meta_rate, report
