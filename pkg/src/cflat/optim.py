"""Optimizer family: SGD, SAM, C-Flat, hybrid mixing, and C-Flat++.

A C-Flat step combines the loss gradient taken at a nearby ascent point
(zeroth-order sharpness) with a Hessian-vector-product estimate of the
neighborhood gradient-norm growth (first-order flatness):

    g   = grad(theta)
    g0  = grad(theta + rho * g / (||g|| + eps))
    h   = hvp(theta, g / (||g|| + eps))
    th1 = theta + rho * h / (||h|| + eps)
    g1  = hvp(th1, grad(th1) / (||grad(th1)|| + eps))
    theta' = theta - eta * (g0 + lam * g1)

C-Flat++ applies that update selectively: only when the batch squared
gradient norm exceeds a sigmoidal sharpness proxy A / (1 + e^{-k(i - i0)}),
whose bound A adapts by error feedback A <- A - eta0 * E.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numcore import ParamVector, SeededRng, all_finite, axpy, norm2
from .objective import Batch, ObjectiveOracle

__all__ = [
    "OptimConfig",
    "ProxyState",
    "StepStats",
    "DivergenceError",
    "sam_perturb",
    "sgd_step",
    "sam_step",
    "cflat_gradient",
    "cflat_step",
    "cflat_perturbation",
    "rho_schedule",
    "proxy_value",
    "cflatpp_step",
    "hybrid_step_plan",
    "train_epochs",
    "Stepper",
    "SgdStepper",
    "SamStepper",
    "CflatStepper",
    "CflatPPStepper",
    "HybridStepper",
    "make_stepper",
    "OPTIMIZER_NAMES",
]


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient turns non-finite; carries the step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class OptimConfig:
    """Learning rate, neighborhood radius, trade-off, and scheduler bounds.

    With the default bounds (rho_min = rho_max = rho, eta_min = 0,
    eta_max = eta) the radius schedule is constant; setting rho_min < rho_max
    ties the radius linearly to the decayed learning rate.
    """

    eta: float = 0.1
    rho: float = 0.2
    lam: float = 0.2
    eps_guard: float = 1e-12
    rho_min: float | None = None
    rho_max: float | None = None
    eta_min: float | None = None
    eta_max: float | None = None

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.eps_guard <= 0:
            raise ValueError("eps_guard must be positive")
        if self.rho_min is None:
            object.__setattr__(self, "rho_min", self.rho)
        if self.rho_max is None:
            object.__setattr__(self, "rho_max", self.rho)
        if self.eta_min is None:
            object.__setattr__(self, "eta_min", 0.0)
        if self.eta_max is None:
            object.__setattr__(self, "eta_max", self.eta)
        if not self.rho_min <= self.rho <= self.rho_max:
            raise ValueError("need rho_min <= rho <= rho_max")
        if not self.eta_min <= self.eta <= self.eta_max:
            raise ValueError("need eta_min <= eta <= eta_max")


@dataclass(frozen=True)
class ProxyState:
    """Adaptive sharpness-proxy state: bound A, curvature k, inflection i0.

    The iteration counter starts at 1 and advances by one per step; only A is
    adapted by error feedback, k and i0 stay fixed.
    """

    A: float = 5.0
    k: float = 0.01
    i0: int = 80
    eta0: float = 5e-3
    i: int = 1

    def __post_init__(self):
        if not math.isfinite(self.A):
            raise ValueError("A must be finite")


@dataclass(frozen=True)
class StepStats:
    """Per-step bookkeeping.

    grad_evals follows the optimizer's cost accounting: direct gradient
    evaluations plus one per Hessian-vector product. epoch/task are filled in
    by the training loop and harness; the gpm_* fields only by projected steps.
    """

    loss: float
    sq_grad_norm: float
    used_cflat: bool = False
    proxy_value: float | None = None
    grad_evals: int = 0
    hvp_evals: int = 0
    epoch: int = 0
    task: int = 0
    gpm_in_span: float | None = None
    gpm_src_norm: float | None = None


def _require_finite_theta(theta: ParamVector) -> None:
    if not all_finite(theta):
        raise DivergenceError("parameters contain NaN/Inf")


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise DivergenceError(f"non-finite {what} encountered")


def sam_perturb(g: ParamVector, rho: float, eps_guard: float) -> ParamVector:
    """Ascent perturbation rho * g / (||g|| + eps); zero gradient gives zero."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return g.with_data(rho * g.data / (norm2(g) + eps_guard))


def sgd_step(oracle: ObjectiveOracle, theta: ParamVector, batch: Batch,
             cfg: OptimConfig) -> tuple[ParamVector, StepStats]:
    """theta - eta * grad(theta)."""
    _require_finite_theta(theta)
    loss = oracle.loss(theta, batch)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    g = oracle.grad(theta, batch)
    _require_finite(g.data, "gradient")
    new_theta = axpy(-cfg.eta, g, theta)
    stats = StepStats(loss=loss, sq_grad_norm=norm2(g) ** 2, grad_evals=1)
    return new_theta, stats


def sam_step(oracle: ObjectiveOracle, theta: ParamVector, batch: Batch,
             cfg: OptimConfig) -> tuple[ParamVector, StepStats]:
    """theta - eta * grad(theta + ascent perturbation)."""
    _require_finite_theta(theta)
    loss = oracle.loss(theta, batch)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    g = oracle.grad(theta, batch)
    _require_finite(g.data, "gradient")
    eps0 = sam_perturb(g, cfg.rho, cfg.eps_guard)
    g0 = oracle.grad(axpy(1.0, eps0, theta), batch)
    _require_finite(g0.data, "perturbed gradient")
    new_theta = axpy(-cfg.eta, g0, theta)
    stats = StepStats(loss=loss, sq_grad_norm=norm2(g) ** 2, grad_evals=2)
    return new_theta, stats


def _cflat_combined(oracle, theta, batch, cfg, g: ParamVector, loss: float):
    """Combined direction g0 + lam*g1 given the already-computed base gradient."""
    eps = cfg.eps_guard
    gnorm = norm2(g)

    eps0 = sam_perturb(g, cfg.rho, eps)
    g0 = oracle.grad(axpy(1.0, eps0, theta), batch)
    _require_finite(g0.data, "perturbed gradient")

    ghat = g.with_data(g.data / (gnorm + eps))
    h = oracle.hvp(theta, ghat, batch, base_grad=g)
    _require_finite(h.data, "hvp")
    eps1 = h.with_data(cfg.rho * h.data / (norm2(h) + eps))
    theta1 = axpy(1.0, eps1, theta)
    g_at1 = oracle.grad(theta1, batch)
    _require_finite(g_at1.data, "gradient at flatness point")
    ghat1 = g_at1.with_data(g_at1.data / (norm2(g_at1) + eps))
    g1 = oracle.hvp(theta1, ghat1, batch, base_grad=g_at1)
    _require_finite(g1.data, "hvp at flatness point")

    combined = g0.with_data(g0.data + cfg.lam * g1.data)
    stats = StepStats(
        loss=loss,
        sq_grad_norm=gnorm ** 2,
        used_cflat=True,
        grad_evals=4,
        hvp_evals=2,
    )
    return combined, stats


def cflat_gradient(oracle: ObjectiveOracle, theta: ParamVector, batch: Batch,
                   cfg: OptimConfig) -> tuple[ParamVector, StepStats]:
    """The combined update direction g0 + lam * g1 (see module docstring)."""
    _require_finite_theta(theta)
    loss = oracle.loss(theta, batch)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    g = oracle.grad(theta, batch)
    _require_finite(g.data, "gradient")
    return _cflat_combined(oracle, theta, batch, cfg, g, loss)


def cflat_step(oracle: ObjectiveOracle, theta: ParamVector, batch: Batch,
               cfg: OptimConfig) -> tuple[ParamVector, StepStats]:
    """theta - eta * (g0 + lam * g1)."""
    combined, stats = cflat_gradient(oracle, theta, batch, cfg)
    return axpy(-cfg.eta, combined, theta), stats


def cflat_perturbation(oracle: ObjectiveOracle, theta: ParamVector, batch: Batch,
                       cfg: OptimConfig) -> tuple[ParamVector, StepStats]:
    """Neighborhood perturbation along the combined direction, norm <= rho.

    Used by the projected (GPM-family) step, which evaluates its gradient at
    theta + eps_c rather than applying the combined direction directly.
    """
    combined, stats = cflat_gradient(oracle, theta, batch, cfg)
    eps_c = combined.with_data(
        cfg.rho * combined.data / (norm2(combined) + cfg.eps_guard)
    )
    return eps_c, stats


def rho_schedule(cfg: OptimConfig, eta_i: float) -> float:
    """Radius tied linearly to the current learning rate.

    rho_i = rho_min + (rho_max - rho_min) / (eta_max - eta_min) * (eta_i - eta_min);
    a degenerate eta range means a constant schedule at rho_max.
    """
    if cfg.eta_max == cfg.eta_min:
        return cfg.rho_max
    if not cfg.eta_min <= eta_i <= cfg.eta_max:
        raise ValueError(f"eta_i={eta_i} outside [{cfg.eta_min}, {cfg.eta_max}]")
    slope = (cfg.rho_max - cfg.rho_min) / (cfg.eta_max - cfg.eta_min)
    return cfg.rho_min + slope * (eta_i - cfg.eta_min)


def proxy_value(state: ProxyState) -> float:
    """Sigmoidal sharpness proxy A / (1 + e^{-k(i - i0)}) at the current i."""
    x = -state.k * (state.i - state.i0)
    if x > 700.0:  # exp would overflow; the sigmoid is ~0 here
        return 0.0
    return state.A / (1.0 + math.exp(x))


def cflatpp_step(
    oracle: ObjectiveOracle,
    theta: ParamVector,
    batch: Batch,
    cfg: OptimConfig,
    state: ProxyState,
) -> tuple[ParamVector, ProxyState, StepStats]:
    """Selective flatness step gated by the sharpness proxy.

    E = proxy - ||g||^2 decides the branch (C-Flat when E <= 0, plain SGD
    otherwise); the bound updates to A - eta0 * E either way, and i advances.
    """
    _require_finite_theta(theta)
    loss = oracle.loss(theta, batch)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    g = oracle.grad(theta, batch)
    _require_finite(g.data, "gradient")
    s = norm2(g) ** 2
    proxy = proxy_value(state)
    feedback = proxy - s
    new_state = replace(state, A=state.A - state.eta0 * feedback, i=state.i + 1)

    if feedback <= 0:
        direction, cstats = _cflat_combined(oracle, theta, batch, cfg, g, loss)
        stats = replace(cstats, proxy_value=proxy)
    else:
        direction = g
        stats = StepStats(
            loss=loss, sq_grad_norm=s, proxy_value=proxy, grad_evals=1
        )
    return axpy(-cfg.eta, direction, theta), new_state, stats


def hybrid_step_plan(total_steps: int, p: float, ordering: str) -> np.ndarray:
    """Boolean plan with round(p * total_steps) C-Flat entries.

    "cflat_first" places them as a contiguous prefix, "cflat_last" as a
    suffix; rounding is round-half-to-even.
    """
    if total_steps < 0:
        raise ValueError("total_steps must be nonnegative")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if ordering not in ("cflat_first", "cflat_last"):
        raise ValueError(f"unknown ordering {ordering!r}")
    k = round(p * total_steps)
    plan = np.zeros(total_steps, dtype=bool)
    if ordering == "cflat_first":
        plan[:k] = True
    elif k > 0:
        plan[total_steps - k :] = True
    return plan


class Stepper:
    """Per-run optimizer wrapper: owns any cross-step state."""

    name = "base"

    def prepare(self, total_steps: int) -> None:
        """Called once before a training run with the planned step count."""

    def reset_task(self) -> None:
        """Called at task boundaries by the continual harness."""

    def step(self, oracle, theta, batch, cfg):
        raise NotImplementedError


class SgdStepper(Stepper):
    name = "sgd"

    def step(self, oracle, theta, batch, cfg):
        return sgd_step(oracle, theta, batch, cfg)


class SamStepper(Stepper):
    name = "sam"

    def step(self, oracle, theta, batch, cfg):
        return sam_step(oracle, theta, batch, cfg)


class CflatStepper(Stepper):
    name = "cflat"

    def step(self, oracle, theta, batch, cfg):
        return cflat_step(oracle, theta, batch, cfg)


class CflatPPStepper(Stepper):
    name = "cflat++"

    def __init__(self, proxy: ProxyState | None = None, reset_per_task: bool = True):
        self.initial = proxy if proxy is not None else ProxyState()
        self.state = self.initial
        self.reset_per_task = reset_per_task

    def reset_task(self):
        if self.reset_per_task:
            self.state = self.initial

    def step(self, oracle, theta, batch, cfg):
        theta, self.state, stats = cflatpp_step(oracle, theta, batch, cfg, self.state)
        return theta, stats


class HybridStepper(Stepper):
    name = "hybrid"

    def __init__(self, p: float, ordering: str = "cflat_last"):
        self.p = p
        self.ordering = ordering
        self.plan = np.zeros(0, dtype=bool)
        self.idx = 0

    def prepare(self, total_steps: int):
        self.plan = hybrid_step_plan(total_steps, self.p, self.ordering)
        self.idx = 0

    def step(self, oracle, theta, batch, cfg):
        use_cflat = bool(self.plan[self.idx]) if self.idx < len(self.plan) else False
        self.idx += 1
        if use_cflat:
            return cflat_step(oracle, theta, batch, cfg)
        return sgd_step(oracle, theta, batch, cfg)


OPTIMIZER_NAMES = ("sgd", "sam", "cflat", "cflat++", "hybrid")


def make_stepper(
    name: str,
    proxy: ProxyState | None = None,
    proxy_reset_per_task: bool = True,
    hybrid_p: float = 0.5,
    hybrid_ordering: str = "cflat_last",
) -> Stepper:
    key = name.lower().replace("cflatpp", "cflat++")
    if key == "sgd":
        return SgdStepper()
    if key == "sam":
        return SamStepper()
    if key == "cflat":
        return CflatStepper()
    if key == "cflat++":
        return CflatPPStepper(proxy, proxy_reset_per_task)
    if key == "hybrid":
        return HybridStepper(hybrid_p, hybrid_ordering)
    raise ValueError(f"unknown optimizer {name!r}; expected one of {OPTIMIZER_NAMES}")


def train_epochs(
    oracle: ObjectiveOracle,
    theta: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    cfg: OptimConfig,
    stepper: Stepper,
    epochs: int,
    batch_size: int,
    rng: SeededRng,
    milestones: tuple[int, ...] = (),
    lr_decay: float = 0.1,
) -> tuple[ParamVector, list[StepStats]]:
    """Shuffled mini-batch training with learning-rate milestones.

    The learning rate multiplies by lr_decay at each milestone epoch and the
    radius follows rho_schedule. The ragged tail of each epoch (fewer than
    batch_size rows) is dropped. Divergence aborts with the step index.
    """
    n = len(y)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    steps_per_epoch = n // batch_size
    stepper.prepare(epochs * steps_per_epoch)

    trace: list[StepStats] = []
    eta = cfg.eta
    step_idx = 0
    for epoch in range(epochs):
        if epoch in milestones:
            eta *= lr_decay
        eta_sched = min(max(eta, cfg.eta_min), cfg.eta_max)
        cfg_i = replace(cfg, eta=eta, rho=rho_schedule(cfg, eta_sched))
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            batch = Batch(x[idx], y[idx])
            try:
                theta, stats = stepper.step(oracle, theta, batch, cfg_i)
            except DivergenceError as err:
                err.step = step_idx
                raise
            trace.append(replace(stats, epoch=epoch))
            step_idx += 1
    return theta, trace
