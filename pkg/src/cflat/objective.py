"""Differentiable objectives: quadratic, multinomial logistic, and MLP oracles.

Every oracle exposes ``loss``, ``grad`` and ``hvp`` on a batch. The quadratic
and logistic oracles return exact Hessian-vector products; the MLP
approximates them with a forward difference of gradients, which is all the
optimizers ever consume. Losses are mean-reduced over the batch so step
sizes and perturbation radii transfer across batch sizes.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numcore import ParamVector, SeededRng, Segment, norm2

__all__ = [
    "Batch",
    "ObjectiveOracle",
    "QuadraticOracle",
    "LogisticOracle",
    "MlpSpec",
    "MlpOracle",
    "make_quadratic",
    "make_logreg",
    "make_mlp",
    "mlp_manifest",
    "fd_hvp",
]


@dataclass(frozen=True)
class Batch:
    """A feature matrix (n, d_in) with integer class labels in [0, C)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError("labels must be 1-D and aligned with features")
        if x.shape[0] < 1:
            raise ValueError("batch must contain at least one example")
        if (y < 0).any():
            raise ValueError("labels must be nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_in(self) -> int:
        return self.x.shape[1]


class ObjectiveOracle:
    """Contract: twice-differentiable scalar loss with grad/hvp entry points."""

    dim: int

    def loss(self, theta: ParamVector, batch: Batch | None = None) -> float:
        raise NotImplementedError

    def grad(self, theta: ParamVector, batch: Batch | None = None) -> ParamVector:
        raise NotImplementedError

    def hvp(
        self,
        theta: ParamVector,
        v: ParamVector,
        batch: Batch | None = None,
        base_grad: ParamVector | None = None,
    ) -> ParamVector:
        raise NotImplementedError

    def _require_dim(self, theta: ParamVector) -> None:
        if theta.dim != self.dim:
            raise ValueError(f"dimension mismatch: theta has {theta.dim}, oracle expects {self.dim}")


def fd_hvp(grad_fn, theta: ParamVector, v: ParamVector, delta_fd: float = 1e-4,
           base_grad: ParamVector | None = None) -> ParamVector:
    """Forward-difference HVP: (g(theta + d*vhat) - g(theta)) / d * ||v||.

    The step d = delta_fd * (1 + ||theta||) balances truncation against
    round-off in 64-bit. A zero direction returns zero exactly.
    """
    if v.dim != theta.dim:
        raise ValueError(f"dimension mismatch: direction has {v.dim}, theta {theta.dim}")
    vnorm = norm2(v)
    if vnorm == 0.0:
        return v.with_data(np.zeros(v.dim))
    delta = delta_fd * (1.0 + norm2(theta))
    vhat = v.data / vnorm
    shifted = grad_fn(theta.with_data(theta.data + delta * vhat))
    base = base_grad if base_grad is not None else grad_fn(theta)
    return v.with_data((shifted.data - base.data) * (vnorm / delta))


class QuadraticOracle(ObjectiveOracle):
    """L(theta) = 0.5 (theta - c)^T H (theta - c) with analytic grad and hvp.

    The batch argument is accepted and ignored: the loss is data-free, which
    makes curvature quantities exactly computable for verification.
    """

    def __init__(self, H, c=None):
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError(f"H must be square, got shape {H.shape}")
        if not np.allclose(H, H.T, rtol=1e-12, atol=1e-12):
            raise ValueError("H must be symmetric")
        self.H = (H + H.T) / 2.0
        self.dim = H.shape[0]
        if c is None:
            self.center = np.zeros(self.dim)
        else:
            cdata = c.data if isinstance(c, ParamVector) else np.asarray(c, dtype=np.float64)
            if cdata.size != self.dim:
                raise ValueError("center dimension does not match H")
            self.center = cdata.reshape(-1).copy()

    def loss(self, theta, batch=None) -> float:
        self._require_dim(theta)
        d = theta.data - self.center
        return float(0.5 * d @ self.H @ d)

    def grad(self, theta, batch=None) -> ParamVector:
        self._require_dim(theta)
        return theta.with_data(self.H @ (theta.data - self.center))

    def hvp(self, theta, v, batch=None, base_grad=None) -> ParamVector:
        self._require_dim(theta)
        if v.dim != self.dim:
            raise ValueError("direction dimension mismatch")
        return v.with_data(self.H @ v.data)


def make_quadratic(H, c=None) -> QuadraticOracle:
    return QuadraticOracle(H, c)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(z - m).sum(axis=1))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def mlp_manifest(widths: tuple[int, ...]) -> tuple[Segment, ...]:
    """Segments (W0, b0, W1, b1, ...) for consecutive layer widths."""
    segs = []
    offset = 0
    for layer, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
        segs.append(Segment(f"W{layer}", offset, (d_out, d_in)))
        offset += d_out * d_in
        segs.append(Segment(f"b{layer}", offset, (d_out,)))
        offset += d_out
    return tuple(segs)


class LogitModel(ObjectiveOracle):
    """Shared plumbing for softmax cross-entropy models with a logit head.

    Subclasses provide ``logits`` and the data-term gradient given an
    output-layer error signal; composed losses (distillation, replay) reuse
    that hook instead of reimplementing backprop.
    """

    n_classes: int
    l2: float
    manifest: tuple[Segment, ...]

    def logits(self, theta: ParamVector, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_from_output_error(
        self, theta: ParamVector, x: np.ndarray, dlogits: np.ndarray,
        include_l2: bool = False,
    ) -> ParamVector:
        raise NotImplementedError

    def with_head(self, n_classes: int) -> "LogitModel":
        raise NotImplementedError

    def loss(self, theta, batch=None) -> float:
        self._require_dim(theta)
        self._check_labels(batch)
        z = self.logits(theta, batch.x)
        ce = float(np.mean(_logsumexp(z) - z[np.arange(batch.n), batch.y]))
        return ce + 0.5 * self.l2 * float(theta.data @ theta.data)

    def grad(self, theta, batch=None) -> ParamVector:
        self._require_dim(theta)
        self._check_labels(batch)
        z = self.logits(theta, batch.x)
        g_out = _softmax(z)
        g_out[np.arange(batch.n), batch.y] -= 1.0
        g_out /= batch.n
        return self.grad_from_output_error(theta, batch.x, g_out, include_l2=True)

    def predict(self, theta: ParamVector, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(theta, x), axis=1)

    def _check_labels(self, batch: Batch) -> None:
        if batch is None:
            raise ValueError("this oracle requires a batch")
        if int(batch.y.max()) >= self.n_classes:
            raise ValueError(
                f"label {int(batch.y.max())} outside head width {self.n_classes}"
            )

    @property
    def head_weight_name(self) -> str:
        return self.manifest[-2].name

    @property
    def head_bias_name(self) -> str:
        return self.manifest[-1].name


class LogisticOracle(LogitModel):
    """Multinomial logistic regression with exact gradient and exact HVP.

    Logits are affine in the parameters, so the Gauss-Newton product equals
    the true Hessian product.
    """

    def __init__(self, d_in: int, n_classes: int, l2: float = 0.0):
        if d_in < 1:
            raise ValueError("d_in must be >= 1")
        if n_classes < 2:
            raise ValueError("need at least two classes")
        if l2 < 0:
            raise ValueError("l2 must be nonnegative")
        self.d_in = d_in
        self.n_classes = n_classes
        self.l2 = float(l2)
        self.manifest = mlp_manifest((d_in, n_classes))
        self.dim = sum(seg.size for seg in self.manifest)

    def with_head(self, n_classes: int) -> "LogisticOracle":
        return LogisticOracle(self.d_in, n_classes, self.l2)

    def logits(self, theta, x):
        W = theta.view("W0")
        b = theta.view("b0")
        return x @ W.T + b

    def grad_from_output_error(self, theta, x, dlogits, include_l2=False):
        dW = dlogits.T @ x
        db = dlogits.sum(axis=0)
        flat = np.concatenate([dW.ravel(), db])
        if include_l2 and self.l2 > 0:
            flat = flat + self.l2 * theta.data
        return ParamVector(flat, self.manifest)

    def hvp(self, theta, v, batch=None, base_grad=None):
        self._require_dim(theta)
        if v.dim != self.dim:
            raise ValueError("direction dimension mismatch")
        p = _softmax(self.logits(theta, batch.x))
        V = v.view("W0")
        vb = v.view("b0")
        u = batch.x @ V.T + vb
        w = p * u - p * (p * u).sum(axis=1, keepdims=True)
        hW = w.T @ batch.x / batch.n
        hb = w.sum(axis=0) / batch.n
        flat = np.concatenate([hW.ravel(), hb])
        if self.l2 > 0:
            flat = flat + self.l2 * v.data
        return ParamVector(flat, self.manifest)


def make_logreg(d_in: int, n_classes: int, l2: float = 0.0) -> LogisticOracle:
    return LogisticOracle(d_in, n_classes, l2)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected softmax classifier."""

    d_in: int
    hidden: tuple[int, ...]
    n_classes: int
    activation: str = "tanh"
    l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.d_in < 1:
            raise ValueError("d_in must be >= 1")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.d_in, *self.hidden, self.n_classes)


class MlpOracle(LogitModel):
    """Fully-connected softmax classifier with backprop gradients.

    The HVP is a forward difference of gradients (one extra gradient per
    product); relative step ``delta_fd`` defaults to 1e-4 and is scaled by
    (1 + ||theta||).
    """

    def __init__(self, spec: MlpSpec, delta_fd: float = 1e-4):
        self.spec = spec
        self.n_classes = spec.n_classes
        self.l2 = float(spec.l2)
        self.manifest = mlp_manifest(spec.widths)
        self.dim = sum(seg.size for seg in self.manifest)
        self.delta_fd = delta_fd
        self.n_layers = len(spec.widths) - 1

    def with_head(self, n_classes: int) -> "MlpOracle":
        return MlpOracle(replace(self.spec, n_classes=n_classes), self.delta_fd)

    def init_theta(self, rng: SeededRng) -> ParamVector:
        """Seeded init: W ~ N(0, 1/sqrt(fan_in)), biases zero."""
        parts = []
        for layer in range(self.n_layers):
            W_seg = next(s for s in self.manifest if s.name == f"W{layer}")
            d_out, d_in = W_seg.shape
            parts.append(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_out, d_in)).ravel())
            parts.append(np.zeros(d_out))
        return ParamVector(np.concatenate(parts), self.manifest)

    def _act(self, z: np.ndarray) -> np.ndarray:
        if self.spec.activation == "tanh":
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def _act_deriv(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.spec.activation == "tanh":
            return 1.0 - a * a
        # subgradient 0 at exactly 0
        return (z > 0.0).astype(np.float64)

    def _forward(self, theta: ParamVector, x: np.ndarray):
        acts = [x]
        pre = []
        a = x
        for layer in range(self.n_layers):
            z = a @ theta.view(f"W{layer}").T + theta.view(f"b{layer}")
            pre.append(z)
            if layer < self.n_layers - 1:
                a = self._act(z)
                acts.append(a)
        return acts, pre

    def logits(self, theta, x):
        _, pre = self._forward(theta, x)
        return pre[-1]

    def representations(self, theta: ParamVector, x: np.ndarray, layer: int) -> np.ndarray:
        """Input activations feeding weight block W{layer} (layer 0 sees x)."""
        if not 0 <= layer < self.n_layers:
            raise ValueError(f"layer {layer} out of range")
        acts, _ = self._forward(theta, x)
        return acts[layer]

    def grad_from_output_error(self, theta, x, dlogits, include_l2=False):
        acts, pre = self._forward(theta, x)
        grads: dict[str, np.ndarray] = {}
        G = dlogits
        for layer in range(self.n_layers - 1, -1, -1):
            grads[f"W{layer}"] = G.T @ acts[layer]
            grads[f"b{layer}"] = G.sum(axis=0)
            if layer > 0:
                G = (G @ theta.view(f"W{layer}")) * self._act_deriv(
                    pre[layer - 1], acts[layer]
                )
        flat = np.concatenate([grads[seg.name].ravel() for seg in self.manifest])
        if include_l2 and self.l2 > 0:
            flat = flat + self.l2 * theta.data
        return ParamVector(flat, self.manifest)

    def hvp(self, theta, v, batch=None, base_grad=None):
        self._require_dim(theta)
        return fd_hvp(
            lambda th: self.grad(th, batch), theta, v, self.delta_fd, base_grad
        )


def make_mlp(spec: MlpSpec, rng: SeededRng) -> MlpOracle:
    """Initialized MLP oracle; the seeded parameters are attached as theta0."""
    oracle = MlpOracle(spec)
    oracle.theta0 = oracle.init_theta(rng)
    return oracle
