"""Class-incremental task streams and the CL methods the optimizers plug into.

Methods: naive fine-tuning, replay, distillation, weight alignment, and a
gradient-projection variant. Swapping the optimizer never touches the data
path: every method trains through the same stepper interface.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .numcore import ParamVector, SeededRng, Segment, axpy, norm2
from .objective import (
    Batch,
    LogitModel,
    MlpOracle,
    MlpSpec,
    ObjectiveOracle,
    _softmax,
    fd_hvp,
)
from .optim import (
    DivergenceError,
    OptimConfig,
    ProxyState,
    StepStats,
    Stepper,
    _cflat_combined,
    _require_finite,
    cflat_perturbation,
    cflat_step,
    cflatpp_step,
    hybrid_step_plan,
    proxy_value,
    sam_perturb,
    sam_step,
    sgd_step,
    train_epochs,
)

__all__ = [
    "SyntheticSpec",
    "Dataset",
    "Task",
    "TaskStream",
    "MemoryBuffer",
    "GpmState",
    "CLConfig",
    "SeedResult",
    "ExperimentResult",
    "synth_dataset",
    "load_csv_dataset",
    "split_dataset",
    "make_stream",
    "buffer_update",
    "buffer_contents",
    "combine_batches",
    "replay_loss",
    "replay_grad",
    "replay_hvp",
    "DistillObjective",
    "icarl_loss",
    "wa_align",
    "scale_new_logits",
    "grow_head",
    "gpm_extract_basis",
    "gpm_update_basis",
    "gpm_project",
    "gpm_cflat_step",
    "GpmStepper",
    "run_cl_experiment",
    "METHOD_NAMES",
]

METHOD_NAMES = ("finetune", "replay", "icarl", "wa", "gpm")

# Stream ids: dataset-level draws key off the dataset/permutation seed,
# run-level draws key off the run seed. Fixed so reruns are identical.
_STREAM_PERM = 1
_STREAM_MEANS = 2
_STREAM_NOISE = 3
_STREAM_ORDER = 4
_STREAM_LABEL_NOISE = 5
_STREAM_SPLIT = 6
_STREAM_INIT = 10
_STREAM_BASELINE = 11
_STREAM_GROW = 12
_STREAM_SHUFFLE = 13
_STREAM_BUFFER = 14


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-cluster classification data: one cluster per class.

    feature_scale multiplies every feature after generation; it sets the
    gradient-norm scale without changing class separability.
    """

    classes: int
    dims: int
    per_class: int
    cluster_std: float
    seed: int
    label_noise: float = 0.0
    feature_scale: float = 1.0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.dims < 1 or self.per_class < 1:
            raise ValueError("dims and per_class must be positive")
        if self.cluster_std < 0:
            raise ValueError("cluster_std must be nonnegative")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if self.feature_scale <= 0:
            raise ValueError("feature_scale must be positive")


@dataclass(frozen=True)
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int

    @property
    def d_in(self) -> int:
        return self.train_x.shape[1]


def synth_dataset(spec: SyntheticSpec) -> Dataset:
    """Per-class means drawn once from the seed; 80/20 stratified split.

    Optional label noise flips a fraction of *training* labels to a uniformly
    random other class; test labels stay clean.
    """
    means = SeededRng(spec.seed, _STREAM_MEANS).normal(0.0, 1.0, (spec.classes, spec.dims))
    noise_rng = SeededRng(spec.seed, _STREAM_NOISE)
    n_train = max(1, int(round(0.8 * spec.per_class)))
    train_parts, test_parts = [], []
    for c in range(spec.classes):
        pts = means[c] + spec.cluster_std * noise_rng.normal(0.0, 1.0, (spec.per_class, spec.dims))
        train_parts.append((pts[:n_train], np.full(n_train, c, dtype=np.int64)))
        test_parts.append((pts[n_train:], np.full(spec.per_class - n_train, c, dtype=np.int64)))
    train_x = np.concatenate([p[0] for p in train_parts])
    train_y = np.concatenate([p[1] for p in train_parts])
    test_x = np.concatenate([p[0] for p in test_parts])
    test_y = np.concatenate([p[1] for p in test_parts])

    if spec.label_noise > 0:
        flip_rng = SeededRng(spec.seed, _STREAM_LABEL_NOISE)
        k = int(round(spec.label_noise * len(train_y)))
        if k > 0:
            idx = flip_rng.choice(len(train_y), k)
            shift = flip_rng.integers(1, spec.classes, k)
            train_y = train_y.copy()
            train_y[idx] = (train_y[idx] + shift) % spec.classes

    order = SeededRng(spec.seed, _STREAM_ORDER).permutation(len(train_y))
    return Dataset(
        spec.feature_scale * train_x[order], train_y[order],
        spec.feature_scale * test_x, test_y, spec.classes,
    )


def load_csv_dataset(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Load a CSV with an integer label in the first column, features after.

    A header row is skipped if its first cell does not parse as a number.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path} is empty")
    start = 0
    try:
        float(lines[0].split(",")[0])
    except ValueError:
        start = 1
    rows = [ln.split(",") for ln in lines[start:]]
    y = np.array([int(float(r[0])) for r in rows], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    if (y < 0).any():
        raise ValueError("labels must be nonnegative")
    return x, y


def split_dataset(x: np.ndarray, y: np.ndarray, test_fraction: float, seed: int) -> Dataset:
    """Stratified train/test split; classes must be labeled 0..C-1."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    classes = np.unique(y)
    n_classes = int(classes.max()) + 1
    if not np.array_equal(classes, np.arange(n_classes)):
        raise ValueError("labels must cover 0..C-1 contiguously")
    rng = SeededRng(seed, _STREAM_SPLIT)
    train_idx, test_idx = [], []
    for c in classes:
        rows = np.flatnonzero(y == c)
        rows = rows[rng.permutation(len(rows))]
        n_test = max(1, int(round(test_fraction * len(rows))))
        test_idx.extend(rows[:n_test])
        train_idx.extend(rows[n_test:])
    train_idx = np.array(sorted(train_idx))
    test_idx = np.array(sorted(test_idx))
    order = rng.permutation(len(train_idx))
    train_idx = train_idx[order]
    return Dataset(x[train_idx], y[train_idx], x[test_idx], y[test_idx], n_classes)


@dataclass(frozen=True)
class Task:
    """One incremental phase; labels are remapped to global head indices."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_ids: tuple[int, ...]

    @property
    def n_new(self) -> int:
        return len(self.class_ids)


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    protocol: str
    increment: int
    perm_seed: int
    class_order: tuple[int, ...]


def make_stream(dataset: Dataset, protocol: str, y: int, perm_seed: int = 1993) -> TaskStream:
    """Split classes into incremental tasks after a seeded permutation.

    "B0" divides all classes into tasks of y; "B50" gives the first task half
    of the classes (rounded up) and divides the rest into tasks of y.
    """
    if y < 1:
        raise ValueError("increment must be >= 1")
    C = dataset.n_classes
    perm = SeededRng(perm_seed, _STREAM_PERM).permutation(C)
    if protocol == "B0":
        if C % y != 0:
            raise ValueError(
                f"cannot divide {C} classes into tasks of {y}: remainder {C % y}"
            )
        groups = [perm[k : k + y] for k in range(0, C, y)]
    elif protocol == "B50":
        first = (C + 1) // 2
        rest = C - first
        if rest % y != 0:
            raise ValueError(
                f"cannot divide the remaining {rest} classes into tasks of {y}: "
                f"remainder {rest % y}"
            )
        groups = [perm[:first]] + [perm[first + k : first + k + y] for k in range(0, rest, y)]
    else:
        raise ValueError(f"unknown protocol {protocol!r}; expected B0 or B50")

    order = np.concatenate(groups)
    remap = np.full(C, -1, dtype=np.int64)
    for new_id, orig in enumerate(order):
        remap[orig] = new_id

    tasks = []
    for group in groups:
        tr_mask = np.isin(dataset.train_y, group)
        te_mask = np.isin(dataset.test_y, group)
        tasks.append(
            Task(
                train_x=dataset.train_x[tr_mask],
                train_y=remap[dataset.train_y[tr_mask]],
                test_x=dataset.test_x[te_mask],
                test_y=remap[dataset.test_y[te_mask]],
                class_ids=tuple(int(c) for c in group),
            )
        )
    return TaskStream(
        tasks=tuple(tasks),
        protocol=protocol,
        increment=y,
        perm_seed=perm_seed,
        class_order=tuple(int(c) for c in order),
    )


@dataclass(frozen=True)
class MemoryBuffer:
    """Per-class exemplar store; classes only enter after their task finished."""

    capacity_per_class: int
    store: tuple[tuple[int, np.ndarray], ...] = ()

    def __post_init__(self):
        if self.capacity_per_class < 0:
            raise ValueError("capacity must be nonnegative")

    @property
    def is_empty(self) -> bool:
        return len(self.store) == 0

    def counts(self) -> dict[int, int]:
        return {c: len(rows) for c, rows in self.store}


def buffer_update(buf: MemoryBuffer, x: np.ndarray, y: np.ndarray, rng: SeededRng) -> MemoryBuffer:
    """Store up to capacity uniformly-sampled exemplars per new class."""
    existing = dict(buf.store)
    for c in sorted(int(v) for v in np.unique(y)):
        if c in existing:  # existing exemplars are retained untouched
            continue
        rows = x[y == c]
        k = min(buf.capacity_per_class, len(rows))
        if k == 0:
            continue
        sel = rng.choice(len(rows), k) if k < len(rows) else np.arange(len(rows))
        existing[c] = rows[sel].copy()
    return MemoryBuffer(buf.capacity_per_class, tuple(sorted(existing.items())))


def buffer_contents(buf: MemoryBuffer) -> tuple[np.ndarray, np.ndarray] | None:
    if buf.is_empty:
        return None
    xs = np.concatenate([rows for _, rows in buf.store])
    ys = np.concatenate([np.full(len(rows), c, dtype=np.int64) for c, rows in buf.store])
    return xs, ys


def combine_batches(new_batch: Batch, memory_batch: Batch | None) -> Batch:
    if memory_batch is None:
        return new_batch
    return Batch(
        np.concatenate([new_batch.x, memory_batch.x]),
        np.concatenate([new_batch.y, memory_batch.y]),
    )


def replay_loss(oracle, theta, new_batch: Batch, memory_batch: Batch | None) -> float:
    """Mean loss over the union of new and memory examples."""
    return oracle.loss(theta, combine_batches(new_batch, memory_batch))


def replay_grad(oracle, theta, new_batch: Batch, memory_batch: Batch | None) -> ParamVector:
    return oracle.grad(theta, combine_batches(new_batch, memory_batch))


def replay_hvp(oracle, theta, v, new_batch: Batch, memory_batch: Batch | None) -> ParamVector:
    return oracle.hvp(theta, v, combine_batches(new_batch, memory_batch))


class DistillObjective(ObjectiveOracle):
    """Cross-entropy on the full head plus temperature-softened KL to the
    previous model's distribution, restricted to old classes. Both terms
    carry coefficient 1."""

    def __init__(self, oracle: LogitModel, theta_old: ParamVector, temperature: float = 2.0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        n_old = theta_old.manifest[-1].shape[0]
        if n_old > oracle.n_classes:
            raise ValueError("old head is wider than the current head")
        self.base = oracle
        self.dim = oracle.dim
        self.n_old = n_old
        self.old_oracle = oracle.with_head(n_old)
        self.theta_old = theta_old
        self.temperature = float(temperature)

    def _old_probs(self, x: np.ndarray) -> np.ndarray:
        z_old = self.old_oracle.logits(self.theta_old, x)
        return _softmax(z_old / self.temperature)

    def loss(self, theta, batch=None) -> float:
        ce = self.base.loss(theta, batch)
        p = self._old_probs(batch.x)
        q = _softmax(self.base.logits(theta, batch.x)[:, : self.n_old] / self.temperature)
        kl = float(np.mean((p * (np.log(p) - np.log(q))).sum(axis=1)))
        return ce + kl

    def grad(self, theta, batch=None) -> ParamVector:
        z = self.base.logits(theta, batch.x)
        G = _softmax(z)
        G[np.arange(batch.n), batch.y] -= 1.0
        G /= batch.n
        p = self._old_probs(batch.x)
        q = _softmax(z[:, : self.n_old] / self.temperature)
        G[:, : self.n_old] += (q - p) / (self.temperature * batch.n)
        return self.base.grad_from_output_error(theta, batch.x, G, include_l2=True)

    def hvp(self, theta, v, batch=None, base_grad=None) -> ParamVector:
        delta_fd = getattr(self.base, "delta_fd", 1e-4)
        return fd_hvp(lambda th: self.grad(th, batch), theta, v, delta_fd, base_grad)


def icarl_loss(oracle: LogitModel, theta: ParamVector, theta_old: ParamVector | None,
               batch: Batch, temperature: float = 2.0) -> float:
    """Combined CE + distillation loss; plain CE when there is no old model."""
    if theta_old is None:
        return oracle.loss(theta, batch)
    return DistillObjective(oracle, theta_old, temperature).loss(theta, batch)


def wa_align(w_old: np.ndarray, w_new: np.ndarray) -> float:
    """Ratio of mean old-class to mean new-class head weight-row norms."""
    if len(w_old) == 0 or len(w_new) == 0:
        raise ValueError("both class groups must be nonempty")
    mean_old = float(np.mean(np.linalg.norm(w_old, axis=1)))
    mean_new = float(np.mean(np.linalg.norm(w_new, axis=1)))
    if mean_new == 0:
        raise ValueError("new-class weights have zero mean norm")
    return mean_old / mean_new


def scale_new_logits(logits: np.ndarray, n_old: int, gamma: float) -> np.ndarray:
    out = logits.copy()
    out[:, n_old:] *= gamma
    return out


def grow_head(theta: ParamVector, new_classes: int, rng: SeededRng) -> ParamVector:
    """Widen the final (W, b) pair by new_classes rows.

    Old weights are preserved bit-exactly; new weight rows are seeded with the
    init scale 1/sqrt(fan_in) and new biases are zero.
    """
    if new_classes < 1:
        raise ValueError("must grow by at least one class")
    if len(theta.manifest) < 2:
        raise ValueError("manifest does not end with a head (W, b) pair")
    w_seg, b_seg = theta.manifest[-2], theta.manifest[-1]
    if len(w_seg.shape) != 2 or len(b_seg.shape) != 1 or w_seg.shape[0] != b_seg.shape[0]:
        raise ValueError("manifest does not end with a head (W, b) pair")
    W = theta.view(w_seg.name)
    b = theta.view(b_seg.name)
    n_out, fan_in = W.shape
    new_rows = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (new_classes, fan_in))
    front = theta.data[: w_seg.offset]
    data = np.concatenate([front, W.ravel(), new_rows.ravel(), b, np.zeros(new_classes)])
    grown_w = Segment(w_seg.name, w_seg.offset, (n_out + new_classes, fan_in))
    grown_b = Segment(b_seg.name, w_seg.offset + grown_w.size, (n_out + new_classes,))
    return ParamVector(data, theta.manifest[:-2] + (grown_w, grown_b))


@dataclass(frozen=True)
class GpmState:
    """Orthonormal basis of past-task representation space with significances."""

    basis: np.ndarray          # (d_repr, r), orthonormal columns
    significance: np.ndarray   # (r,), entries in [0, 1]
    energy_threshold: float
    layer: int

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def _energy_rank(singulars: np.ndarray, captured: float, total: float, threshold: float) -> int:
    """Smallest number of new directions whose energy reaches the threshold."""
    target = threshold * total * (1.0 - 1e-12)
    if captured >= target:
        return 0
    cum = captured + np.cumsum(singulars**2)
    return int(np.searchsorted(cum, target) + 1)


def gpm_extract_basis(oracle: MlpOracle, theta: ParamVector, sample_batch: Batch,
                      energy_threshold: float, layer: int | None = None) -> GpmState:
    """SVD basis of the designated layer's input representations.

    Keeps the smallest rank whose squared singular values reach the energy
    threshold; significances start at 1.
    """
    if not 0.0 < energy_threshold <= 1.0:
        raise ValueError("energy_threshold must lie in (0, 1]")
    if layer is None:
        layer = oracle.n_layers - 1
    R = oracle.representations(theta, sample_batch.x, layer).T
    if not np.linalg.norm(R) > 0:
        raise ValueError("rank-0 representation matrix")
    U, s, _ = np.linalg.svd(R, full_matrices=False)
    keep = s > 1e-12 * s[0]
    U, s = U[:, keep], s[keep]
    r = _energy_rank(s, 0.0, float((s**2).sum()), energy_threshold)
    r = max(1, r)
    return GpmState(
        basis=U[:, :r].copy(),
        significance=np.ones(r),
        energy_threshold=energy_threshold,
        layer=layer,
    )


def gpm_update_basis(state: GpmState, oracle: MlpOracle, theta: ParamVector,
                     sample_batch: Batch) -> GpmState:
    """Merge new-task directions: SVD of the residual outside the current span."""
    R = oracle.representations(theta, sample_batch.x, state.layer).T
    total = float(np.linalg.norm(R) ** 2)
    if total == 0:
        return state
    proj = state.basis.T @ R
    captured = float(np.linalg.norm(proj) ** 2)
    resid = R - state.basis @ proj
    U, s, _ = np.linalg.svd(resid, full_matrices=False)
    keep = s > 1e-12 * max(s[0], 1e-300)
    U, s = U[:, keep], s[keep]
    r_new = min(_energy_rank(s, captured, total, state.energy_threshold), U.shape[1])
    if r_new == 0:
        return state
    return GpmState(
        basis=np.hstack([state.basis, U[:, :r_new]]),
        significance=np.concatenate([state.significance, np.ones(r_new)]),
        energy_threshold=state.energy_threshold,
        layer=state.layer,
    )


def _project_block(basis: np.ndarray, significance: np.ndarray, layer: int,
                   grad: ParamVector) -> tuple[ParamVector, float]:
    """Apply (I - M diag(sig) M^T) to the designated W block, identity elsewhere."""
    name = f"W{layer}"
    G = grad.view(name)
    GM = G @ basis
    proj_block = G - (GM * significance) @ basis.T
    seg = grad.segment(name)
    flat = grad.data.copy()
    flat[seg.offset : seg.offset + seg.size] = proj_block.ravel()
    in_span = float(np.linalg.norm(proj_block @ basis))
    return grad.with_data(flat), in_span


def gpm_project(state: GpmState, grad: ParamVector) -> tuple[ParamVector, float]:
    """Project the designated-layer gradient block out of the stored span.

    Returns the projected gradient and the norm of the residual component
    still inside span(M) (zero up to float error when significance is 1).
    """
    return _project_block(state.basis, state.significance, state.layer, grad)


def _significance_update(oracle, theta, batch, state: GpmState, g_c: ParamVector,
                         eta1: float, eta2: float, delta: float = 1e-4) -> np.ndarray:
    """Finite-difference sensitivity of the post-step loss to each significance."""
    lam = state.significance

    def step_loss(values: np.ndarray) -> float:
        proj, _ = _project_block(state.basis, values, state.layer, g_c)
        return oracle.loss(axpy(-eta2, proj, theta), batch)

    base = step_loss(lam)
    sens = np.zeros(len(lam))
    for j in range(len(lam)):
        bumped = lam.copy()
        bumped[j] += delta
        sens[j] = (step_loss(bumped) - base) / delta
    return np.clip(lam - eta1 * sens, 0.0, 1.0)


def _gpm_apply(oracle, theta, batch, state: GpmState, eps_c: ParamVector | None,
               eta1: float, eta2: float,
               g_pre: ParamVector | None = None) -> tuple[ParamVector, GpmState, float, float, int]:
    """Shared projected update: gradient at theta + eps_c, block projection."""
    extra_evals = 0
    if eps_c is None and g_pre is not None:
        g_c = g_pre
    else:
        point = theta if eps_c is None else axpy(1.0, eps_c, theta)
        g_c = oracle.grad(point, batch)
        extra_evals = 1
    _require_finite(g_c.data, "perturbed gradient")
    if eta1 != 0.0 and state.rank > 0:
        new_sig = _significance_update(oracle, theta, batch, state, g_c, eta1, eta2)
        state = replace(state, significance=new_sig)
    proj, in_span = gpm_project(state, g_c)
    new_theta = axpy(-eta2, proj, theta)
    return new_theta, state, in_span, norm2(g_c), extra_evals


def gpm_cflat_step(oracle, theta, batch, cfg: OptimConfig, state: GpmState,
                   eta1: float, eta2: float) -> tuple[ParamVector, GpmState, StepStats]:
    """Projected flatness step: perturb along the combined direction, update
    significances by loss sensitivity, then step with the projected gradient."""
    eps_c, base_stats = cflat_perturbation(oracle, theta, batch, cfg)
    new_theta, new_state, in_span, src_norm, extra = _gpm_apply(
        oracle, theta, batch, state, eps_c, eta1, eta2
    )
    stats = replace(
        base_stats,
        grad_evals=base_stats.grad_evals + extra,
        gpm_in_span=in_span,
        gpm_src_norm=src_norm,
    )
    return new_theta, new_state, stats


class GpmStepper(Stepper):
    """Projected training steps with the perturbation chosen per optimizer.

    Until a basis exists (first task) it behaves as the plain optimizer. With
    a basis, the gradient is taken at theta + eps_c where eps_c is zero for
    sgd, the ascent perturbation for sam, and the combined-direction
    perturbation for the flatness optimizers.
    """

    name = "gpm"

    def __init__(self, optimizer: str, eta1: float, eta2: float | None,
                 proxy: ProxyState | None = None, proxy_reset_per_task: bool = True,
                 hybrid_p: float = 0.5, hybrid_ordering: str = "cflat_last"):
        self.kind = optimizer.lower().replace("cflatpp", "cflat++")
        if self.kind not in ("sgd", "sam", "cflat", "cflat++", "hybrid"):
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.eta1 = eta1
        self.eta2 = eta2
        self.gpm_state: GpmState | None = None
        self.proxy_initial = proxy if proxy is not None else ProxyState()
        self.proxy = self.proxy_initial
        self.proxy_reset_per_task = proxy_reset_per_task
        self.hybrid_p = hybrid_p
        self.hybrid_ordering = hybrid_ordering
        self.plan = np.zeros(0, dtype=bool)
        self.plan_idx = 0

    def prepare(self, total_steps: int):
        if self.kind == "hybrid":
            self.plan = hybrid_step_plan(total_steps, self.hybrid_p, self.hybrid_ordering)
            self.plan_idx = 0

    def reset_task(self):
        if self.proxy_reset_per_task:
            self.proxy = self.proxy_initial

    def _hybrid_wants_cflat(self) -> bool:
        use = bool(self.plan[self.plan_idx]) if self.plan_idx < len(self.plan) else False
        self.plan_idx += 1
        return use

    def step(self, oracle, theta, batch, cfg):
        if self.gpm_state is None:
            return self._plain_step(oracle, theta, batch, cfg)
        eta2 = self.eta2 if self.eta2 is not None else cfg.eta

        eps_c: ParamVector | None = None
        g_pre: ParamVector | None = None
        if self.kind == "cflat" or (self.kind == "hybrid" and self._hybrid_wants_cflat()):
            eps_c, base = cflat_perturbation(oracle, theta, batch, cfg)
        elif self.kind == "cflat++":
            eps_c, base, g_pre = self._gated_perturbation(oracle, theta, batch, cfg)
        elif self.kind == "sam":
            loss = oracle.loss(theta, batch)
            g = oracle.grad(theta, batch)
            _require_finite(g.data, "gradient")
            eps_c = sam_perturb(g, cfg.rho, cfg.eps_guard)
            base = StepStats(loss=loss, sq_grad_norm=norm2(g) ** 2, grad_evals=1)
        else:  # sgd, or the sgd share of hybrid
            loss = oracle.loss(theta, batch)
            g = oracle.grad(theta, batch)
            _require_finite(g.data, "gradient")
            g_pre = g
            base = StepStats(loss=loss, sq_grad_norm=norm2(g) ** 2, grad_evals=1)

        new_theta, self.gpm_state, in_span, src_norm, extra = _gpm_apply(
            oracle, theta, batch, self.gpm_state, eps_c, self.eta1, eta2, g_pre
        )
        stats = replace(
            base,
            grad_evals=base.grad_evals + extra,
            gpm_in_span=in_span,
            gpm_src_norm=src_norm,
        )
        return new_theta, stats

    def _gated_perturbation(self, oracle, theta, batch, cfg):
        """C-Flat++ gating for the projected path: same proxy/error feedback."""
        loss = oracle.loss(theta, batch)
        g = oracle.grad(theta, batch)
        _require_finite(g.data, "gradient")
        s = norm2(g) ** 2
        proxy = proxy_value(self.proxy)
        feedback = proxy - s
        self.proxy = replace(
            self.proxy, A=self.proxy.A - self.proxy.eta0 * feedback, i=self.proxy.i + 1
        )
        if feedback <= 0:
            combined, cstats = _cflat_combined(oracle, theta, batch, cfg, g, loss)
            eps_c = combined.with_data(
                cfg.rho * combined.data / (norm2(combined) + cfg.eps_guard)
            )
            return eps_c, replace(cstats, proxy_value=proxy), None
        base = StepStats(loss=loss, sq_grad_norm=s, proxy_value=proxy, grad_evals=1)
        return None, base, g

    def _plain_step(self, oracle, theta, batch, cfg):
        if self.kind == "sgd":
            return sgd_step(oracle, theta, batch, cfg)
        if self.kind == "sam":
            return sam_step(oracle, theta, batch, cfg)
        if self.kind == "cflat":
            return cflat_step(oracle, theta, batch, cfg)
        if self.kind == "cflat++":
            theta, self.proxy, stats = cflatpp_step(oracle, theta, batch, cfg, self.proxy)
            return theta, stats
        if self._hybrid_wants_cflat():
            return cflat_step(oracle, theta, batch, cfg)
        return sgd_step(oracle, theta, batch, cfg)


@dataclass(frozen=True)
class CLConfig:
    """Training knobs shared by every method/optimizer combination."""

    hidden: tuple[int, ...] = (32,)
    activation: str = "tanh"
    l2: float = 0.0
    epochs: int = 8
    batch_size: int = 32
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    memory_capacity: int = 20
    temperature: float = 2.0
    gpm_energy_threshold: float = 0.95
    gpm_eta1: float = 0.0
    gpm_eta2: float | None = None
    gpm_sample: int = 256
    hybrid_p: float = 0.5
    hybrid_ordering: str = "cflat_last"
    proxy: ProxyState = ProxyState()
    proxy_reset_per_task: bool = True


@dataclass
class SeedResult:
    seed: int
    matrix: list[list[float]]
    pre_train_acc: list
    baseline_acc: list[float]
    trace: list[StepStats]
    examples: int
    train_seconds: float
    final_theta: ParamVector
    gammas: list


@dataclass
class ExperimentResult:
    method: str
    optimizer: str
    results: list[SeedResult]
    mean_matrix: list[list[float]]


def _accuracy(oracle: LogitModel, theta: ParamVector, x: np.ndarray, y: np.ndarray,
              gamma: float | None = None, new_block_start: int | None = None) -> float:
    if len(y) == 0:
        raise ValueError("empty test split")
    z = oracle.logits(theta, x)
    if gamma is not None and new_block_start is not None:
        z = scale_new_logits(z, new_block_start, gamma)
    return float(np.mean(np.argmax(z, axis=1) == y))


def _make_stepper_for(method: str, optimizer: str, cl: CLConfig) -> Stepper:
    from .optim import make_stepper

    if method == "gpm":
        return GpmStepper(
            optimizer,
            eta1=cl.gpm_eta1,
            eta2=cl.gpm_eta2,
            proxy=cl.proxy,
            proxy_reset_per_task=cl.proxy_reset_per_task,
            hybrid_p=cl.hybrid_p,
            hybrid_ordering=cl.hybrid_ordering,
        )
    return make_stepper(
        optimizer,
        proxy=cl.proxy,
        proxy_reset_per_task=cl.proxy_reset_per_task,
        hybrid_p=cl.hybrid_p,
        hybrid_ordering=cl.hybrid_ordering,
    )


def _run_seed(stream: TaskStream, method: str, optimizer: str, cfg: OptimConfig,
              cl: CLConfig, seed: int) -> SeedResult:
    tasks = stream.tasks
    T = len(tasks)
    d_in = tasks[0].train_x.shape[1]
    total_classes = sum(t.n_new for t in tasks)
    root = SeededRng(seed)

    # untrained full-head reference for forward transfer
    ref_oracle = MlpOracle(MlpSpec(d_in, cl.hidden, total_classes, cl.activation, cl.l2))
    ref_theta = ref_oracle.init_theta(root.spawn(_STREAM_BASELINE))
    baseline_acc = [
        _accuracy(ref_oracle, ref_theta, t.test_x, t.test_y) for t in tasks
    ]

    oracle = MlpOracle(MlpSpec(d_in, cl.hidden, tasks[0].n_new, cl.activation, cl.l2))
    theta = oracle.init_theta(root.spawn(_STREAM_INIT))
    stepper = _make_stepper_for(method, optimizer, cl)

    buffer = MemoryBuffer(cl.memory_capacity)
    theta_prev: ParamVector | None = None
    matrix: list[list[float]] = []
    pre_train_acc: list = [None]
    trace: list[StepStats] = []
    gammas: list = [None] * T
    examples = 0
    train_seconds = 0.0
    n_old = 0

    for t, task in enumerate(tasks):
        if t > 0:
            theta = grow_head(theta, task.n_new, root.spawn(_STREAM_GROW, t))
            oracle = oracle.with_head(n_old + task.n_new)
            pre_train_acc.append(_accuracy(oracle, theta, task.test_x, task.test_y))
        stepper.reset_task()

        data_x, data_y = task.train_x, task.train_y
        if method in ("replay", "icarl", "wa", "gpm"):
            memory = buffer_contents(buffer)
            if memory is not None:
                data_x = np.concatenate([data_x, memory[0]])
                data_y = np.concatenate([data_y, memory[1]])

        train_oracle: ObjectiveOracle = oracle
        if method in ("icarl", "wa") and theta_prev is not None:
            train_oracle = DistillObjective(oracle, theta_prev, cl.temperature)

        start = time.perf_counter()
        try:
            theta, task_trace = train_epochs(
                train_oracle, theta, data_x, data_y, cfg, stepper,
                cl.epochs, cl.batch_size, root.spawn(_STREAM_SHUFFLE, t),
                cl.milestones, cl.lr_decay,
            )
        except DivergenceError as err:
            raise DivergenceError(
                f"divergence in task {t} at step {err.step}: {err}", err.step
            ) from err
        train_seconds += time.perf_counter() - start
        examples += len(task_trace) * cl.batch_size
        trace.extend(replace(s, task=t) for s in task_trace)

        gamma = None
        if method == "wa" and t > 0:
            W = theta.view(oracle.head_weight_name)
            gamma = wa_align(W[:n_old], W[n_old:])
            gammas[t] = gamma

        if method == "gpm":
            k = min(cl.gpm_sample, len(task.train_y))
            sample = Batch(task.train_x[:k], task.train_y[:k])
            if stepper.gpm_state is None:
                stepper.gpm_state = gpm_extract_basis(
                    oracle, theta, sample, cl.gpm_energy_threshold
                )
            else:
                stepper.gpm_state = gpm_update_basis(stepper.gpm_state, oracle, theta, sample)

        buffer = buffer_update(buffer, task.train_x, task.train_y, root.spawn(_STREAM_BUFFER, t))
        theta_prev = theta
        n_new_start = n_old
        n_old += task.n_new

        row = []
        for i in range(t + 1):
            row.append(
                _accuracy(oracle, theta, tasks[i].test_x, tasks[i].test_y,
                          gamma=gamma, new_block_start=n_new_start if gamma is not None else None)
            )
        matrix.append(row)

    return SeedResult(
        seed=seed,
        matrix=matrix,
        pre_train_acc=pre_train_acc,
        baseline_acc=baseline_acc,
        trace=trace,
        examples=examples,
        train_seconds=train_seconds,
        final_theta=theta,
        gammas=gammas,
    )


def run_cl_experiment(stream: TaskStream, method: str, optimizer: str,
                      cfg: OptimConfig, cl: CLConfig, seeds) -> ExperimentResult:
    """Run the full incremental protocol once per seed.

    After each task the model is evaluated on every seen task's test split;
    before each new task (head already grown) its test split is evaluated for
    forward transfer. Throughput counts training examples per wall second.
    """
    if method not in METHOD_NAMES:
        raise ValueError(f"unknown method {method!r}; expected one of {METHOD_NAMES}")
    results = [_run_seed(stream, method, optimizer, cfg, cl, int(s)) for s in seeds]
    T = len(stream.tasks)
    mean_matrix = [
        [float(np.mean([r.matrix[t][i] for r in results])) for i in range(t + 1)]
        for t in range(T)
    ]
    return ExperimentResult(method=method, optimizer=optimizer, results=results,
                            mean_matrix=mean_matrix)
