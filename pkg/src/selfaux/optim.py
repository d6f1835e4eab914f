"""Training strategies for shared-bottom multi-task models.

Self-auxiliary losses are folded into each task's loss (``main + gamma * aux``)
before any strategy-specific logic, so every strategy accepts them:

* ``linear``       weighted sum of task losses, one backward pass
* ``single_task``  linear with a single task (the harness trains one model per task)
* ``uncertainty``  learned log-variance weighting
* ``mgda_ub``      min-norm combination of per-task gradients taken at the shared representation
* ``pcgrad``       projection of conflicting per-task gradients over the shared parameters
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigurationError, DivergedError, NonFiniteError
from .tensor import Tape, Tensor, add, backward, exp, index, mul, scale

STRATEGIES = ("single_task", "linear", "uncertainty", "mgda_ub", "pcgrad")
UNCERTAINTY_PARAM = "uncertainty.log_var"


# ---------------------------------------------------------------------------
# scalarisations


def composite_loss(main, aux, weights, gamma: float = 0.0) -> Tensor:
    """``sum_t w_t * (main_t + gamma * aux_t)``.

    ``aux`` may be ``None`` or contain ``None`` entries; missing auxiliary
    losses contribute nothing, as if gamma were 0 for that task.
    """
    if gamma < 0:
        raise ConfigurationError(f"gamma must be non-negative, got {gamma}")
    if len(weights) != len(main) or (aux is not None and len(aux) != len(main)):
        raise ConfigurationError(f"{len(main)} task losses but {len(weights)} weights")
    aux = aux if aux is not None else [None] * len(main)
    out = None
    for w, m, a in zip(weights, main, aux):
        term = task_objective(m, a, gamma)
        term = scale(term, w)
        out = term if out is None else add(out, term)
    return out


def task_objective(main, aux=None, gamma: float = 0.0) -> Tensor:
    """One task's training loss: main loss plus gamma-weighted self-auxiliary loss."""
    main = main if isinstance(main, Tensor) else Tensor(main)
    if aux is None or gamma == 0:
        return main
    aux = aux if isinstance(aux, Tensor) else Tensor(aux)
    return add(main, scale(aux, gamma))


def uncertainty_loss(losses, log_var) -> Tensor:
    """``sum_t 0.5 * exp(-s_t) * L_t + 0.5 * s_t`` with ``s_t = log sigma_t^2``."""
    log_var = log_var if isinstance(log_var, Tensor) else Tensor(log_var)
    if log_var.shape != (len(losses),):
        raise ConfigurationError(f"{len(losses)} losses but log-variance of shape {log_var.shape}")
    out = None
    for t, loss in enumerate(losses):
        s = index(log_var, t)
        loss = loss if isinstance(loss, Tensor) else Tensor(loss)
        term = scale(add(mul(exp(scale(s, -1.0)), loss), s), 0.5)
        out = term if out is None else add(out, term)
    return out


# ---------------------------------------------------------------------------
# gradient combination


def min_norm_2task_closed_form(g1, g2) -> float:
    """Weight on ``g1`` minimising ``|a g1 + (1 - a) g2|^2`` over ``a`` in [0, 1]."""
    g1, g2 = np.asarray(g1, dtype=np.float64), np.asarray(g2, dtype=np.float64)
    diff = g1 - g2
    denom = diff @ diff
    if denom == 0:
        return 0.5
    return float(np.clip(((g2 - g1) @ g2) / denom, 0.0, 1.0))


def _pair_weight(g11, g12, g22):
    # closed form above, in Gram-matrix terms
    denom = g11 - 2 * g12 + g22
    if denom <= 0:
        return 0.5
    return min(max((g22 - g12) / denom, 0.0), 1.0)


def min_norm_point(grads, max_iter: int = 250, tol: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
    """Simplex weights minimising the norm of the combined gradient.

    ``grads`` is a (T, d) array. Two tasks use the closed form directly.
    More tasks use Wolfe's active-set method: keep an affinely independent
    support ("corral"), add the vertex with the smallest inner product
    against the current combination ``v``, re-solve exactly on the support's
    affine hull and, when that leaves the simplex, walk back to its boundary
    and drop the vertices that reached zero. This is exact up to roundoff,
    including for duplicated or linearly dependent gradients.
    Stops when ``|v|^2 - min_t g_t.v <= tol * max_t |g_t|^2`` or after
    ``max_iter`` major steps.

    Returns ``(alpha, alpha @ grads)``.
    """
    G = np.asarray(grads, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("min_norm_point needs a non-empty (T, d) gradient array")
    n = G.shape[0]
    if n == 1:
        return np.ones(1), G[0].copy()
    gram = G @ G.T
    if n == 2:
        a = _pair_weight(gram[0, 0], gram[0, 1], gram[1, 1])
        alpha = np.array([a, 1.0 - a])
        return alpha, alpha @ G

    scale = float(np.max(np.diag(gram)))
    if not scale > 0:
        alpha = np.full(n, 1.0 / n)
        return alpha, alpha @ G
    gram = gram / scale  # alpha is scale-free
    Gn = G / np.sqrt(scale)
    diag = np.diag(gram)
    threshold = tol
    first = int(np.argmin(diag))
    support = [first]
    lam = np.array([1.0])
    for _ in range(max_iter):
        alpha = np.zeros(n)
        alpha[support] = lam
        proj = gram @ alpha  # g_t . v
        j = int(np.argmin(proj))
        if alpha @ proj - proj[j] <= threshold or j in support:
            break
        support.append(j)
        lam = np.append(lam, 0.0)
        stalled = False
        for _ in range(n + 1):  # minor cycles: each drops at least one vertex
            mu = _affine_min(Gn[support])
            if mu is None:
                # numerically dependent support; keep the previous corral
                support.pop()
                lam = lam[:-1]
                stalled = True
                break
            if np.all(mu > 0):
                lam = mu
                break
            neg = mu <= 0
            theta = np.min(lam[neg] / (lam[neg] - mu[neg]))
            lam = lam + theta * (mu - lam)
            keep = lam > 1e-15
            keep[np.argmax(lam)] = True
            support = [s for s, k in zip(support, keep) if k]
            lam = lam[keep] / lam[keep].sum()
        else:
            break
        if stalled:
            break
    alpha = np.zeros(n)
    alpha[support] = lam
    # pairwise Frank-Wolfe polish: mops up what the corral solve leaves behind
    # when gradients are nearly dependent
    for _ in range(max_iter * n):
        proj = gram @ alpha
        j = int(np.argmin(proj))
        active = np.flatnonzero(alpha > 0)
        a = int(active[np.argmax(proj[active])])
        if alpha @ proj - proj[j] <= threshold or a == j:
            break
        curv = gram[j, j] - 2.0 * gram[j, a] + gram[a, a]
        step = alpha[a] if curv <= 0 else min(alpha[a], (proj[a] - proj[j]) / curv)
        if not step > 0:
            break
        alpha[j] += step
        alpha[a] -= step
        if alpha[a] <= 1e-15:
            alpha[a] = 0.0
    alpha = np.clip(alpha, 0.0, None)
    alpha /= alpha.sum()
    return alpha, alpha @ G


def _affine_min(pts):
    """Weights (summing to one) of the min-norm point on the affine hull of ``pts``, or None."""
    # least squares on the edge vectors rather than the Gram/KKT system, which
    # would square the conditioning of nearly dependent supports
    base = pts[0]
    edges = pts[1:] - base
    c = np.linalg.lstsq(edges.T, -base, rcond=None)[0]
    mu = np.concatenate([[1.0 - c.sum()], c])
    if not np.isfinite(mu).all():
        return None
    return mu


def pcgrad(grads, rng: np.random.Generator) -> np.ndarray:
    """Project away conflicting components between task gradients.

    For each task the other tasks are visited in a random order; whenever the
    running gradient has a negative inner product with another task's
    original gradient, that component is removed. Zero gradients are
    skipped. Returns the (T, d) projected gradients; the update is their sum.
    """
    G = np.asarray(grads, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] < 2:
        raise ValueError("pcgrad needs gradients for at least two tasks")
    out = G.copy()
    norms = np.einsum("ij,ij->i", G, G)
    for i in range(G.shape[0]):
        others = [j for j in range(G.shape[0]) if j != i]
        for j in rng.permutation(others):
            dot = out[i] @ G[j]
            if dot < 0 and norms[j] > 0:
                out[i] = out[i] - (dot / norms[j]) * G[j]
    return out


# ---------------------------------------------------------------------------
# parameter updates


class SGD:
    def __init__(self, lr: float = 0.01):
        if not lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.lr = lr

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        for name, g in grads.items():
            params[name] -= self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def build(self):
        if self.name == "sgd":
            return SGD(self.lr)
        if self.name == "adam":
            return Adam(self.lr, self.beta1, self.beta2, self.eps)
        raise ConfigurationError(f"unknown optimizer {self.name!r}")


@dataclass(frozen=True)
class StrategyConfig:
    """How per-task losses become a parameter update.

    ``weights`` are the linear-scalarisation weights (also used to scale the
    per-task losses under ``pcgrad``); ``None`` means uniform.
    """

    kind: str = "linear"
    gamma: float = 0.0
    weights: Optional[Tuple[float, ...]] = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not self.gamma >= 0:
            raise ConfigurationError(f"gamma must be non-negative, got {self.gamma}")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if any(not np.isfinite(x) or x < 0 for x in w):
                raise ConfigurationError(f"task weights must be finite and non-negative, got {w}")
            object.__setattr__(self, "weights", w)

    def task_weights(self, n_tasks: int) -> Tuple[float, ...]:
        if self.weights is None:
            return (1.0 / n_tasks,) * n_tasks
        if len(self.weights) != n_tasks:
            raise ConfigurationError(f"{len(self.weights)} task weights for {n_tasks} tasks")
        return self.weights


@dataclass
class TrainState:
    """Per-trial mutable state carried between steps."""

    optimizer: object
    rng: np.random.Generator
    extra_params: Dict[str, np.ndarray] = field(default_factory=dict)
    last_losses: Optional[List[float]] = None
    steps: int = 0


def init_state(strategy: StrategyConfig, n_tasks: int, seed: int) -> TrainState:
    state = TrainState(strategy.optimizer.build(), np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 2]))
    if strategy.kind == "uncertainty":
        state.extra_params[UNCERTAINTY_PARAM] = np.zeros(n_tasks)
    return state


@dataclass
class StepRecord:
    main_losses: List[float]
    aux_losses: List[Optional[float]]
    loss: float
    alpha: Optional[np.ndarray] = None
    projections: int = 0


def _task_losses(model, X, targets, params, gamma):
    losses = model.task_losses(X, targets, params, with_aux=gamma > 0)
    objectives = [task_objective(m, a, gamma) for m, a in losses.pairs()]
    return losses, objectives


def train_step(model, X, targets, strategy: StrategyConfig, state: TrainState) -> StepRecord:
    """One update of ``model.params`` (and strategy parameters) on a batch.

    Raises :class:`DivergedError` when a loss, gradient or updated parameter
    is not finite; parameters are left untouched in that case.
    """
    try:
        record, grads = _compute_update(model, X, targets, strategy, state)
        all_params = {**model.params, **state.extra_params}
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
        trial = {k: all_params[k].copy() for k in grads}
        with np.errstate(over="ignore", invalid="ignore"):  # checked just below
            state.optimizer.step(trial, grads)
        for name, value in trial.items():
            if not np.isfinite(value).all():
                raise NonFiniteError(f"non-finite value for {name} after update")
    except NonFiniteError as exc:
        raise DivergedError(f"training diverged at step {state.steps}: {exc}", state.last_losses) from exc
    for name, value in trial.items():
        target = model.params if name in model.params else state.extra_params
        target[name][...] = value
    state.last_losses = record.main_losses
    state.steps += 1
    return record


def _compute_update(model, X, targets, strategy, state):
    kind = strategy.kind
    n_tasks = model.spec.n_tasks
    if kind == "mgda_ub":
        return _mgda_ub_update(model, X, targets, strategy)

    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in model.params.items()}
    for k, v in state.extra_params.items():
        leaves[k] = tape.leaf(v, k)
    losses, objectives = _task_losses(model, X, targets, leaves, strategy.gamma)

    if kind in ("linear", "single_task"):
        if kind == "single_task" and n_tasks != 1:
            raise ConfigurationError("single_task strategy trains one task per model")
        total = composite_loss(objectives, None, strategy.task_weights(n_tasks))
        grads = backward(total)
        return _record(losses, total), grads

    if kind == "uncertainty":
        total = uncertainty_loss(objectives, leaves[UNCERTAINTY_PARAM])
        return _record(losses, total), backward(total)

    if kind == "pcgrad":
        weights = strategy.task_weights(n_tasks)
        shared = model.partition.shared
        per_task = [backward(scale(obj, w)) for obj, w in zip(objectives, weights)]
        flat = np.stack([np.concatenate([g[n].ravel() for n in shared]) for g in per_task])
        projected = pcgrad(flat, state.rng)
        changed = int(np.sum(np.any(projected != flat, axis=1)))
        combined = projected.sum(axis=0)
        grads = {}
        offset = 0
        for n in shared:
            size = model.params[n].size
            grads[n] = combined[offset : offset + size].reshape(model.params[n].shape)
            offset += size
        # task-specific parameters only receive their own task's gradient
        for t, g in enumerate(per_task):
            for n in model.partition.main[t] + model.partition.aux[t]:
                grads[n] = g[n]
        total = composite_loss(objectives, None, weights)
        return _record(losses, total, projections=changed), grads

    raise ConfigurationError(f"unknown strategy {kind!r}")


def _mgda_ub_update(model, X, targets, strategy):
    """Per-task gradients at the shared representation, min-norm combined, chained into the shared layers."""
    part = model.partition
    shared_tape = Tape()
    shared_leaves = {n: shared_tape.leaf(model.params[n], n) for n in part.shared}
    h = model.shared(X, shared_leaves)

    grads, h_grads, mains, auxes, objs = {}, [], [], [], []
    for t in range(model.spec.n_tasks):
        tape = Tape()
        h_leaf = tape.leaf(h.data, "h")
        leaves = {n: tape.leaf(model.params[n], n) for n in part.main[t] + part.aux[t]}
        main = model.head_loss(model.tower(h_leaf, t, params=leaves), targets[t], t)
        aux = None
        if strategy.gamma > 0 and model.spec.aux[t].kind != "none":
            aux = model.head_loss(model.tower(h_leaf, t, aux=True, params=leaves), targets[t], t, aux=True)
        obj = task_objective(main, aux, strategy.gamma)
        g = backward(obj)
        h_grads.append(g.pop("h"))
        grads.update(g)
        mains.append(float(main))
        auxes.append(None if aux is None else float(aux))
        objs.append(float(obj))

    alpha, _ = min_norm_point(np.stack([g.ravel() for g in h_grads]))
    upstream = sum(a * g for a, g in zip(alpha, h_grads))
    grads.update(backward(h, seed=upstream))
    # parameters of aux towers skipped at gamma == 0 keep a zero gradient
    for n in model.params:
        grads.setdefault(n, np.zeros_like(model.params[n]))
    return StepRecord(mains, auxes, float(np.dot(alpha, objs)), alpha=alpha), grads


def _record(losses, total, projections=0):
    return StepRecord(losses.main_values(), losses.aux_values(), float(total), projections=projections)
