"""scikit-learn style wrapper around model building and training."""

from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ConfigurationError, DivergedError, NonFiniteError
from .model import ArchitectureSpec, MultiTaskModel, build_model, load_preset
from .optim import OptimizerConfig, StrategyConfig, init_state, train_step
from .validation import check_inputs, check_seed, check_targets, check_task_weights

EVAL_CHUNK = 1000


def resolve_architecture(architecture, aux=None) -> ArchitectureSpec:
    """Accept a spec, its dict form or a preset name; optionally swap the aux towers."""
    if isinstance(architecture, str):
        spec = load_preset(architecture)
    elif isinstance(architecture, dict):
        spec = ArchitectureSpec.from_dict(architecture)
    elif isinstance(architecture, ArchitectureSpec):
        spec = architecture
    else:
        raise ConfigurationError(f"cannot build an architecture from {type(architecture).__name__}")
    return spec if aux is None else spec.with_aux(aux)


class MultiTaskNetwork(BaseEstimator):
    """Shared-bottom multi-task network trained with one of the strategies in :mod:`selfaux.optim`.

    ``fit(X, Y)`` takes ``Y`` as an (n, T) array or a list of T label vectors.
    Regression targets are standardised per task for training when
    ``standardize_targets`` is set; predictions and reported losses are in
    the original units. Batches are drawn without replacement each epoch
    from a generator seeded by ``random_state``.

    After fitting: ``model_``, ``history_`` (mean main loss per task per
    epoch), ``train_losses_`` (main loss per task on the full training set).
    If training diverges, :class:`DivergedError` propagates and
    ``diverged_`` is set.
    """

    def __init__(
        self,
        architecture="synthetic",
        aux=None,
        strategy: str = "linear",
        task_weights=None,
        gamma: float = 0.0,
        optimizer: str = "sgd",
        learning_rate: float = 0.01,
        epochs: int = 10,
        batch_size: int = 64,
        standardize_targets: bool = True,
        random_state: Optional[int] = 0,
    ):
        self.architecture = architecture
        self.aux = aux
        self.strategy = strategy
        self.task_weights = task_weights
        self.gamma = gamma
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.standardize_targets = standardize_targets
        self.random_state = random_state

    def _strategy(self, n_tasks) -> StrategyConfig:
        return StrategyConfig(
            kind=self.strategy,
            gamma=float(self.gamma),
            weights=check_task_weights(self.task_weights, n_tasks),
            optimizer=OptimizerConfig(name=self.optimizer, lr=float(self.learning_rate)),
        )

    def _n_classes(self, spec):
        return [h.dim if h.kind == "classification" else None for h in spec.heads]

    def fit(self, X, Y):
        spec = resolve_architecture(self.architecture, self.aux)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError(f"need epochs >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        seed = check_seed(self.random_state)
        strategy = self._strategy(spec.n_tasks)
        X = check_inputs(X, spec.input_dim)
        kinds = [h.kind for h in spec.heads]
        ys = check_targets(Y, len(X), kinds, self._n_classes(spec))

        self.y_mean_ = np.zeros(spec.n_tasks)
        self.y_scale_ = np.ones(spec.n_tasks)
        if self.standardize_targets:
            for t, (y, kind) in enumerate(zip(ys, kinds)):
                if kind == "regression":
                    self.y_mean_[t] = y.mean()
                    self.y_scale_[t] = y.std() or 1.0
        targets = self._encode(ys, kinds)

        self.spec_ = spec
        self.model_ = build_model(spec, seed)
        self.state_ = init_state(strategy, spec.n_tasks, seed)
        self.history_: List[List[float]] = []
        self.diverged_ = False
        rng = np.random.default_rng([seed, 1])
        n = len(X)
        try:
            for _ in range(self.epochs):
                order = rng.permutation(n)
                sums = np.zeros(spec.n_tasks)
                for start in range(0, n, self.batch_size):
                    idx = order[start : start + self.batch_size]
                    rec = train_step(self.model_, X[idx], [y[idx] for y in targets], strategy, self.state_)
                    sums += np.asarray(rec.main_losses) * len(idx)
                self.history_.append(list(self._to_original(sums / n)))
            self.train_losses_ = self._main_losses(X, targets)
        except (DivergedError, NonFiniteError) as exc:
            # finite but huge weights can still overflow on the full training set
            self.diverged_ = True
            last = self.state_.last_losses
            last = None if last is None else list(self._to_original(last))
            raise DivergedError(str(exc), last) from exc
        return self

    def _encode(self, ys, kinds):
        out = []
        for t, (y, kind) in enumerate(zip(ys, kinds)):
            if kind == "regression":
                out.append(((y - self.y_mean_[t]) / self.y_scale_[t]).reshape(-1, 1))
            else:
                out.append(y)
        return out

    def _to_original(self, losses):
        # regression MSE scales with the square of the target scale
        losses = np.asarray(losses, dtype=np.float64).copy()
        for t, head in enumerate(self.spec_.heads):
            if head.kind == "regression":
                losses[t] *= self.y_scale_[t] ** 2
        return losses

    def _main_losses(self, X, targets):
        totals = np.zeros(self.spec_.n_tasks)
        for start in range(0, len(X), EVAL_CHUNK):
            sl = slice(start, start + EVAL_CHUNK)
            out = self.model_.forward(X[sl], with_aux=False)
            for t in range(self.spec_.n_tasks):
                totals[t] += float(self.model_.head_loss(out.main[t], targets[t][sl], t)) * len(X[sl])
        return list(self._to_original(totals / len(X)))

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise AttributeError(f"{type(self).__name__} is not fitted yet; call fit first")

    def decision_function(self, X) -> List[np.ndarray]:
        """Raw main-head outputs per task (regression in original units, logits otherwise)."""
        self._check_fitted()
        X = check_inputs(X, self.spec_.input_dim)
        chunks = [self.model_.predict(X[s : s + EVAL_CHUNK]) for s in range(0, len(X), EVAL_CHUNK)]
        outs = [np.vstack([c[t] for c in chunks]) for t in range(self.spec_.n_tasks)]
        for t, head in enumerate(self.spec_.heads):
            if head.kind == "regression":
                outs[t] = outs[t] * self.y_scale_[t] + self.y_mean_[t]
        return outs

    def predict(self, X) -> np.ndarray:
        """(n, T) predictions: regression values or predicted class indices.

        Regression heads with more than one output are not representable
        here; use :meth:`decision_function` for those.
        """
        outs = self.decision_function(X)
        cols = []
        for out, head in zip(outs, self.spec_.heads):
            if head.kind == "classification":
                cols.append(np.argmax(out, axis=1).astype(np.float64))
            elif out.shape[1] == 1:
                cols.append(out[:, 0])
            else:
                raise ValueError("predict supports scalar regression heads only")
        return np.stack(cols, axis=1)

    def task_metrics(self, X, Y) -> List[float]:
        """Per-task test metric: MSE for regression, error rate for classification."""
        self._check_fitted()
        kinds = [h.kind for h in self.spec_.heads]
        ys = check_targets(Y, len(X), kinds, self._n_classes(self.spec_))
        outs = self.decision_function(X)
        metrics = []
        for out, y, kind in zip(outs, ys, kinds):
            if kind == "regression":
                metrics.append(float(np.mean((out - y.reshape(-1, 1)) ** 2)))
            else:
                metrics.append(float(np.mean(np.argmax(out, axis=1) != y)))
        return metrics

    def score(self, X, Y) -> float:
        """Negative mean task metric (higher is better)."""
        return -float(np.mean(self.task_metrics(X, Y)))
