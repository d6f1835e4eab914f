"""Experiment orchestration: single trials, sweeps, frontier reports and gradient checks.

A trial is fully described by an :class:`ExperimentConfig`; the same config
always yields the same metrics. Sweeps expand a base config over a
cartesian grid and return records in grid order whatever the completion
order of the worker processes.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .datasets import DataConfig, MultiTaskDataset, SyntheticSpec, gen_synthetic, synthetic_inputs, synthetic_labels
from .estimator import MultiTaskNetwork, resolve_architecture
from .exceptions import ConfigurationError, DivergedError, NonFiniteError
from .model import AUX_KINDS, ArchitectureSpec, AuxTowerSpec, build_model, load_preset
from .optim import STRATEGIES, OptimizerConfig, composite_loss, task_objective, uncertainty_loss
from .pareto import Frontier, ParetoPoint, convexity_check, error_rate, hypervolume_2d, middle_point, pareto_filter, shared_reference, MIDDLE_POINT_RULE
from .tensor import Tensor, gradient_errors

STATUSES = ("ok", "diverged", "failed")
EVAL_SPLITS = ("test", "validation")
VALIDATION_SPLIT = 2  # synthetic stream index, disjoint from train (0) and test (1)


# ---------------------------------------------------------------------------
# configuration


def _strict(d: dict, allowed, what: str):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one trial depends on.

    ``architecture`` is a preset name or an architecture dict; ``aux``
    optionally replaces its self-auxiliary towers (a kind name, a dict, or
    a list with one entry per task).
    """

    dataset: DataConfig = DataConfig()
    architecture: object = "synthetic"
    aux: object = None
    strategy: str = "linear"
    gamma: float = 0.0
    weights: Optional[Tuple[float, ...]] = None
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 10
    batch_size: int = 64
    eval_split: str = "test"
    n_validation: int = 5000
    standardize_targets: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if not self.gamma >= 0:
            raise ConfigurationError(f"gamma must be non-negative, got {self.gamma}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.eval_split not in EVAL_SPLITS:
            raise ConfigurationError(f"eval_split must be one of {EVAL_SPLITS}")
        if self.eval_split == "validation" and self.dataset.kind != "synthetic":
            raise ConfigurationError("a validation split is only generated for synthetic data")
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if isinstance(self.aux, list):
            object.__setattr__(self, "aux", tuple(self.aux))
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self.spec()  # fail fast on architecture errors

    def spec(self) -> ArchitectureSpec:
        aux = list(self.aux) if isinstance(self.aux, tuple) else self.aux
        return resolve_architecture(self.architecture, aux)

    @property
    def n_tasks(self) -> int:
        return self.spec().n_tasks

    def task_weights(self) -> Tuple[float, ...]:
        n = self.n_tasks
        return self.weights if self.weights is not None else (1.0 / n,) * n

    def to_dict(self) -> dict:
        arch = self.architecture
        return {
            "dataset": self.dataset.to_dict(),
            "architecture": arch if isinstance(arch, str) else _arch_dict(arch),
            "aux": _aux_json(self.aux),
            "strategy": self.strategy,
            "gamma": self.gamma,
            "weights": list(self.weights) if self.weights is not None else None,
            "optimizer": dict(self.optimizer.__dict__),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "eval_split": self.eval_split,
            "n_validation": self.n_validation,
            "standardize_targets": self.standardize_targets,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _strict(d, cls.__dataclass_fields__, "experiment config")
        d = dict(d)
        if "dataset" in d:
            d["dataset"] = DataConfig.from_dict(d["dataset"])
        if "optimizer" in d:
            opt = d["optimizer"]
            if isinstance(opt, str):
                opt = {"name": opt}
            _strict(opt, OptimizerConfig.__dataclass_fields__, "optimizer")
            d["optimizer"] = OptimizerConfig(**opt)
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        """Digest of the canonical JSON form without the seed (the seed is its own column)."""
        d = self.to_dict()
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _arch_dict(arch):
    return arch.to_dict() if isinstance(arch, ArchitectureSpec) else arch


def _aux_json(aux):
    if aux is None or isinstance(aux, (str, dict)):
        return aux
    if isinstance(aux, AuxTowerSpec):
        return dict(aux.__dict__)
    return [_aux_json(a) for a in aux]


# ---------------------------------------------------------------------------
# run records


@dataclass(frozen=True)
class RunRecord:
    config_hash: str
    seed: int
    strategy: str
    gamma: float
    weights: Tuple[float, ...]
    train_loss: Tuple[float, ...]
    test_metric: Tuple[float, ...]
    status: str = "ok"
    wall_ms: Optional[int] = field(default=None, compare=False)
    message: str = field(default="", compare=False)

    @property
    def n_tasks(self) -> int:
        return len(self.weights)

    def run_id(self) -> str:
        return f"{self.config_hash}-s{self.seed}"

    def as_row(self, timing: bool = True) -> List[str]:
        wall = "" if (not timing or self.wall_ms is None) else str(self.wall_ms)
        return (
            [self.config_hash, str(self.seed), self.strategy, _fmt(self.gamma)]
            + [_fmt(w) for w in self.weights]
            + [_fmt(v) for v in self.train_loss]
            + [_fmt(v) for v in self.test_metric]
            + [self.status, wall]
        )


def _fmt(x: float) -> str:
    return repr(float(x))  # shortest round-tripping form; nan and inf parse back with float()


def csv_header(n_tasks: int) -> List[str]:
    return (
        ["config_hash", "seed", "strategy", "gamma"]
        + [f"w{t + 1}" for t in range(n_tasks)]
        + [f"train_loss_{t + 1}" for t in range(n_tasks)]
        + [f"test_metric_{t + 1}" for t in range(n_tasks)]
        + ["status", "wall_ms"]
    )


def emit_csv(records: Sequence[RunRecord], path=None, timing: bool = True) -> str:
    """RunRecord CSV text (also written to ``path`` when given).

    With ``timing=False`` the wall_ms column is left empty, which makes the
    output a pure function of the configs.
    """
    if not records:
        raise ValueError("no records to write")
    n = records[0].n_tasks
    if any(r.n_tasks != n for r in records):
        raise ValueError("records with different task counts cannot share a CSV")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(n))
    for r in records:
        w.writerow(r.as_row(timing))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_csv(text_or_path) -> List[RunRecord]:
    text = text_or_path
    if isinstance(text_or_path, Path) or (isinstance(text_or_path, str) and "\n" not in text_or_path):
        text = Path(text_or_path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty records CSV")
    header = rows[0]
    n = (len(header) - 6) // 3
    if n < 1 or header != csv_header(n):
        raise ValueError(f"unexpected records header: {','.join(header)}")
    out = []
    for row in rows[1:]:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, expected {len(header)}")
        vals = row[4 : 4 + 3 * n]
        out.append(
            RunRecord(
                config_hash=row[0],
                seed=int(row[1]),
                strategy=row[2],
                gamma=float(row[3]),
                weights=tuple(float(v) for v in vals[:n]),
                train_loss=tuple(float(v) for v in vals[n : 2 * n]),
                test_metric=tuple(float(v) for v in vals[2 * n :]),
                status=row[-2],
                wall_ms=int(row[-1]) if row[-1] else None,
            )
        )
    return out


# ---------------------------------------------------------------------------
# trials


@functools.lru_cache(maxsize=4)
def _materialize(dataset: DataConfig, base_dir: Optional[str]):
    return dataset.materialize(base_dir)


@functools.lru_cache(maxsize=4)
def _validation_set(spec: SyntheticSpec, n: int) -> MultiTaskDataset:
    X, E = synthetic_inputs(spec, VALIDATION_SPLIT, 0, n)
    return MultiTaskDataset(X, synthetic_labels(X, E, spec.noise, spec.label_form), ("regression", "regression"))


def load_data(config: ExperimentConfig, base_dir=None) -> Tuple[MultiTaskDataset, MultiTaskDataset]:
    """Training set and the evaluation set selected by ``eval_split``."""
    train, test = _materialize(config.dataset, None if base_dir is None else str(base_dir))
    if config.eval_split == "validation":
        return train, _validation_set(config.dataset.synthetic, config.n_validation)
    return train, test


def _estimator(config: ExperimentConfig, spec: ArchitectureSpec, strategy: str, weights) -> MultiTaskNetwork:
    return MultiTaskNetwork(
        architecture=spec,
        strategy=strategy,
        task_weights=weights,
        gamma=config.gamma,
        optimizer=config.optimizer.name,
        learning_rate=config.optimizer.lr,
        epochs=config.epochs,
        batch_size=config.batch_size,
        standardize_targets=config.standardize_targets,
        random_state=int(config.seed),
    )


def fit_trial(config: ExperimentConfig, base_dir=None) -> List[MultiTaskNetwork]:
    """Train the estimator(s) of a trial: one per task for ``single_task``, else one.

    Raises :class:`DivergedError` if training blows up.
    """
    spec = config.spec()
    train, _ = load_data(config, base_dir)
    if train.n_tasks != spec.n_tasks:
        raise ConfigurationError(f"dataset has {train.n_tasks} tasks, architecture {spec.n_tasks}")
    if config.strategy == "single_task":
        fitted = []
        for t in range(spec.n_tasks):
            est = _estimator(config, spec.select_tasks([t]), "single_task", None)
            fitted.append(est.fit(train.inputs, [train.labels[t]]))
        return fitted
    est = _estimator(config, spec, config.strategy, config.weights)
    return [est.fit(train.inputs, list(train.labels))]


def _collect(config, estimators, train, evaluation):
    train_loss, metric = [], []
    if config.strategy == "single_task":
        for t, est in enumerate(estimators):
            train_loss += est.train_losses_
            metric += est.task_metrics(evaluation.inputs, [evaluation.labels[t]])
    else:
        train_loss = estimators[0].train_losses_
        metric = estimators[0].task_metrics(evaluation.inputs, list(evaluation.labels))
    return tuple(float(v) for v in train_loss), tuple(float(v) for v in metric)


def run_trial(config: ExperimentConfig, base_dir=None, return_estimators: bool = False):
    """Train and evaluate one config; failures are reported in the record, not raised.

    Evaluation uses the main heads only. A diverged trial keeps the last
    finite per-task training losses and NaN test metrics.
    """
    start = time.perf_counter()
    n = config.n_tasks
    base = dict(
        config_hash=config.config_hash(),
        seed=int(config.seed),
        strategy=config.strategy,
        gamma=float(config.gamma),
        weights=config.task_weights(),
    )
    estimators = []
    try:
        train, evaluation = load_data(config, base_dir)
        estimators = fit_trial(config, base_dir)
        train_loss, metric = _collect(config, estimators, train, evaluation)
        status, message = "ok", ""
    except (DivergedError, NonFiniteError) as exc:
        last = list(getattr(exc, "last_losses", None) or [])
        train_loss = tuple(float(v) for v in (last + [math.nan] * n)[:n])
        metric = (math.nan,) * n
        status, message = "diverged", str(exc)
    except (ConfigurationError, ValueError, OSError) as exc:
        train_loss = metric = (math.nan,) * n
        status, message = "failed", f"{type(exc).__name__}: {exc}"
    wall = int(round((time.perf_counter() - start) * 1000))
    record = RunRecord(train_loss=train_loss, test_metric=metric, status=status, wall_ms=wall, message=message, **base)
    return (record, estimators) if return_estimators else record


# ---------------------------------------------------------------------------
# sweeps


def simplex_grid(n_tasks: int, size: int) -> List[Tuple[float, ...]]:
    """Interior lattice points of the weight simplex.

    Two tasks give ``size`` points ``w1 = i / (size + 1)``; with more tasks,
    every composition of ``size + 1`` into positive parts, in lexicographic
    order.
    """
    if n_tasks < 1 or size < 1:
        raise ConfigurationError("simplex grid needs n_tasks >= 1 and size >= 1")
    if n_tasks == 1:
        return [(1.0,)]
    m = size + 1
    points = []
    for cuts in itertools.combinations(range(1, m), n_tasks - 1):
        parts = np.diff((0,) + cuts + (m,))
        points.append(tuple(float(p) / m for p in parts))
    return points


@dataclass(frozen=True)
class SweepSpec:
    """Cartesian grid over a base config.

    Order: architecture, aux, strategy, learning rate, gamma, weights, seed
    (seed varies fastest). Empty axes fall back to the base config's value;
    ``weight_grid`` of 0 keeps the base weights.
    """

    base: ExperimentConfig = ExperimentConfig()
    weight_grid: int = 9
    gammas: Tuple[float, ...] = ()
    seeds: Tuple[int, ...] = ()
    architectures: Tuple[object, ...] = ()
    aux: Tuple[object, ...] = ()
    strategies: Tuple[str, ...] = ()
    learning_rates: Tuple[float, ...] = ()
    parallelism: int = 1

    def __post_init__(self):
        for name in ("gammas", "seeds", "architectures", "aux", "strategies", "learning_rates"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.parallelism < 1 or self.weight_grid < 0:
            raise ConfigurationError("parallelism must be >= 1 and weight_grid >= 0")

    def cells(self) -> List[ExperimentConfig]:
        b = self.base
        archs = self.architectures or (b.architecture,)
        auxes = self.aux or (b.aux,)
        strategies = self.strategies or (b.strategy,)
        lrs = self.learning_rates or (b.optimizer.lr,)
        gammas = self.gammas or (b.gamma,)
        seeds = self.seeds or (b.seed,)
        out = []
        for arch, aux, strat, lr, gamma in itertools.product(archs, auxes, strategies, lrs, gammas):
            head = replace(b, architecture=arch, aux=aux, strategy=strat, optimizer=replace(b.optimizer, lr=lr), gamma=gamma)
            grid = simplex_grid(head.n_tasks, self.weight_grid) if self.weight_grid else [b.weights]
            for w, seed in itertools.product(grid, seeds):
                out.append(replace(head, weights=w, seed=seed))
        return out

    def size(self) -> int:
        return len(self.cells())

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        _strict(d, cls.__dataclass_fields__, "sweep")
        d = dict(d)
        d["base"] = ExperimentConfig.from_dict(d.get("base", {}))
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SweepSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _run_cell(args):
    config, base_dir = args
    return run_trial(config, base_dir)


def run_sweep(spec: SweepSpec, base_dir=None, parallelism: Optional[int] = None, on_record=None) -> List[RunRecord]:
    """Run every cell; up to ``parallelism`` trials at once in worker processes.

    Records come back in cell order. ``on_record(i, record)`` is called as
    results arrive (in order).
    """
    cells = spec.cells()
    workers = parallelism or spec.parallelism
    jobs = [(c, None if base_dir is None else str(base_dir)) for c in cells]
    records = []
    if workers <= 1:
        results = map(_run_cell, jobs)
        for i, rec in enumerate(results):
            records.append(rec)
            if on_record:
                on_record(i, rec)
        return records
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        for i, rec in enumerate(pool.map(_run_cell, jobs)):
            records.append(rec)
            if on_record:
                on_record(i, rec)
    return records


# ---------------------------------------------------------------------------
# reports


class EmptyReportError(ValueError):
    """No usable rows for a frontier report."""


@dataclass
class FrontierReport:
    frontier: Frontier
    hypervolume: float
    reference: Tuple[float, ...]
    convex: bool
    violations: list
    middle_point: ParetoPoint
    n_rows: int
    n_ok: int
    metrics: Tuple[str, str]

    def summary(self) -> dict:
        return {
            "metrics": list(self.metrics),
            "rows": self.n_rows,
            "ok_rows": self.n_ok,
            "frontier_size": len(self.frontier),
            "hypervolume": self.hypervolume,
            "reference": list(self.reference),
            "convex": self.convex,
            "convexity_violations": [list(v) for v in self.violations],
            "middle_point": {"objectives": list(self.middle_point.objectives), "run_id": self.middle_point.run_id},
            "middle_point_rule": MIDDLE_POINT_RULE,
        }


def _column(record: RunRecord, name: str) -> float:
    prefix, _, idx = name.rpartition("_")
    if prefix in ("test_metric", "train_loss") and idx.isdigit():
        values = record.test_metric if prefix == "test_metric" else record.train_loss
        return values[int(idx) - 1]
    raise ConfigurationError(f"unknown metric column {name!r}")


def record_points(records: Sequence[RunRecord], metrics=("test_metric_1", "test_metric_2"), accuracy_columns=()) -> List[ParetoPoint]:
    """Objective points of the ok rows, with accuracy columns converted to error rates."""
    points = []
    for r in records:
        if r.status != "ok":
            continue
        values = []
        for m in metrics:
            v = _column(r, m)
            values.append(float(error_rate(v)) if m in accuracy_columns else v)
        points.append(ParetoPoint(tuple(values), f"{r.run_id()}-w{'/'.join(f'{w:g}' for w in r.weights)}"))
    return points


def report_frontier(
    records: Sequence[RunRecord],
    metrics=("test_metric_1", "test_metric_2"),
    ref=None,
    accuracy_columns=(),
    convexity_tol: float = 1e-6,
) -> FrontierReport:
    """Frontier of the ok rows plus its hypervolume, convexity verdict and middle point.

    ``ref`` defaults to the componentwise max of the rows' objectives x 1.1;
    pass a shared reference to compare several reports.
    """
    metrics = tuple(metrics)
    if len(metrics) != 2:
        raise ConfigurationError("frontier reports use exactly two metric columns")
    points = record_points(records, metrics, accuracy_columns)
    if not points:
        raise EmptyReportError("no ok rows to build a frontier from")
    front = pareto_filter(points)
    reference = shared_reference(points) if ref is None else np.asarray(ref, dtype=np.float64)
    hv = hypervolume_2d(front, reference)
    convex = convexity_check(front, convexity_tol)
    return FrontierReport(
        frontier=front,
        hypervolume=hv,
        reference=tuple(float(v) for v in reference),
        convex=convex.convex,
        violations=convex.violations,
        middle_point=middle_point(front),
        n_rows=len(records),
        n_ok=len(points),
        metrics=metrics,
    )


# ---------------------------------------------------------------------------
# gradient checks

GRADCHECK_LOSSES = ("linear", "composite", "uncertainty")
GRADCHECK_THRESHOLD = 1e-4


class GradcheckRow(NamedTuple):
    preset: str
    aux: str
    loss: str
    max_error: float
    checked: int
    skipped: int

    @property
    def ok(self) -> bool:
        return self.max_error < GRADCHECK_THRESHOLD


def _aux_for(kind: str, spec: ArchitectureSpec) -> AuxTowerSpec:
    classification = any(h.kind == "classification" for h in spec.heads)
    tau = 2.0 if classification else 1.0
    if kind == "avgpool":
        m = spec.shared_dim
        pool = next((p for p in range(2, m + 1) if m % p == 0), 1)
        return AuxTowerSpec("avgpool", pool=pool, temperature=tau)
    if kind == "bottleneck":
        return AuxTowerSpec("bottleneck", bottleneck=4, temperature=tau)
    return AuxTowerSpec(kind, temperature=tau)


def _random_batch(spec: ArchitectureSpec, n: int, rng):
    X = rng.uniform(0, 1, size=(n, spec.input_dim))
    targets = []
    for head in spec.heads:
        if head.kind == "classification":
            targets.append(rng.integers(head.dim, size=n))
        else:
            targets.append(rng.normal(size=(n, head.dim)))
    return X, targets


def gradcheck_cell(spec: ArchitectureSpec, loss: str, seed: int = 0, batch: int = 8, h: float = 1e-5, max_entries=8):
    """Max relative gradient error of one architecture under one training loss."""
    rng = np.random.default_rng([seed, 3])
    model = build_model(spec, seed)
    X, targets = _random_batch(spec, batch, rng)
    weights = tuple(rng.dirichlet(np.ones(spec.n_tasks)))
    gamma = 0.5
    params = dict(model.params)
    if loss == "uncertainty":
        params["uncertainty.log_var"] = rng.normal(scale=0.5, size=spec.n_tasks)

    def fn(p):
        losses = model.task_losses(X, targets, p, with_aux=loss != "linear")
        if loss == "linear":
            return composite_loss(losses.main, None, weights)
        if loss == "composite":
            return composite_loss(losses.main, losses.aux, weights, gamma)
        if loss == "uncertainty":
            objectives = [task_objective(m, a, gamma) for m, a in losses.pairs()]
            return uncertainty_loss(objectives, p["uncertainty.log_var"])
        raise ConfigurationError(f"unknown gradcheck loss {loss!r}")

    skipped: Dict[str, int] = {}
    errs = gradient_errors(fn, params, h=h, max_entries=max_entries, rng=np.random.default_rng([seed, 4]), skipped=skipped)
    cap = max_entries if max_entries is not None else math.inf
    n_checked = sum(int(min(v.size - skipped[k], cap)) for k, v in params.items())
    return max(errs.values()), n_checked, sum(skipped.values())


def cmd_gradcheck(
    presets: Optional[Sequence[str]] = None,
    aux_kinds: Sequence[str] = AUX_KINDS,
    losses: Sequence[str] = GRADCHECK_LOSSES,
    seed: int = 0,
    batch: int = 8,
    h: float = 1e-5,
    max_entries: Optional[int] = 8,
) -> List[GradcheckRow]:
    """One row per (preset, aux kind, loss) cell."""
    from .model import preset_names

    rows = []
    for name in presets or preset_names():
        base = load_preset(name)
        for kind in aux_kinds:
            spec = base.with_aux(_aux_for(kind, base))
            for loss in losses:
                err, checked, skipped = gradcheck_cell(spec, loss, seed, batch, h, max_entries)
                rows.append(GradcheckRow(name, kind, loss, float(err), checked, skipped))
    return rows
