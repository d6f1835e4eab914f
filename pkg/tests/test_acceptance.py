"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import dataclasses
import itertools
import time

import numpy as np
import pytest

from conftest import MNIST_FILES
from selfaux.datasets import DataConfig, SyntheticSpec
from selfaux.harness import (
    GRADCHECK_THRESHOLD,
    ExperimentConfig,
    SweepSpec,
    cmd_gradcheck,
    emit_csv,
    fit_trial,
    load_data,
    run_sweep,
    run_trial,
    simplex_grid,
)
from selfaux.model import AuxTowerSpec, build_model, load_preset, mlp_spec
from selfaux.optim import OptimizerConfig, min_norm_2task_closed_form, min_norm_point, pcgrad
from selfaux.pareto import (
    ParetoPoint,
    convexity_check,
    hypervolume_2d,
    interpolation_frontier,
    non_dominated_mask,
    pareto_filter,
    shared_reference,
)


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return emit


def all_pairs_mask(Y):
    le = (Y[:, None, :] <= Y[None, :, :]).all(axis=2)
    lt = (Y[:, None, :] < Y[None, :, :]).any(axis=2)
    return ~(le & lt).any(axis=0)


# 1 ------------------------------------------------------------------------------


def test_01_gradient_fidelity(verdict):
    start = time.process_time()
    rows = cmd_gradcheck()
    cpu = time.process_time() - start
    cells = {(r.preset, r.aux, r.loss) for r in rows}
    worst = max(rows, key=lambda r: r.max_error)
    ok = (
        len(cells) == len(rows) == 4 * 5 * 3
        and all(r.max_error < GRADCHECK_THRESHOLD for r in rows)
        and cpu < 120
    )
    detail = f"{len(rows)} cells, worst {worst.max_error:.2e} ({worst.preset}/{worst.aux}/{worst.loss}), {cpu:.1f}s CPU"
    verdict(1, "gradient fidelity < 1e-4, < 2 min", ok, detail)


# 2 ------------------------------------------------------------------------------


def _certificate(G, comb):
    return float(np.min(G @ comb) - comb @ comb)


def test_02_min_norm_solver(verdict):
    rng = np.random.default_rng(0)
    worst_alpha, worst_cert = 0.0, np.inf
    for _ in range(10_000):
        G = rng.normal(size=(2, 32))
        alpha, comb = min_norm_point(G)
        worst_alpha = max(worst_alpha, abs(alpha[0] - min_norm_2task_closed_form(G[0], G[1])))
        worst_cert = min(worst_cert, _certificate(G, comb))

    step = 1e-3
    a1, a2 = np.meshgrid(np.arange(0, 1 + step / 2, step), np.arange(0, 1 + step / 2, step), indexing="ij")
    mask = a1 + a2 <= 1 + 1e-12
    grid = np.stack([a1[mask], a2[mask], np.clip(1 - a1[mask] - a2[mask], 0, None)], axis=1)
    worst_gap = 0.0
    for _ in range(200):
        G = rng.normal(size=(3, 32))
        alpha, comb = min_norm_point(G)
        K = G @ G.T
        grid_best = np.min(np.einsum("ij,jk,ik->i", grid, K, grid))
        worst_gap = max(worst_gap, abs(comb @ comb - grid_best))
        worst_cert = min(worst_cert, _certificate(G, comb))
    ok = worst_alpha < 1e-6 and worst_gap < 1e-4 and worst_cert >= -1e-6
    detail = f"2-task max |Δα| {worst_alpha:.1e}; 3-task max |obj - grid| {worst_gap:.1e}; min certificate {worst_cert:.1e}"
    verdict(2, "min-norm solver", ok, detail)


# 3 ------------------------------------------------------------------------------


def test_03_pcgrad(verdict):
    rng = np.random.default_rng(0)
    out = pcgrad(np.array([[1.0, 0.0], [-1.0, 1.0]]), rng)
    example = np.max(np.abs(out[0] - [0.5, 0.5]))
    worst_orth, unchanged = 0.0, True
    for _ in range(1000):
        g = rng.normal(size=(2, 8))
        if g[0] @ g[1] >= 0:
            g[1] = -g[1]
        p = pcgrad(g, rng)
        worst_orth = max(worst_orth, abs(p[0] @ g[1]), abs(p[1] @ g[0]))
        base = rng.normal(size=8)
        agree = np.abs(rng.normal(size=(3, 8))) * np.sign(base)  # same orthant, pairwise non-negative
        unchanged &= np.array_equal(pcgrad(agree, rng), agree)
    ok = example < 1e-12 and worst_orth < 1e-9 and unchanged
    verdict(3, "PCGrad", ok, f"worked example err {example:.1e}; max |g_i'·g_j| {worst_orth:.1e}; non-conflicting unchanged {unchanged}")


# 4 ------------------------------------------------------------------------------


def test_04_pareto_filter(verdict):
    rng = np.random.default_rng(0)
    mismatches = idem = mono = 0
    for _ in range(1000):
        Y = rng.random((100, 2))
        if rng.random() < 0.3:
            Y = np.round(Y * 8) / 8
        if not np.array_equal(non_dominated_mask(Y), all_pairs_mask(Y)):
            mismatches += 1
        front = pareto_filter(Y)
        if pareto_filter(front) != front:
            idem += 1
        p = front.objectives[rng.integers(len(front))]
        worse = pareto_filter(np.vstack([Y, p + [0.0, 0.01]]))
        better = pareto_filter(np.vstack([Y, p - [0.01, 0.0]]))
        if worse.objectives.tolist() != front.objectives.tolist() or len(better) > len(front) or p.tolist() in better.objectives.tolist():
            mono += 1
    ok = mismatches == idem == mono == 0
    verdict(4, "Pareto filter vs all-pairs oracle", ok, f"1000 clouds: {mismatches} mismatches, {idem} idempotence and {mono} monotonicity failures")


# 5 ------------------------------------------------------------------------------


def test_05_interpolation_identity(verdict):
    rng = np.random.default_rng(0)
    lam = np.linspace(0, 1, 101)
    worst = 0.0
    for _ in range(100):
        Y1, Y2 = rng.normal(size=50), rng.normal(size=50)
        L = interpolation_frontier(Y1, Y2, lam)
        worst = max(worst, np.max(np.abs(np.sqrt(L).sum(axis=1) - np.linalg.norm(Y1 - Y2))))
    verdict(5, "interpolation identity", worst < 1e-9, f"max residual {worst:.1e}")


# 6 ------------------------------------------------------------------------------


def test_06_convex_quadratic_frontier(verdict):
    rng = np.random.default_rng(0)
    c1, c2 = rng.normal(size=5), rng.normal(size=5)
    points = []
    for w in np.linspace(0, 1, 201):
        # minimise w|t - c1|^2 + (1 - w)|t - c2|^2 by gradient descent
        theta = np.zeros(5)
        for _ in range(200):
            theta -= 0.25 * (2 * w * (theta - c1) + 2 * (1 - w) * (theta - c2))
        points.append((np.sum((theta - c1) ** 2), np.sum((theta - c2) ** 2)))
    result = convexity_check(points, 1e-6)
    verdict(6, "convex toy frontier", result.convex, f"{len(pareto_filter(points))} frontier points, {len(result.violations)} violations")


# 7 ------------------------------------------------------------------------------

TREND_SEEDS = (0, 1, 2, 3, 4)
TREND_GAMMAS = (0.1, 0.3, 1.0)


def _trend_points(config):
    """Fit once, score on test and on the validation stream."""
    est = fit_trial(config)[0]
    _, test = load_data(config)
    _, val = load_data(dataclasses.replace(config, eval_split="validation"))
    score = lambda ds: tuple(est.task_metrics(ds.inputs, list(ds.labels)))  # noqa: E731
    return score(test), score(val)


@pytest.mark.slow
def test_07_synthetic_trend(verdict):
    start = time.process_time()
    base = ExperimentConfig(
        dataset=DataConfig(synthetic=SyntheticSpec(input_dim=200, n_train=20_000, n_test=10_000)),
        architecture="synthetic",
        optimizer=OptimizerConfig("sgd", 0.01),
        epochs=4,
        batch_size=64,
        n_validation=5000,
    )
    variants = {0.0: dataclasses.replace(base, aux=None, gamma=0.0)}
    for g in TREND_GAMMAS:
        variants[g] = dataclasses.replace(base, aux="fc", gamma=g)
    test_pts = {}
    val_pts = {}
    for (g, cfg), seed in itertools.product(variants.items(), TREND_SEEDS):
        for w in simplex_grid(2, 9):
            t, v = _trend_points(dataclasses.replace(cfg, weights=w, seed=seed))
            test_pts.setdefault((g, seed), []).append(ParetoPoint(t))
            val_pts.setdefault((g, seed), []).append(ParetoPoint(v))

    wins, parts = 0, []
    for seed in TREND_SEEDS:
        vref = shared_reference(*[val_pts[(g, seed)] for g in variants])
        best = max(TREND_GAMMAS, key=lambda g: hypervolume_2d(pareto_filter(val_pts[(g, seed)]), vref))
        ref = shared_reference(test_pts[(0.0, seed)], test_pts[(best, seed)])
        hv_base = hypervolume_2d(pareto_filter(test_pts[(0.0, seed)]), ref)
        hv_aux = hypervolume_2d(pareto_filter(test_pts[(best, seed)]), ref)
        wins += hv_aux > hv_base
        parts.append(f"s{seed}: γ*={best} {hv_aux:.1f} vs {hv_base:.1f}")
    cpu = time.process_time() - start
    detail = f"self-aux wins {wins}/5 ({'; '.join(parts)}); {cpu / 60:.1f} min CPU"
    verdict(7, "synthetic trend HV(self-aux) > HV(baseline) in >= 4/5 seeds", wins >= 4, detail)


# 8 ------------------------------------------------------------------------------


def test_08_multimnist_smoke(verdict, mnist_dir):
    start = time.process_time()
    data = DataConfig(kind="multimnist", n_train=2000, n_test=1000, **MNIST_FILES)
    base = ExperimentConfig(
        dataset=data,
        architecture="small",
        optimizer=OptimizerConfig("adam", 0.002),
        epochs=5,
        batch_size=16,
    )
    plain = run_trial(base, mnist_dir)
    aux_cfg = dataclasses.replace(base, aux="fc", gamma=0.3)
    est = fit_trial(aux_cfg, mnist_dir)[0]
    _, test = load_data(aux_cfg, mnist_dir)
    before = est.task_metrics(test.inputs, list(test.labels))
    for group in est.model_.partition.aux:
        for name in group:
            est.model_.params[name][...] = 0.0
    after = est.task_metrics(test.inputs, list(test.labels))
    cpu = time.process_time() - start
    ok = plain.status == "ok" and max(plain.test_metric) < 0.30 and before == after and cpu < 600
    detail = (
        f"linear errors {plain.test_metric[0]:.3f}/{plain.test_metric[1]:.3f}; "
        f"γ=0.3 errors {before[0]:.3f}/{before[1]:.3f}, unchanged with aux zeroed: {before == after}; {cpu:.0f}s CPU"
    )
    verdict(8, "MultiMNIST smoke", ok, detail)


# 9 ------------------------------------------------------------------------------


def test_09_parameter_counts(verdict):
    bad = []
    for M, C, b in itertools.product((64, 128), (10, 100), (4, 8)):
        spec = mlp_spec(12, (20, M), (8,), n_tasks=1, head="classification", head_dim=C)
        fc = build_model(spec.with_aux("fc"))
        bott = build_model(spec.with_aux(AuxTowerSpec("bottleneck", bottleneck=b)))
        n_fc = fc.count_params(fc.partition.aux[0])
        n_b = bott.count_params(bott.partition.aux[0])
        if n_fc != (M + 1) * C or n_b != (M + 1) * b + (b + 1) * C or n_b > (2 * b + 2) * max(C, M):
            bad.append((M, C, b))
    verdict(9, "aux parameter counts", not bad, f"8 (M, C, b) cells, mismatches {bad}")


# 10 -----------------------------------------------------------------------------


def test_10_determinism(verdict):
    data = DataConfig(synthetic=SyntheticSpec(input_dim=20, n_train=256, n_test=128, seed=3))
    base = ExperimentConfig(
        dataset=data,
        architecture=mlp_spec(20, (16,), (8,), n_tasks=2).to_dict(),
        strategy="pcgrad",
        aux="fc",
        gamma=0.3,
        epochs=2,
        batch_size=32,
        seed=12345678901234567890,
    )
    a, b = run_trial(base), run_trial(base)
    same_trial = emit_csv([a], timing=False) == emit_csv([b], timing=False) and a == b
    spec = SweepSpec(base, weight_grid=3, strategies=("linear", "mgda_ub"), seeds=(0, 1))
    one = emit_csv(run_sweep(spec, parallelism=1), timing=False)
    eight = emit_csv(run_sweep(spec, parallelism=8), timing=False)
    ok = same_trial and one == eight
    verdict(10, "determinism", ok, f"trial rerun identical {same_trial}; {spec.size()}-cell sweep CSV identical at parallelism 1 and 8: {one == eight}")
