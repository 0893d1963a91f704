"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible with
``pytest -v``) and then asserts the criterion at its stated tolerance.
"""
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mbsfl.algorithms import run_fedavg, run_minibatch_sgd
from mbsfl.analysis import (BoundInputs, check_divergence_lemma, check_trajectory_vs_bound, check_variance_lemma,
                            prop1_bound, prop2_bound, rate_fit, theorem1_bound)
from mbsfl.checks import (QUADRATIC_SETUP, RATE_BAND, equivalence_setup, gradient_rel_error, quadratic_experiment,
                          random_dense_model, split_gradient_error,
                          toy_classification_experiment)
from mbsfl.cli import main
from mbsfl.data import estimate_constants, gen_synthetic_classification, label_entropy, partition_noniid
from mbsfl.nn import DenseNet, LayerSpec, init_model
from mbsfl.protocol import run_training
from mbsfl.schedules import gamma, lr_at


@pytest.fixture
def report(capsys):
    def emit(n, passed, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return emit


@pytest.fixture(scope="module")
def quadratic():
    t0 = time.time()
    logs, inputs, qdata, w0 = quadratic_experiment()
    return logs, inputs, qdata, w0, time.time() - t0


@pytest.fixture(scope="module")
def toy():
    t0 = time.time()
    rows = toy_classification_experiment()
    return rows, time.time() - t0


def test_criterion_01_gradient_oracle(report):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = max(gradient_rel_error(*random_dense_model(rng, head)) for _ in range(25) for head in ("xent", "mse"))
    secs = time.time() - t0
    ok = worst <= 1e-6 and secs < 10
    assert report(1, ok, f"50 models, max rel error {worst:.3g} (tol 1e-6), {secs:.2f}s")


def test_criterion_02_split_equivalence(report):
    t0 = time.time()
    rng = np.random.default_rng(1)
    specs = [LayerSpec(5, 7, "tanh"), LayerSpec(7, 6, "relu"), LayerSpec(6, 4, "identity"),
             LayerSpec(4, 3, "softmax_xent_head")]
    model = init_model(specs, 3)
    X, y = rng.standard_normal((9, 5)), rng.integers(0, 3, size=9)
    errs = [split_gradient_error(model, X, y, c) for c in range(len(specs) + 1)]
    secs = time.time() - t0
    ok = max(errs) <= 1e-12 and secs < 5
    assert report(2, ok, f"L_c=0..4 max abs diff {max(errs):.3g} (tol 1e-12), {secs:.2f}s")


def test_criterion_03_fedavg_reduction(report):
    t0 = time.time()
    config, data, shards = equivalence_setup()
    config = replace(config, log_params=True)
    sfl, fa = run_training(config, data, shards), run_fedavg(config, data, shards)
    assert sorted(sfl.params) == sorted(fa.params) == list(range(config.total_steps + 1))
    worst = max(float(np.max(np.abs(sfl.params[i] - fa.params[i]))) for i in sfl.params)
    secs = time.time() - t0
    ok = worst <= 1e-12 and secs < 5
    assert report(3, ok, f"{len(sfl.params)} steps, max parameter diff {worst:.3g} (tol 1e-12), {secs:.2f}s")


def test_criterion_04_minibatch_sgd_reduction(report):
    config, data, shards = equivalence_setup()
    config = replace(config, cut_layer=0, log_params=True)
    a, b = run_training(config, data, shards), run_minibatch_sgd(config, data, shards)
    same = sorted(a.params) == sorted(b.params) and all(np.array_equal(a.params[i], b.params[i]) for i in a.params)
    same = same and a.final_model.array_equal(b.final_model)
    assert report(4, same, f"{len(a.params)} steps, {'bitwise identical' if same else 'parameters differ'}")


def test_criterion_05_sync_equalization(report):
    config, data, shards = equivalence_setup()
    config = replace(config, cut_layer=2, log_params=True)
    log = run_training(config, data, shards)
    EM = config.local_epochs * config.batches_per_epoch
    n_client = log.client_models[0].flat().size
    sync = [i for i in sorted(log.params) if i > 0 and i % EM == 0]
    equal = all(
        all(np.array_equal(log.params[i][:n_client], log.params[i][k * n_client:(k + 1) * n_client])
            for k in range(config.n_clients))
        for i in sync)
    div = [r.divergence for r in log.records if r.i in sync]
    ok = equal and len(div) == len(sync) and all(d == 0.0 for d in div)
    assert report(5, ok, f"sync steps {sync}, client parts identical={equal}, divergence {div}")


def test_criterion_06_schedule_condition(report):
    bad = []
    for S in (1.0, 10.0, 100.0):
        for EM in (1, 50, 500):
            g = gamma(S, 1.0, EM, 1)
            for i in range(1, int(10 * g) + 1):
                if lr_at(i, 1.0, g) > 1.0 / (4.0 * S):
                    bad.append((S, EM, i))
                    break
    assert report(6, not bad, f"9 (S, EM) pairs, i in [1, 10 gamma]; failures {bad}")


def test_criterion_07_bound_calculators(report):
    p1 = prop1_bound(BoundInputs(R=1.0, N=1, E=5, M=10, d0_server=1.0, i=50))
    p2 = prop2_bound(BoundInputs(R=1.0, E=5, M=10, i=50))
    th = theorem1_bound(BoundInputs(R=1.0, E=5, M=10, d0_server=1.0, i=50)).theorem_bound
    exact = p1 == 0.59 and p2 == 12.0 and abs(th - 6.295) < 1e-12
    rng = np.random.default_rng(7)
    mono_fail = 0
    for _ in range(100):
        base = BoundInputs(R=rng.uniform(0, 5), N=int(rng.integers(1, 11)), E=int(rng.integers(1, 6)),
                           M=int(rng.integers(1, 11)), delta=rng.uniform(0, 3), sigma_sq_weighted=rng.uniform(0, 3),
                           Gamma=rng.uniform(0, 3), d0_server=rng.uniform(0, 5), d0_client=rng.uniform(0, 5),
                           i=int(rng.integers(0, 1000)))
        step = rng.uniform(0.01, 2.0)
        later = base.at(base.i + 1)
        more_d0 = replace(base, d0_server=base.d0_server + step, d0_client=base.d0_client + step)
        more_delta = replace(base, delta=float(np.sqrt(base.delta ** 2 + step)))
        for fn in (prop1_bound, prop2_bound):
            if not (fn(later) < fn(base) and fn(more_d0) > fn(base) and fn(more_delta) >= fn(base)):
                mono_fail += 1
        if not prop2_bound(more_delta) > prop2_bound(base):
            mono_fail += 1
    ok = exact and mono_fail == 0
    assert report(7, ok, f"prop1={p1!r} prop2={p2!r} theorem={th!r}; {mono_fail} monotonicity failures on 100 points")


def test_criterion_08_bound_trajectories(report, quadratic):
    logs, inputs, _, _, secs = quadratic
    server = check_trajectory_vs_bound(logs, inputs, "server", tol=0.05)
    client = check_trajectory_vs_bound(logs, inputs, "client", tol=0.05)
    halved = check_trajectory_vs_bound(logs, replace(inputs, R=inputs.R / 2), "server", tol=0.05)
    ratio = max(e / b for e, b in zip(server.empirical_trajectory, server.bound_trajectory))
    ok = (server.violation_count == 0 and client.violation_count == 0 and halved.violation_count >= 1
          and len(server.steps) == 501 and secs < 60)
    assert report(8, ok, f"violations server {server.violation_count} client {client.violation_count} "
                         f"(max server ratio {ratio:.3f}); R halved: {halved.violation_count}; {secs:.1f}s")


def test_criterion_09_rate_fit(report, quadratic):
    logs, inputs, _, _, _ = quadratic
    slope, _, r2 = rate_fit(logs, inputs.gamma)
    lo, hi = RATE_BAND
    ok = lo <= slope <= hi
    assert report(9, ok, f"slope {slope:.4f} in [{lo}, {hi}], r^2 {r2:.3f}")


def test_criterion_10_lemma_checks(report, quadratic):
    logs, inputs, qdata, _, _ = quadratic
    var = check_variance_lemma(logs, np.sqrt(qdata.sigma_sq(QUADRATIC_SETUP["batch_size"])), qdata.task.weights)
    div = check_divergence_lemma(logs, inputs.R, inputs.delta, inputs.E, inputs.M)
    EM = inputs.E * inputs.M
    at_sync = [r.divergence for log in logs for r in log.records if r.i > 0 and r.i % EM == 0]
    single, _, _, _ = quadratic_experiment(seeds=range(2), n_clients=1, log_lemma_terms=False)
    n1 = [r.divergence for log in single for r in log.records]
    ok = (var.violation_count == 0 and div.violation_count == 0 and all(d == 0.0 for d in at_sync)
          and all(d == 0.0 for d in n1))
    assert report(10, ok, f"variance {var.empirical[0]:.4g} vs {var.bound[0]:.4g}; divergence violations "
                          f"{div.violation_count}; zero at {len(at_sync)} sync records and {len(n1)} N=1 records")


def test_criterion_11_noniid_machinery(report):
    rng = np.random.default_rng(11)
    bad = 0
    for _ in range(100):
        D, N = int(rng.integers(10, 300)), int(rng.integers(1, 12))
        r = float(rng.choice([0.0, 0.5, 0.8, 0.9, 0.95, 1.0, rng.random()]))
        data = gen_synthetic_classification(3, 5, (D + 4) // 5, 1.0, int(rng.integers(1000)))
        shards = partition_noniid(data, N, r, seed=int(rng.integers(1000)))
        idx = np.concatenate([s.indices for s in shards])
        bad += len(idx) != len(data) or len(np.unique(idx)) != len(data)
    rs = (0.0, 0.5, 0.8, 0.9, 0.95)
    entropy = {r: [] for r in rs}
    delta = {0.0: [], 0.95: []}
    specs = [LayerSpec(20, 32, "relu"), LayerSpec(32, 10, "softmax_xent_head")]
    for seed in range(10):
        data = gen_synthetic_classification(20, 10, 100, 1.0, seed)
        model = init_model(specs, seed)
        for r in rs:
            shards = partition_noniid(data, 10, r, seed=seed)
            entropy[r].append(np.mean([label_entropy(data, s) for s in shards]))
            if r in delta:
                est = estimate_constants(data, shards, model, DenseNet(), probes=1, seed=seed)
                delta[r].append(est.delta_hat)
    ent = [float(np.mean(entropy[r])) for r in rs]
    d0, d95 = float(np.mean(delta[0.0])), float(np.mean(delta[0.95]))
    ok = bad == 0 and all(b <= a for a, b in zip(ent, ent[1:])) and d95 > d0
    assert report(11, ok, f"{bad} bad partitions of 100; entropy {[round(e, 4) for e in ent]}; "
                          f"delta_hat r=0: {d0:.4g}, r=0.95: {d95:.4g}")


def test_criterion_12_observation_5(report, toy):
    rows, secs = toy
    v2 = sum(r["loss"]["minibatch_sfl"] <= r["loss"]["sfl_v2"] for r in rows)
    fa = sum(r["loss"]["minibatch_sfl"] <= r["loss"]["fedavg"] for r in rows)
    ok = v2 >= 8 and fa >= 7 and secs < 300
    assert report(12, ok, f"MiniBatch-SFL loss <= SFL-V2 in {v2}/10 seeds (need 8), <= FedAvg in {fa}/10 "
                          f"(need 7); {secs:.0f}s")


def _nondecreasing(d):
    v = [d[k] for k in sorted(d)]
    return all(b >= a for a, b in zip(v, v[1:]))


def _nonincreasing(d):
    v = [d[k] for k in sorted(d)]
    return all(b <= a for a, b in zip(v, v[1:]))


def test_criterion_13_observations_1_2(report, toy):
    rows, _ = toy
    acc = sum(_nondecreasing(r["accuracy"]) for r in rows)
    at_client = sum(_nonincreasing(r["var_at_client"]) for r in rows)
    across = sum(_nonincreasing(r["var_across_clients"]) for r in rows)
    mean_acc = {lc: float(np.mean([r["accuracy"][lc] for r in rows])) for lc in (1, 2, 3)}
    ok = acc >= 7 and at_client >= 7 and across >= 7
    assert report(13, ok, f"seeds with accuracy non-decreasing in L_c {acc}/10, at-client variance "
                          f"non-increasing {at_client}/10, across-client variance non-increasing {across}/10 "
                          f"(need 7 each); mean accuracy by L_c "
                          f"{ {lc: round(a, 4) for lc, a in mean_acc.items()} }")


def test_criterion_14_determinism(report, tmp_path):
    root = Path(__file__).resolve().parent.parent
    runs = {}
    for label, path, extra, workers in [
        ("quad-1", "configs/quadratic.yaml", [], 1),
        ("quad-1b", "configs/quadratic.yaml", [], 1),
        ("quad-3", "configs/quadratic.yaml", [], 3),
        ("toy-1", "configs/toy_classification.yaml", ["--set", "seeds=[0, 1]"], 1),
        ("toy-3", "configs/toy_classification.yaml", ["--set", "seeds=[0, 1]"], 3),
    ]:
        out = tmp_path / label
        code = main(["run", "--config", str(root / path), *extra, "--out", str(out), "--workers", str(workers)])
        assert code == 0
        runs[label] = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    quad_same = runs["quad-1"] == runs["quad-1b"] == runs["quad-3"]
    toy_same = runs["toy-1"] == runs["toy-3"]
    n_csv = sum(name.endswith(".csv") for name in runs["quad-1"]) + sum(name.endswith(".csv") for name in runs["toy-1"])
    summary = json.loads(runs["toy-1"]["summary.json"])
    ok = quad_same and toy_same and summary["seeds"] == [0, 1]
    assert report(14, ok, f"{n_csv} CSVs compared byte-for-byte across reruns and 1 vs 3 workers: "
                          f"quadratic {'identical' if quad_same else 'differ'}, "
                          f"classification {'identical' if toy_same else 'differ'}")
