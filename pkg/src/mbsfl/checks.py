"""Named invariant and oracle checks run by ``mbsfl check``.

Each check returns a :class:`CheckResult`; ``inject`` switches on a
deliberate fault so the harness can be seen to fail (negative controls).
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .algorithms import run_fedavg, run_minibatch_sgd
from .analysis import (BoundInputs, check_divergence_lemma, check_trajectory_vs_bound, check_variance_lemma,
                       prop1_bound, prop2_bound, quadratic_bound_inputs, rate_fit, theorem1_bound)
from .data import gen_synthetic_classification, partition_noniid
from .experiment import ExperimentConfig, ModelConfig, QuadraticTaskConfig, SyntheticTask, quadratic_cell_data, run_cell
from .nn import (LayerSpec, ModelParams, SplitSpec, backward_client, backward_server, forward_client,
                 forward_server, finite_diff_grad, init_model, loss_and_grad, split_model)
from .protocol import run_training
from .quadratic import QuadraticNet, as_params
from .schedules import ScheduleParams, TrainConfig, gamma, lr_at

INJECTIONS = ("lr", "half-R")
RATE_BAND = (-1.4, -0.7)


@dataclass
class CheckResult:
    name: str
    module: str
    tolerance: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- shared experiments

def random_dense_model(rng, head: str):
    depth = int(rng.integers(1, 5))
    dims = [int(d) for d in rng.integers(1, 9, size=depth + 1)]
    if head == "xent":
        dims[-1] = max(dims[-1], 2)
    acts = [str(rng.choice(["identity", "relu", "tanh"])) for _ in range(depth - 1)]
    acts.append("softmax_xent_head" if head == "xent" else str(rng.choice(["identity", "tanh"])))
    specs = [LayerSpec(a, b, act) for a, b, act in zip(dims[:-1], dims[1:], acts)]
    model = init_model(specs, int(rng.integers(2 ** 31)))
    # random biases keep relu units off the kink where the derivative is undefined
    model = ModelParams([(W, rng.uniform(-0.5, 0.5, size=b.shape)) for W, b in model.layers], model.specs, model.head)
    n = int(rng.integers(1, 6))
    X = rng.standard_normal((n, dims[0]))
    y = rng.integers(0, dims[-1], size=n) if head == "xent" else rng.standard_normal((n, dims[-1]))
    return model, X, y


def gradient_rel_error(model, X, y, eps: float = 1e-6) -> float:
    """Max entrywise relative error of backprop against central differences."""
    _, g = loss_and_grad(model, X, y)
    fd = finite_diff_grad(lambda p: loss_and_grad(p, X, y)[0], model, eps)
    a, b = g.flat(), fd.flat()
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))) if a.size else 0.0


def split_gradient_error(model, X, y, cut: int) -> float:
    _, full = loss_and_grad(model, X, y)
    client, server = split_model(model, SplitSpec(cut, len(model)))
    smashed, c_cache = forward_client(client, X, y)
    _, s_cache = forward_server(server, smashed)
    g_s, g_z = backward_server(server, s_cache)
    g_c = backward_client(client, c_cache, g_z)
    return float(np.max(np.abs(np.concatenate([g_c.flat(), g_s.flat()]) - full.flat())))


def equivalence_setup(N: int = 4, T: int = 2, E: int = 2, M: int = 3, seed: int = 0):
    specs = [LayerSpec(6, 8, "tanh"), LayerSpec(8, 8, "relu"), LayerSpec(8, 5, "tanh"),
             LayerSpec(5, 4, "softmax_xent_head")]
    data = gen_synthetic_classification(6, 4, 15, 0.7, seed)
    shards = partition_noniid(data, N, 0.5, seed=seed)
    config = TrainConfig(specs, n_clients=N, rounds=T, local_epochs=E, batches_per_epoch=M, batch_size=5,
                         cut_layer=len(specs), seed=seed, init_seed=seed, log_every_step=True,
                         schedule=ScheduleParams(constant_lr=0.05))
    return config, data, shards


QUADRATIC_SETUP = dict(n_clients=4, rounds=50, local_epochs=5, batches_per_epoch=2, batch_size=4, cut_layer=1)


def quadratic_experiment(seeds=range(10), n_clients: int | None = None, log_lemma_terms: bool = True):
    """The frozen bound-verification experiment: returns (logs, bound inputs, sampled task, w0)."""
    setup = dict(QUADRATIC_SETUP)
    if n_clients is not None:
        setup["n_clients"] = n_clients
    cfg = ExperimentConfig(task="quadratic", quadratic=QuadraticTaskConfig(), n_clients=setup["n_clients"],
                           weights_mode="uniform")
    qdata, w0 = quadratic_cell_data(cfg)
    E, M, B = setup["local_epochs"], setup["batches_per_epoch"], setup["batch_size"]
    base = TrainConfig(cfg.layer_specs(), n_clients=setup["n_clients"], rounds=setup["rounds"], local_epochs=E,
                       batches_per_epoch=M, batch_size=B, cut_layer=setup["cut_layer"],
                       schedule=ScheduleParams(mode="diminishing"), log_every_step=True,
                       log_lemma_terms=log_lemma_terms)
    logs = [run_training(replace(base, seed=s), qdata.dataset, qdata.shards, net=QuadraticNet(),
                         initial_model=as_params(w0), w_star=as_params(qdata.task.w_star)) for s in seeds]
    inputs = quadratic_bound_inputs(qdata, setup["cut_layer"], B, E, M, w0)
    return logs, inputs, qdata, w0


def toy_classification_config(seeds=range(10)) -> ExperimentConfig:
    """The frozen toy classification sweep.

    Features are scaled by 6 and the hidden layers are 64 wide so that ten
    non-IID clients make visible progress within 500 steps at lr 0.01.
    """
    return ExperimentConfig(
        task="synthetic_classification", synthetic=SyntheticTask(scale=6.0), model=ModelConfig(hidden=[64, 64]),
        algorithms=["minibatch_sfl", "sfl_v2", "fedavg"], r_values=[0.9], cut_layers=[1, 2, 3], seeds=list(seeds),
        n_clients=10, rounds=20, local_epochs=5, batches_per_epoch=5, batch_size=32,
        schedule=ScheduleParams(constant_lr=0.01))


TOY_CUT_LAYER = 2


def toy_classification_experiment(seeds=range(10)) -> list:
    """Per seed: final losses of the three algorithms at the middle cut and MiniBatch-SFL metrics per L_c.

    The variance metrics are averaged over the logged round ends.
    """
    cfg = toy_classification_config(seeds)
    r = cfg.r_values[0]
    rows = []
    for seed in cfg.seeds:
        row = {"seed": seed, "loss": {}, "accuracy": {}, "var_at_client": {}, "var_across_clients": {}}
        for algorithm in ("sfl_v2", "fedavg"):
            row["loss"][algorithm] = run_cell(cfg, algorithm, r, TOY_CUT_LAYER, seed).final.loss
        for lc in cfg.cut_layers:
            log = run_cell(cfg, "minibatch_sfl", r, lc, seed)
            if lc == TOY_CUT_LAYER:
                row["loss"]["minibatch_sfl"] = log.final.loss
            row["accuracy"][lc] = log.final.accuracy
            row["var_at_client"][lc] = float(np.nanmean(log.column("grad_var_at_client_mean")))
            row["var_across_clients"][lc] = float(np.nanmean(log.column("grad_var_across_clients")))
        rows.append(row)
    return rows


# ---------------------------------------------------------------- checks

def check_gradients(inject=None) -> CheckResult:
    rng = np.random.default_rng(0)
    worst = max(gradient_rel_error(*random_dense_model(rng, head)) for _ in range(25) for head in ("xent", "mse"))
    return CheckResult("gradient-check", "nn_core", "1e-6", worst <= 1e-6, f"max relative error {worst:.3g}")


def check_split(inject=None) -> CheckResult:
    rng = np.random.default_rng(1)
    specs = [LayerSpec(5, 7, "tanh"), LayerSpec(7, 6, "relu"), LayerSpec(6, 4, "identity"),
             LayerSpec(4, 3, "softmax_xent_head")]
    model = init_model(specs, 3)
    X, y = rng.standard_normal((9, 5)), rng.integers(0, 3, size=9)
    worst = max(split_gradient_error(model, X, y, c) for c in range(len(specs) + 1))
    return CheckResult("split-equivalence", "nn_core", "1e-12", worst <= 1e-12, f"max abs difference {worst:.3g}")


def _max_log_diff(a, b) -> float:
    worst = 0.0
    for ra, rb in zip(a.records, b.records):
        worst = max(worst, abs(ra.loss - rb.loss))
    return max(worst, float(np.max(np.abs(a.final_model.flat() - b.final_model.flat()))))


def check_fedavg_equivalence(inject=None) -> CheckResult:
    config, data, shards = equivalence_setup()
    sfl = run_training(config, data, shards)
    fa_config = config
    if inject == "lr":
        fa_config = replace(config, schedule=replace(config.schedule, constant_lr=config.schedule.constant_lr * 1.001))
    fa = run_fedavg(fa_config, data, shards)
    diff = _max_log_diff(sfl, fa)
    return CheckResult("fedavg-equivalence", "algorithms", "1e-12", diff <= 1e-12, f"max difference {diff:.3g}")


def check_minibatch_sgd_equivalence(inject=None) -> CheckResult:
    config, data, shards = equivalence_setup()
    config = replace(config, cut_layer=0)
    a, b = run_training(config, data, shards), run_minibatch_sgd(config, data, shards)
    same = a.final_model.array_equal(b.final_model) and all(x.loss == y.loss for x, y in zip(a.records, b.records))
    return CheckResult("minibatch-sgd-equivalence", "algorithms", "bitwise", same,
                       "identical" if same else "trajectories differ")


def check_sync(inject=None) -> CheckResult:
    config, data, shards = equivalence_setup()
    config = replace(config, cut_layer=2)
    EM = config.local_epochs * config.batches_per_epoch
    log = run_training(config, data, shards)
    at_sync = [r.divergence for r in log.records if r.i > 0 and r.i % EM == 0]
    models = log.client_models
    ok = all(d == 0.0 for d in at_sync) and all(m.array_equal(models[0]) for m in models)
    return CheckResult("sync-equalization", "protocol", "bitwise", ok, f"divergence at sync steps {at_sync}")


def check_schedule(inject=None) -> CheckResult:
    bad = []
    for S in (1.0, 10.0, 100.0):
        for EM in (1, 50, 500):
            g = gamma(S, 1.0, EM, 1)
            i = np.arange(1, int(10 * g) + 1)
            if not np.all(2.0 / (g + i) <= 1.0 / (4.0 * S)) or lr_at(1, 1.0, g) > 1.0 / (4.0 * S):
                bad.append((S, EM))
    return CheckResult("schedule-condition", "algorithms", "exact", not bad, f"failing (S, EM): {bad}")


def check_bound_calculators(inject=None) -> CheckResult:
    p1 = prop1_bound(BoundInputs(R=1.0, N=1, E=5, M=10, d0_server=1.0, i=50))
    p2 = prop2_bound(BoundInputs(R=1.0, E=5, M=10, i=50))
    th = theorem1_bound(BoundInputs(R=1.0, E=5, M=10, d0_server=1.0, i=50))
    ok = p1 == 0.59 and p2 == 12.0 and abs(th.theorem_bound - 6.295) < 1e-12
    return CheckResult("bound-calculators", "analysis", "exact", ok,
                       f"prop1={p1!r} prop2={p2!r} theorem={th.theorem_bound!r}")


def check_quadratic_bounds(inject=None) -> list:
    t0 = time.time()
    logs, inputs, qdata, _ = quadratic_experiment()
    used = replace(inputs, R=inputs.R / 2) if inject == "half-R" else inputs
    out = []
    for side, name in (("server", "prop1-trajectory"), ("client", "prop2-trajectory")):
        rep = check_trajectory_vs_bound(logs, used, side, tol=0.05)
        out.append(CheckResult(name, "analysis", "1.05 x bound", rep.violation_count == 0,
                               f"{rep.violation_count} violations over {len(rep.steps)} steps"))
    slope, _, r2 = rate_fit(logs, inputs.gamma)
    lo, hi = RATE_BAND
    out.append(CheckResult("rate-fit", "analysis", f"slope in [{lo}, {hi}]", lo <= slope <= hi,
                           f"slope {slope:.4f}, r^2 {r2:.3f}"))
    var = check_variance_lemma(logs, np.sqrt(qdata.sigma_sq(QUADRATIC_SETUP["batch_size"])), qdata.task.weights)
    out.append(CheckResult("variance-lemma", "analysis", "1.05 x bound", var.violation_count == 0,
                           f"mean {var.empirical[0]:.4g} vs bound {var.bound[0]:.4g}"))
    div = check_divergence_lemma(logs, inputs.R, inputs.delta, inputs.E, inputs.M)
    out.append(CheckResult("divergence-lemma", "analysis", "1.05 x bound", div.violation_count == 0,
                           f"{div.violation_count} violations"))
    for r in out:
        r.seconds = (time.time() - t0) / len(out)
    return out


def check_partitioner(inject=None) -> CheckResult:
    rng = np.random.default_rng(5)
    problems = 0
    for _ in range(30):
        D, N = int(rng.integers(10, 200)), int(rng.integers(1, 10))
        r = float(rng.choice([0.0, 0.5, 0.9, 1.0, rng.random()]))
        data = gen_synthetic_classification(3, 4, (D + 3) // 4, 1.0, int(rng.integers(1000)))
        shards = partition_noniid(data, N, r, seed=int(rng.integers(1000)))
        idx = np.concatenate([s.indices for s in shards])
        if len(idx) != len(data) or len(np.unique(idx)) != len(data):
            problems += 1
    return CheckResult("partitioner", "data", "exact", problems == 0, f"{problems} bad partitions of 30")


CHECKS = {
    "gradient-check": check_gradients,
    "split-equivalence": check_split,
    "fedavg-equivalence": check_fedavg_equivalence,
    "minibatch-sgd-equivalence": check_minibatch_sgd_equivalence,
    "sync-equalization": check_sync,
    "schedule-condition": check_schedule,
    "bound-calculators": check_bound_calculators,
    "quadratic-bounds": check_quadratic_bounds,
    "partitioner": check_partitioner,
}


def run_checks(names=None, inject=None) -> list:
    """Run the named check groups (all by default) and return flat results."""
    if inject is not None and inject not in INJECTIONS:
        raise ValueError(f"unknown injection {inject!r}; choose from {', '.join(INJECTIONS)}")
    names = list(CHECKS) if not names else names
    results = []
    for name in names:
        if name not in CHECKS:
            raise ValueError(f"unknown check {name!r}")
        t0 = time.time()
        out = CHECKS[name](inject)
        if isinstance(out, CheckResult):
            out.seconds = time.time() - t0
            out = [out]
        results.extend(out)
    return results
