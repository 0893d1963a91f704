"""The MiniBatch-SFL state machine and the shared training driver.

One SGD step ``i`` has four phases: every client computes smashed data on its
batch; the main server takes one step on the p-weighted average of the
per-client server gradients and returns the gradient w.r.t. each client's
smashed data; every client backpropagates it into its own client-side model;
and at the synchronization steps ``{E*M, 2*E*M, ...}`` the fed server replaces
all client-side models by their p-weighted average.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import across_clients_variance, window_variance
from .data import Dataset, check_shards, make_batch_plan
from .exceptions import NumericError, ShapeError
from .nn import DenseNet, ModelParams, SplitSpec, aggregate, concat_model, init_model, sgd_step, split_model, weighted_mean
from .schedules import TrainConfig


def step_index(t: int, e: int, m: int, E: int, M: int) -> int:
    if t < 1 or not 1 <= e <= E or not 1 <= m <= M:
        raise ValueError(f"(t, e, m) = ({t}, {e}, {m}) out of range for E={E}, M={M}")
    return (t - 1) * E * M + (e - 1) * M + m


def step_position(i: int, E: int, M: int) -> tuple[int, int, int]:
    """Inverse of :func:`step_index`; step 0 maps to (0, 0, 0)."""
    if i == 0:
        return 0, 0, 0
    q, m0 = divmod(i - 1, M)
    t0, e0 = divmod(q, E)
    return t0 + 1, e0 + 1, m0 + 1


@dataclass(frozen=True)
class SyncSchedule:
    points: frozenset
    total_steps: int

    def __contains__(self, i):
        return i in self.points


def sync_points(T: int, E: int, M: int) -> SyncSchedule:
    if min(T, E, M) < 1:
        raise ValueError("T, E and M must be positive")
    return SyncSchedule(frozenset(t * E * M for t in range(1, T + 1)), T * E * M)


@dataclass
class SplitState:
    """Client-side models, server-side model and the SGD step counter.

    ``client_models`` holds ``v_{c,n}`` right after a step and ``w_{c,n}``
    once :func:`maybe_sync` has run.
    """

    client_models: list
    server_model: ModelParams
    weights: np.ndarray
    E: int
    M: int
    step: int = 0

    @property
    def position(self) -> tuple[int, int, int]:
        return step_position(self.step, self.E, self.M)

    def global_client_model(self) -> ModelParams:
        return aggregate(self.client_models, self.weights)

    def global_model(self) -> ModelParams:
        return concat_model(self.global_client_model(), self.server_model)

    def divergence(self) -> float:
        """``sum_n p_n ||w_c,n - w_bar_c||^2``."""
        mean = self.global_client_model().flat()
        return float(sum(p * np.sum((m.flat() - mean) ** 2) for p, m in zip(self.weights, self.client_models)))


def initial_state(model: ModelParams, cut_layer: int, weights, E: int, M: int) -> SplitState:
    client, server = split_model(model, SplitSpec(cut_layer, len(model)))
    return SplitState([client] * len(weights), server, np.asarray(weights, dtype=np.float64), E, M)


@dataclass
class StepOutput:
    """Side information of one SGD step used for logging."""

    loss: float
    client_grads: list  # flattened client-side gradient per client


def minibatch_sfl_step(state: SplitState, batches, eta_c: float, eta_s: float, net=None) -> tuple[SplitState, StepOutput]:
    """One MiniBatch-SFL SGD step; no synchronization.

    ``batches`` holds one ``(X, y)`` pair per client.  Every gradient returned
    to the clients is computed from the server model *before* its update.
    """
    net = net or DenseNet()
    if len(batches) != len(state.client_models):
        raise ShapeError(f"{len(batches)} batches for {len(state.client_models)} clients")
    fwd = [net.client_forward(w_c, X, y, n) for n, (w_c, (X, y)) in enumerate(zip(state.client_models, batches))]
    losses, server_grads, grad_z = [], [], []
    for smashed, _ in fwd:
        loss, g_s, g_z = net.server_grads(state.server_model, smashed)
        losses.append(loss)
        server_grads.append(g_s)
        grad_z.append(g_z)
    server = sgd_step(state.server_model, weighted_mean(server_grads, state.weights), eta_s)
    new_clients, flat_grads = [], []
    for w_c, (_, cache), g_z in zip(state.client_models, fwd, grad_z):
        g_c = net.client_backward(w_c, cache, g_z)
        new_clients.append(sgd_step(w_c, g_c, eta_c))
        flat_grads.append(g_c.flat())
    out = StepOutput(float(np.dot(state.weights, losses)), flat_grads)
    return replace(state, client_models=new_clients, server_model=server, step=state.step + 1), out


def maybe_sync(state: SplitState, schedule: SyncSchedule) -> SplitState:
    """Fed-server aggregation when the current step is a synchronization point."""
    if state.step not in schedule:
        return state
    avg = state.global_client_model()
    return replace(state, client_models=[avg] * len(state.client_models))


@dataclass
class StepRecord:
    i: int
    t: int
    e: int
    m: int
    loss: float
    accuracy: float | None = None
    train_loss: float | None = None
    dist_sq: float | None = None
    dist_sq_client: float | None = None
    dist_sq_server: float | None = None
    eta_c: float | None = None
    eta_s: float | None = None
    grad_var_at_client_mean: float | None = None
    grad_var_across_clients: float | None = None
    divergence: float | None = None
    variance_sample: float | None = None


@dataclass
class RunLog:
    config: TrainConfig
    records: list = field(default_factory=list)
    client_grads: dict = field(default_factory=dict)  # step -> (N, P) array, when requested
    params: dict = field(default_factory=dict)  # step -> all client models then the server model, flattened
    final_model: ModelParams | None = None
    client_models: list | None = None
    server_model: ModelParams | None = None

    @property
    def final(self) -> StepRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    def steps(self) -> np.ndarray:
        return np.array([r.i for r in self.records])


def _all_params(state: SplitState) -> np.ndarray:
    return np.concatenate([m.flat() for m in state.client_models] + [state.server_model.flat()])


def _pooled(dataset: Dataset, shards) -> tuple:
    idx = np.sort(np.concatenate([s.indices for s in shards]))
    return dataset.features[idx], dataset.labels[idx]


class _Driver:
    """Shared outer loop: batching, learning rates, synchronization and logging."""

    def __init__(self, config: TrainConfig, dataset, shards, net, eval_data, w_star, cut_layer):
        check_shards(shards)
        self.config = config
        self.dataset = dataset
        self.shards = shards
        self.net = net or DenseNet()
        self.eval_data = eval_data if eval_data is not None else _pooled(dataset, shards)
        self.w_star = w_star
        self.cut_layer = cut_layer
        self.schedule = sync_points(config.rounds, config.local_epochs, config.batches_per_epoch)
        self.window = deque(maxlen=config.window)
        self._plans = {}

    def batches(self, i: int):
        t, e, m = step_position(i, self.config.local_epochs, self.config.batches_per_epoch)
        out = []
        for shard in self.shards:
            key = (shard.client_id, t, e)
            if key not in self._plans:
                self._plans = {k: v for k, v in self._plans.items() if k[1:] == (t, e)}
                seed = [int(self.config.seed), int(shard.client_id), t, e]
                self._plans[key] = make_batch_plan(shard, self.config.batch_size, self.config.batches_per_epoch, seed)
            idx = self._plans[key].batches[m - 1]
            out.append((self.dataset.features[idx], self.dataset.labels[idx]))
        return out

    def lemma_sample(self, state: SplitState, client_grads) -> float:
        """``||sum p_n grad_c f_n(w) - sum p_n grad_c f_n(w; batch)||^2`` at the pre-step parameters."""
        full = []
        for n, shard in enumerate(self.shards):
            X, y = self.dataset.features[shard.indices], self.dataset.labels[shard.indices]
            smashed, cache = self.net.client_forward(state.client_models[n], X, y, n)
            _, _, g_z = self.net.server_grads(state.server_model, smashed)
            full.append(self.net.client_backward(state.client_models[n], cache, g_z).flat())
        diff = sum(p * (f - g) for p, f, g in zip(state.weights, full, client_grads))
        return float(np.sum(diff * diff))

    def record(self, state: SplitState, train_loss=None, eta=None, lemma=None, step_grads=None) -> StepRecord:
        t, e, m = state.position
        model = state.global_model()
        loss, acc = self.net.evaluate(model, *self.eval_data)
        if not np.isfinite(loss):
            raise NumericError("non-finite evaluation loss", step=state.step)
        rec = StepRecord(state.step, t, e, m, loss, acc, train_loss, eta_c=eta, eta_s=eta,
                         divergence=state.divergence(), variance_sample=lemma)
        if self.w_star is not None:
            c = len(state.client_models[0])
            diff = model.flat() - self.w_star.flat()
            n_client = state.client_models[0].n_params
            rec.dist_sq = float(np.sum(diff * diff))
            rec.dist_sq_client = float(np.sum(diff[:n_client] ** 2)) if c else 0.0
            rec.dist_sq_server = float(np.sum(diff[n_client:] ** 2))
        if self.cut_layer >= 1 and step_grads is not None:
            if len(self.window) >= 2:
                stacked = np.stack(list(self.window))  # (steps, N, P)
                per_client = [window_variance(stacked[:, n, :]) for n in range(stacked.shape[1])]
                rec.grad_var_at_client_mean = float(np.mean(per_client)) / self.cut_layer
            rec.grad_var_across_clients = across_clients_variance(step_grads) / self.cut_layer
        return rec

    def run(self, state: SplitState, step_fn) -> RunLog:
        config = self.config
        log = RunLog(config)
        log.records.append(self.record(state))
        if config.log_params:
            log.params[0] = _all_params(state)
        for i in range(1, config.total_steps + 1):
            eta = config.rate(i - 1)
            batches = self.batches(i)
            pre = state
            try:
                state, out = step_fn(state, batches, eta, eta)
                state = maybe_sync(state, self.schedule)
            except NumericError as exc:
                raise NumericError(str(exc), step=i) from exc
            grads = np.stack(out.client_grads) if self.cut_layer >= 1 else None
            if grads is not None:
                self.window.append(grads)
                if config.log_client_grads:
                    log.client_grads[i] = grads
            if config.log_params:
                log.params[i] = _all_params(state)
            if config.log_every_step or i in self.schedule:
                lemma = self.lemma_sample(pre, out.client_grads) if config.log_lemma_terms else None
                log.records.append(self.record(state, out.loss, eta, lemma, grads))
        log.final_model = state.global_model()
        log.client_models = state.client_models
        log.server_model = state.server_model
        return log


def run_training(config: TrainConfig, dataset, shards, net=None, initial_model=None, eval_data=None,
                 w_star=None) -> RunLog:
    """Run MiniBatch-SFL for ``T*E*M`` SGD steps.

    ``eval_data`` defaults to the pooled client data; ``w_star`` (full model
    layout) enables the distance columns of the log.
    """
    if len(shards) != config.n_clients:
        raise ShapeError(f"config expects {config.n_clients} clients, got {len(shards)} shards")
    model = initial_model if initial_model is not None else init_model(config.layer_specs, config.init_seed)
    driver = _Driver(config, dataset, shards, net, eval_data, w_star, config.cut_layer)
    state = initial_state(model, config.cut_layer, [s.weight for s in shards], config.local_epochs,
                          config.batches_per_epoch)
    return driver.run(state, lambda s, b, ec, es: minibatch_sfl_step(s, b, ec, es, driver.net))
