"""Baselines sharing the MiniBatch-SFL driver: FedAvg, SFL-V2, centralized SGD and MiniBatch SGD.

Every runner represents its state as a :class:`~mbsfl.protocol.SplitState` so
logging and synchronization are identical across algorithms: FedAvg keeps
full models on the clients and an empty server part, the two centralized
variants keep empty client parts and the full model on the server.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data import Shard
from .exceptions import ShapeError
from .nn import DenseNet, ModelParams, SmashedData, init_model, sgd_step, weighted_mean
from .protocol import RunLog, StepOutput, _Driver, initial_state, minibatch_sfl_step, run_training
from .schedules import ALGORITHMS, ScheduleParams, TrainConfig, gamma, lr_at

__all__ = [
    "ALGORITHMS", "ScheduleParams", "TrainConfig", "gamma", "lr_at", "run_algorithm", "run_centralized",
    "minibatch_sfl_step", "run_fedavg", "run_minibatch_sgd", "run_sfl_v2", "sfl_v2_step",
]


def _full_grad(net, model: ModelParams, X, y):
    """Loss and gradient of the unsplit model: raw inputs go straight to the server hooks."""
    empty = ModelParams([], [], model.head)
    smashed, _ = net.client_forward(empty, X, y)
    loss, grads, _ = net.server_grads(model, SmashedData(smashed.activations, y))
    return loss, grads


def _setup(config: TrainConfig, shards, initial_model):
    if len(shards) != config.n_clients:
        raise ShapeError(f"config expects {config.n_clients} clients, got {len(shards)} shards")
    return initial_model if initial_model is not None else init_model(config.layer_specs, config.init_seed)


def run_fedavg(config: TrainConfig, dataset, shards, net=None, initial_model=None, eval_data=None, w_star=None) -> RunLog:
    """Local SGD on the full model at every client, p-weighted averaging at round ends."""
    model = _setup(config, shards, initial_model)
    driver = _Driver(config, dataset, shards, net, eval_data, w_star, config.n_layers)
    state = initial_state(model, config.n_layers, [s.weight for s in shards], config.local_epochs,
                          config.batches_per_epoch)

    def step(state, batches, eta_c, eta_s):
        new_models, losses, flat = [], [], []
        for w, (X, y) in zip(state.client_models, batches):
            loss, g = _full_grad(driver.net, w, X, y)
            new_models.append(sgd_step(w, g, eta_c))
            losses.append(loss)
            flat.append(g.flat())
        out = StepOutput(float(np.dot(state.weights, losses)), flat)
        return replace(state, client_models=new_models, step=state.step + 1), out

    return driver.run(state, step)


def sfl_v2_step(state, batches, eta_c, eta_s, net=None, order=None):
    """One SFL-V2 step: the main server takes one SGD step per client, in ``order``.

    Each client receives the smashed-data gradient computed with the server
    model in effect when that client is processed.
    """
    net = net or DenseNet()
    fwd = [net.client_forward(w_c, X, y, n) for n, (w_c, (X, y)) in enumerate(zip(state.client_models, batches))]
    order = range(len(fwd)) if order is None else order
    server = state.server_model
    grad_z = [None] * len(fwd)
    losses = [0.0] * len(fwd)
    for n in order:
        losses[n], g_s, grad_z[n] = net.server_grads(server, fwd[n][0])
        server = sgd_step(server, g_s, eta_s)
    new_clients, flat = [], []
    for w_c, (_, cache), g_z in zip(state.client_models, fwd, grad_z):
        g_c = net.client_backward(w_c, cache, g_z)
        new_clients.append(sgd_step(w_c, g_c, eta_c))
        flat.append(g_c.flat())
    out = StepOutput(float(np.dot(state.weights, losses)), flat)
    return replace(state, client_models=new_clients, server_model=server, step=state.step + 1), out


def run_sfl_v2(config: TrainConfig, dataset, shards, net=None, initial_model=None, eval_data=None, w_star=None) -> RunLog:
    model = _setup(config, shards, initial_model)
    driver = _Driver(config, dataset, shards, net, eval_data, w_star, config.cut_layer)
    state = initial_state(model, config.cut_layer, [s.weight for s in shards], config.local_epochs,
                          config.batches_per_epoch)

    def step(state, batches, eta_c, eta_s):
        order = None
        if config.sfl_v2_shuffle:
            order = np.random.default_rng([int(config.seed), state.step + 1]).permutation(len(batches))
        return sfl_v2_step(state, batches, eta_c, eta_s, driver.net, order)

    return driver.run(state, step)


def _server_only_step(net):
    def step(state, batches, eta_c, eta_s):
        losses, grads = [], []
        for X, y in batches:
            loss, g = _full_grad(net, state.server_model, X, y)
            losses.append(loss)
            grads.append(g)
        server = sgd_step(state.server_model, weighted_mean(grads, state.weights), eta_s)
        empty = [np.zeros(0)] * len(batches)
        out = StepOutput(float(np.dot(state.weights, losses)), empty)
        return replace(state, server_model=server, step=state.step + 1), out

    return step


def run_minibatch_sgd(config: TrainConfig, dataset, shards, net=None, initial_model=None, eval_data=None,
                      w_star=None) -> RunLog:
    """One full-model SGD step per round of batches on ``sum p_n grad f_n(w; batch_n)``."""
    model = _setup(config, shards, initial_model)
    driver = _Driver(config, dataset, shards, net, eval_data, w_star, 0)
    state = initial_state(model, 0, [s.weight for s in shards], config.local_epochs, config.batches_per_epoch)
    return driver.run(state, _server_only_step(driver.net))


def run_centralized(config: TrainConfig, dataset, net=None, initial_model=None, eval_data=None, w_star=None,
                    indices=None) -> RunLog:
    """Plain SGD on the pooled data (``indices`` selects the pool, default all samples)."""
    pool = np.arange(len(dataset)) if indices is None else np.sort(np.asarray(indices))
    shards = [Shard(pool, 1.0, 0)]
    config = replace(config, n_clients=1)
    model = _setup(config, shards, initial_model)
    driver = _Driver(config, dataset, shards, net, eval_data, w_star, 0)
    state = initial_state(model, 0, [1.0], config.local_epochs, config.batches_per_epoch)
    return driver.run(state, _server_only_step(driver.net))


def run_algorithm(config: TrainConfig, dataset, shards, **kwargs) -> RunLog:
    """Dispatch on ``config.algorithm``; the centralized baseline pools the shards."""
    if config.algorithm == "minibatch_sfl":
        return run_training(config, dataset, shards, **kwargs)
    if config.algorithm == "fedavg":
        return run_fedavg(config, dataset, shards, **kwargs)
    if config.algorithm == "sfl_v2":
        return run_sfl_v2(config, dataset, shards, **kwargs)
    if config.algorithm == "minibatch_sgd":
        return run_minibatch_sgd(config, dataset, shards, **kwargs)
    pool = np.concatenate([s.indices for s in shards])
    kwargs.setdefault("eval_data", (dataset.features[np.sort(pool)], dataset.labels[np.sort(pool)]))
    return run_centralized(config, dataset, indices=pool, **kwargs)

