"""Strongly convex verification task: f_n(w) = 1/2 ||w - c_n||^2.

Every client objective is 1-smooth and 1-strongly convex with the analytic
minimiser ``w* = sum p_n c_n``, which lets the convergence bounds be checked
against exact constants.  A parameter vector in R^d is stored as a
:class:`~mbsfl.nn.ModelParams` of ``d`` chained 1->1 layers whose biases are
the coordinates (weights stay zero), so splitting at layer ``L_c`` hands the
first ``L_c`` coordinates to the clients and the rest to the main server.

Stochastic gradients come from data: a sample is a target vector ``t`` and the
batch loss is ``1/2 mean_j ||w - t_j||^2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Shard
from .exceptions import ShapeError
from .nn import ForwardCache, LayerSpec, ModelParams, SmashedData, check_weights


@dataclass
class QuadraticObjective:
    center: np.ndarray

    def value(self, w) -> float:
        r = np.asarray(w, dtype=np.float64) - self.center
        return 0.5 * float(r @ r)

    def grad(self, w) -> np.ndarray:
        return np.asarray(w, dtype=np.float64) - self.center


@dataclass
class QuadraticTask:
    centers: np.ndarray
    weights: np.ndarray
    objectives: list
    w_star: np.ndarray

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def global_value(self, w) -> float:
        return float(sum(p * f.value(w) for p, f in zip(self.weights, self.objectives)))

    def delta(self) -> float:
        """Gradient divergence ``max_n ||grad f_n - grad F||``; constant in w."""
        return float(np.max(np.linalg.norm(self.centers - self.w_star, axis=1)))

    def gap(self, cut_layer: int) -> float:
        """``F(w*) - sum p_n f_n(w_c,n*, w_s*)``: client minima taken with the server part at optimum."""
        diff = self.centers[:, :cut_layer] - self.w_star[:cut_layer]
        return float(0.5 * np.sum(self.weights * np.sum(diff * diff, axis=1)))


def build_quadratic_task(centers, weights) -> QuadraticTask:
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim == 1:
        centers = centers[:, None]  # scalar centers, one per client
    w = check_weights(weights)
    if len(w) != len(centers):
        raise ShapeError(f"{len(w)} weights for {len(centers)} centers")
    w_star = sum(p * c for p, c in zip(w, centers))
    return QuadraticTask(centers, w, [QuadraticObjective(c) for c in centers], np.asarray(w_star))


def quadratic_specs(dim: int) -> list:
    return [LayerSpec(1, 1, "identity") for _ in range(dim)]


def as_params(w) -> ModelParams:
    """Pack a vector into the chained-bias model layout."""
    w = np.asarray(w, dtype=np.float64).ravel()
    return ModelParams([(np.zeros((1, 1)), np.array([x])) for x in w], quadratic_specs(len(w)), "mse")


def coords(params: ModelParams) -> np.ndarray:
    if not params.layers:
        return np.zeros(0)
    return np.array([b[0] for _, b in params.layers])


@dataclass
class QuadraticData:
    """Sampled quadratic task: per-client target samples and the task they induce."""

    dataset: Dataset
    shards: list
    task: QuadraticTask
    per_coord_var: np.ndarray  # population variance of each client's targets, per coordinate

    def sigma_sq(self, batch_size: int) -> np.ndarray:
        """Exact ``E||g(batch) - g_full||^2`` for batches drawn without replacement."""
        out = []
        for shard, var in zip(self.shards, self.per_coord_var):
            D = len(shard)
            B = min(batch_size, D)
            fpc = (D - B) / (D - 1) if D > 1 else 0.0
            out.append(float(var.sum()) / B * fpc)
        return np.array(out)

    def R_sq(self, batch_size: int, radius: float) -> float:
        """``sup E||g_n(w; batch)||^2`` over the ball of ``radius`` around w*."""
        dist = np.linalg.norm(self.task.centers - self.task.w_star, axis=1)
        return float(np.max((dist + radius) ** 2 + self.sigma_sq(batch_size)))


def make_quadratic_data(centers, per_client: int, noise_std: float, seed, weights=None) -> QuadraticData:
    """Draw ``per_client`` Gaussian targets around each center.

    The task's centers are the realised per-client sample means, so the
    empirical objectives are exactly ``1/2||w - c_n||^2`` plus a constant.
    """
    centers = np.asarray(centers, dtype=np.float64)
    N, d = centers.shape
    rng = np.random.default_rng(seed)
    targets = np.concatenate([c + noise_std * rng.standard_normal((per_client, d)) for c in centers])
    shards, means, var = [], [], []
    weights = np.full(N, 1.0 / N) if weights is None else np.asarray(weights, dtype=np.float64)
    for n in range(N):
        idx = np.arange(n * per_client, (n + 1) * per_client)
        shards.append(Shard(idx, float(weights[n]), n))
        means.append(targets[idx].mean(axis=0))
        var.append(targets[idx].var(axis=0))
    dataset = Dataset(np.zeros((N * per_client, 0)), targets, None)
    return QuadraticData(dataset, shards, build_quadratic_task(np.array(means), weights), np.array(var))


class QuadraticNet:
    """Split-training hooks for the quadratic task (same surface as :class:`~mbsfl.nn.DenseNet`).

    The smashed data of a batch is the client coordinates repeated per row;
    the server scores it as ``1/2||z_j - t_j,c||^2 + 1/2||w_s - t_j,s||^2``.
    """

    def client_forward(self, client_part, X, y, client_id=0):
        n = len(y)
        z = np.tile(coords(client_part), (n, 1))
        return SmashedData(z, y, client_id), ForwardCache(inputs=np.asarray(X), acts=[z])

    def server_grads(self, server_part, smashed):
        z = smashed.activations
        t = np.asarray(smashed.labels, dtype=np.float64)
        n, cut = z.shape
        if t.shape[1] != cut + len(server_part):
            raise ShapeError(f"targets of width {t.shape[1]} for {cut}+{len(server_part)} coordinates")
        rc = z - t[:, :cut]
        rs = coords(server_part) - t[:, cut:]
        loss = 0.5 * float(np.mean(np.sum(rc * rc, axis=1) + np.sum(rs * rs, axis=1)))
        g_s = (rs / n).sum(axis=0)
        grads = ModelParams([(np.zeros((1, 1)), np.array([g])) for g in g_s], server_part.specs, server_part.head)
        return loss, grads, rc / n

    def client_backward(self, client_part, cache, grad_z):
        g = np.asarray(grad_z).sum(axis=0)
        return ModelParams([(np.zeros((1, 1)), np.array([x])) for x in g], client_part.specs, client_part.head)

    def evaluate(self, model, X, y):
        r = coords(model) - np.asarray(y, dtype=np.float64)
        return 0.5 * float(np.mean(np.sum(r * r, axis=1))), None


def ball_radius(w0, w_star) -> float:
    return math.dist(np.ravel(w0), np.ravel(w_star))
