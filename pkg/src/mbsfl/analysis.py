"""Convergence-bound calculators, empirical bound checks and gradient-variance diagnostics.

The bound checks compare seed means against bounds on expectations, so they
take a list of run logs (one per seed) whose logged steps line up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .schedules import gamma as schedule_gamma


@dataclass
class BoundInputs:
    R: float
    mu: float = 1.0
    S: float = 1.0
    N: int = 1
    E: int = 1
    M: int = 1
    delta: float = 0.0
    sigma_sq_weighted: float = 0.0
    Gamma: float = 0.0
    gamma: float | None = None
    d0_server: float = 0.0
    d0_client: float = 0.0
    i: int = 0

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = schedule_gamma(self.S, self.mu, self.E, self.M)
        for name in ("R", "mu", "S", "N", "E", "M", "delta", "sigma_sq_weighted", "Gamma", "gamma",
                     "d0_server", "d0_client", "i"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.mu > self.S:
            raise ValueError(f"mu={self.mu} exceeds S={self.S}")
        if self.gamma < schedule_gamma(self.S, self.mu, self.E, self.M) - 1e-12:
            raise ValueError(f"gamma={self.gamma} below max(8S/mu - 1, EM)")

    def at(self, i: int) -> "BoundInputs":
        return BoundInputs(**{**self.__dict__, "i": i})


@dataclass
class BoundReport:
    server_bound: float | None = None
    client_bound: float | None = None
    theorem_bound: float | None = None
    side: str | None = None
    steps: list = field(default_factory=list)
    bound_trajectory: list = field(default_factory=list)
    empirical_trajectory: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def violation_count(self) -> int:
        return len(self.violations)

    def to_dict(self) -> dict:
        return {
            "server_bound": self.server_bound,
            "client_bound": self.client_bound,
            "theorem_bound": self.theorem_bound,
            "side": self.side,
            "steps": [int(s) for s in self.steps],
            "bound_trajectory": [float(b) for b in self.bound_trajectory],
            "empirical_trajectory": [float(e) for e in self.empirical_trajectory],
            "violations": [int(v) for v in self.violations],
            "violation_count": self.violation_count,
        }


def prop1_bound(inputs: BoundInputs) -> float:
    """Server-side gap ``(8R^2 + mu^2 N^2 (gamma+1) d0) / (mu^2 N^2 (gamma+i))``."""
    mn = inputs.mu ** 2 * inputs.N ** 2
    return (8.0 * inputs.R ** 2 + mn * (inputs.gamma + 1.0) * inputs.d0_server) / (mn * (inputs.gamma + inputs.i))


def prop2_H(inputs: BoundInputs) -> float:
    EM = inputs.E * inputs.M
    return (6.0 * EM * inputs.R ** 2 + 12.0 * EM ** 2 * inputs.delta ** 2 + 6.0 * inputs.S * inputs.Gamma
            + inputs.sigma_sq_weighted)


def prop2_bound(inputs: BoundInputs) -> float:
    """Client-side gap ``(4H + mu^2 (gamma+1) d0) / (mu^2 (gamma+i))``."""
    mu2 = inputs.mu ** 2
    return (4.0 * prop2_H(inputs) + mu2 * (inputs.gamma + 1.0) * inputs.d0_client) / (mu2 * (inputs.gamma + inputs.i))


def combine_bounds(server_bound: float, client_bound: float, S: float) -> float:
    return S * (server_bound + client_bound) / 2.0


def theorem1_bound(inputs: BoundInputs) -> BoundReport:
    ls, lc = prop1_bound(inputs), prop2_bound(inputs)
    return BoundReport(server_bound=ls, client_bound=lc, theorem_bound=combine_bounds(ls, lc, inputs.S))


def _as_logs(runlogs):
    return runlogs if isinstance(runlogs, (list, tuple)) else [runlogs]


def _seed_mean(runlogs, column: str):
    logs = _as_logs(runlogs)
    steps = logs[0].steps()
    for log in logs[1:]:
        if not np.array_equal(log.steps(), steps):
            raise ValueError("run logs were recorded at different steps")
    values = np.stack([log.column(column) for log in logs])
    if np.isnan(values).any():
        raise ValueError(f"run logs are missing {column!r}")
    return steps, values.mean(axis=0)


def check_trajectory_vs_bound(runlogs, inputs: BoundInputs, side: str, tol: float = 0.05) -> BoundReport:
    """Compare the seed-mean squared distance to w* with the bound at every logged step."""
    if side not in ("server", "client"):
        raise ValueError("side must be 'server' or 'client'")
    steps, emp = _seed_mean(runlogs, "dist_sq_server" if side == "server" else "dist_sq_client")
    fn = prop1_bound if side == "server" else prop2_bound
    bounds = np.array([fn(inputs.at(int(i))) for i in steps])
    viol = [int(i) for i, e, b in zip(steps, emp, bounds) if e > b * (1.0 + tol)]
    report = BoundReport(side=side, steps=list(steps), bound_trajectory=list(bounds),
                         empirical_trajectory=list(emp), violations=viol)
    if side == "server":
        report.server_bound = float(bounds[-1])
    else:
        report.client_bound = float(bounds[-1])
    return report


def window_variance(grads) -> float:
    """Population variance over rows, per coordinate, summed over coordinates."""
    grads = np.asarray(grads, dtype=np.float64)
    return float(np.sum(np.var(grads, axis=0)))


across_clients_variance = window_variance


def grad_variance_at_client(runlog, client_id: int, window: int, cut_layer: int, end_step: int | None = None) -> float:
    """Variance of one client's client-side gradients over a trailing window, divided by ``L_c``."""
    if cut_layer < 1:
        raise ValueError("the metric needs a non-empty client side (L_c >= 1)")
    logged = sorted(runlog.client_grads)
    end = logged[-1] if end_step is None else end_step
    steps = [s for s in logged if end - window < s <= end]
    if len(steps) < 2:
        raise ValueError(f"window ending at step {end} holds {len(steps)} logged gradients, need 2")
    return window_variance([runlog.client_grads[s][client_id] for s in steps]) / cut_layer


def grad_variance_across_clients(runlog, step_i: int, cut_layer: int) -> float:
    """Variance across clients of the client-side gradients at one step, divided by ``L_c``."""
    if cut_layer < 1:
        raise ValueError("the metric needs a non-empty client side (L_c >= 1)")
    if step_i not in runlog.client_grads:
        raise ValueError(f"no client gradients logged at step {step_i}")
    return across_clients_variance(runlog.client_grads[step_i]) / cut_layer


@dataclass
class LemmaReport:
    name: str
    steps: list
    bound: list
    empirical: list
    violations: list

    @property
    def violation_count(self) -> int:
        return len(self.violations)

    def to_dict(self) -> dict:
        return {"name": self.name, "steps": [int(s) for s in self.steps], "bound": [float(b) for b in self.bound],
                "empirical": [float(e) for e in self.empirical], "violations": [int(v) for v in self.violations],
                "violation_count": self.violation_count}


def divergence_bound(eta: float, R: float, delta: float, E: int, M: int) -> float:
    EM = E * M
    return 3.0 * EM * R ** 2 * eta ** 2 + 6.0 * EM ** 2 * eta ** 2 * delta ** 2


def check_divergence_lemma(runlogs, R_hat: float, delta_hat: float, E: int, M: int, tol: float = 0.05) -> LemmaReport:
    """Seed-mean client divergence against ``3EMR^2 eta^2 + 6E^2M^2 eta^2 delta^2`` per step.

    ``eta`` is the client learning rate used by that step.
    """
    steps, emp = _seed_mean(runlogs, "divergence")
    etas = _as_logs(runlogs)[0].column("eta_c")
    keep = ~np.isnan(etas)  # the initial record has no step
    steps, emp, etas = steps[keep], emp[keep], etas[keep]
    if len(steps) == 0:
        raise ValueError("run logs hold no per-step records")
    bounds = np.array([divergence_bound(eta, R_hat, delta_hat, E, M) for eta in etas])
    viol = [int(i) for i, e, b in zip(steps, emp, bounds) if e > b * (1.0 + tol)]
    return LemmaReport("divergence", list(steps), list(bounds), list(emp), viol)


def check_variance_lemma(runlogs, sigma, p, tol: float = 0.05) -> LemmaReport:
    """Mean of ``||g_bar - g(batch)||^2`` over all logged steps and seeds against ``sum p_n^2 sigma_n^2``."""
    logs = _as_logs(runlogs)
    samples = np.concatenate([log.column("variance_sample")[1:] for log in logs])
    if samples.size == 0 or np.isnan(samples).any():
        raise ValueError("run logs are missing variance samples (enable log_lemma_terms)")
    bound = float(np.sum(np.asarray(p) ** 2 * np.asarray(sigma) ** 2))
    mean = float(samples.mean())
    viol = [0] if mean > bound * (1.0 + tol) else []
    return LemmaReport("variance", [int(logs[0].records[-1].i)], [bound], [mean], viol)


def rate_fit_arrays(steps, distances, gamma_: float) -> tuple[float, float, float]:
    """Least squares of ``log(distance)`` on ``log(gamma + i)``: (slope, intercept, r^2)."""
    steps = np.asarray(steps, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    if len(steps) < 10:
        raise ValueError(f"need at least 10 points, got {len(steps)}")
    if not (distances > 0).all():
        raise ValueError("distances must be positive")
    x = np.log(gamma_ + steps)
    y = np.log(distances)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def rate_fit(runlogs, gamma_: float, column: str = "dist_sq", min_step: int = 1) -> tuple[float, float, float]:
    """Log-log rate fit of the seed-mean distance to w*, over logged steps ``>= min_step``."""
    steps, mean = _seed_mean(runlogs, column)
    keep = steps >= min_step
    return rate_fit_arrays(steps[keep], mean[keep], gamma_)


def quadratic_bound_inputs(qdata, cut_layer: int, batch_size: int, E: int, M: int, w0, radius=None) -> BoundInputs:
    """Exact constants of a sampled quadratic task (mu = S = 1).

    ``R`` is the supremum of the second moment over the ball around w* that
    contains ``w0``; ``radius`` overrides that ball.
    """
    task = qdata.task
    w0 = np.asarray(w0, dtype=np.float64)
    rho = math.dist(w0, task.w_star) if radius is None else radius
    sigma_sq = qdata.sigma_sq(batch_size)
    diff = w0 - task.w_star
    return BoundInputs(
        R=math.sqrt(qdata.R_sq(batch_size, rho)), mu=1.0, S=1.0, N=len(task.weights), E=E, M=M,
        delta=task.delta(), sigma_sq_weighted=float(np.sum(task.weights ** 2 * sigma_sq)),
        Gamma=task.gap(cut_layer), d0_server=float(np.sum(diff[cut_layer:] ** 2)),
        d0_client=float(np.sum(diff[:cut_layer] ** 2)),
    )
