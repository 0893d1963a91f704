from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbsfl.exceptions import ShapeError
from mbsfl.nn import SplitSpec, split_model
from mbsfl.quadratic import (QuadraticNet, as_params, ball_radius, build_quadratic_task, coords, make_quadratic_data,
                             quadratic_specs)


def test_task_constants_by_hand():
    task = build_quadratic_task([[0.0, 0.0], [2.0, 4.0]], [0.75, 0.25])
    np.testing.assert_allclose(task.w_star, [0.5, 1.0])
    # client 1 sits at distance sqrt(1.5^2 + 3^2)
    assert task.delta() == pytest.approx(np.sqrt(11.25), rel=1e-15)
    assert task.gap(0) == 0.0
    # 1/2 (0.75 * 0.25 + 0.25 * 2.25)
    assert task.gap(1) == pytest.approx(0.375, rel=1e-15)
    assert task.global_value(task.w_star) < task.global_value([0.0, 0.0])


def test_scalar_centers_and_weight_checks():
    task = build_quadratic_task([1.0, 3.0], [0.5, 0.5])
    assert task.dim == 1 and task.w_star.tolist() == [2.0]
    with pytest.raises(ShapeError):
        build_quadratic_task([1.0, 3.0], [1.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_w_star_is_stationary(N, d, seed):
    rng = np.random.default_rng(seed)
    p = rng.random(N) + 0.1
    task = build_quadratic_task(rng.standard_normal((N, d)), p / p.sum())
    g = sum(pn * f.grad(task.w_star) for pn, f in zip(task.weights, task.objectives))
    np.testing.assert_allclose(g, 0.0, atol=1e-12)
    assert task.gap(d) >= 0.0


def test_param_round_trip_and_split():
    w = np.array([0.25, -1.0, 3.0])
    p = as_params(w)
    assert len(p) == 3 and coords(p).tolist() == w.tolist()
    client, server = split_model(p, SplitSpec(1, 3))
    assert coords(client).tolist() == [0.25] and coords(server).tolist() == [-1.0, 3.0]
    assert coords(split_model(p, SplitSpec(0, 3))[0]).size == 0
    assert len(quadratic_specs(4)) == 4


def test_sample_means_become_centers():
    q = make_quadratic_data(np.array([[1.0, 2.0], [-1.0, 0.0]]), 50, 0.5, 3)
    for shard, c in zip(q.shards, q.task.centers):
        np.testing.assert_allclose(q.dataset.labels[shard.indices].mean(axis=0), c, atol=1e-15)
    assert [len(s) for s in q.shards] == [50, 50]


def test_sigma_sq_matches_batch_enumeration():
    q = make_quadratic_data(np.array([[0.0, 0.0]]), 5, 1.0, 0)
    t = q.dataset.labels
    full = t.mean(axis=0)
    for B in (1, 2, 3, 5):
        errs = [np.sum((t[list(c)].mean(axis=0) - full) ** 2) for c in combinations(range(5), B)]
        assert q.sigma_sq(B)[0] == pytest.approx(np.mean(errs), rel=1e-12, abs=1e-15)


def test_R_sq_covers_sampled_second_moment():
    q = make_quadratic_data(np.array([[1.0], [-1.0]]), 6, 0.5, 1)
    rho = 0.3
    w = q.task.w_star + rho
    t = q.dataset.labels
    # the bound is on the expected second moment, so average over every batch of size 2
    for shard in q.shards:
        avg = np.mean([np.sum((w - t[list(c)].mean(axis=0)) ** 2) for c in combinations(shard.indices, 2)])
        assert avg <= q.R_sq(2, rho) + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(0, 1000))
def test_quadratic_net_gradients_match_finite_differences(cut, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(3)
    t = rng.standard_normal((4, 3))
    net = QuadraticNet()
    client, server = split_model(as_params(w), SplitSpec(cut, 3))

    def loss(v):
        c, s = split_model(as_params(v), SplitSpec(cut, 3))
        return net.server_grads(s, net.client_forward(c, None, t)[0])[0]

    smashed, cache = net.client_forward(client, None, t)
    _, g_s, g_z = net.server_grads(server, smashed)
    g = np.concatenate([coords(net.client_backward(client, cache, g_z)), coords(g_s)])
    eps = 1e-6
    fd = np.array([(loss(w + eps * e) - loss(w - eps * e)) / (2 * eps) for e in np.eye(3)])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(g, w - t.mean(axis=0), atol=1e-14)


def test_quadratic_net_shape_error_and_evaluate():
    net = QuadraticNet()
    client, server = split_model(as_params([0.0, 0.0]), SplitSpec(1, 2))
    smashed, _ = net.client_forward(client, None, np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        net.server_grads(server, smashed)
    loss, acc = net.evaluate(as_params([1.0, 0.0]), None, np.zeros((2, 2)))
    assert loss == 0.5 and acc is None


def test_ball_radius():
    assert ball_radius([0.0, 0.0], [3.0, 4.0]) == 5.0
