import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbsfl.data import (Dataset, Shard, check_shards, estimate_constants, gen_synthetic_classification,
                        holdout_split, label_entropy, load_idx, make_batch_plan, partition_noniid, shard_weights,
                        write_idx)
from mbsfl.exceptions import FormatError, ShapeError, WeightError
from mbsfl.quadratic import QuadraticNet, as_params, build_quadratic_task, make_quadratic_data


def test_synthetic_counts_and_labels():
    ds = gen_synthetic_classification(3, 2, 5, 1.0, 0)
    assert len(ds) == 10
    assert np.bincount(ds.labels).tolist() == [5, 5]


def test_synthetic_zero_spread_hits_centers():
    ds = gen_synthetic_classification(4, 3, 6, 0.0, 1)
    for k in range(3):
        rows = ds.features[ds.labels == k]
        assert (rows == rows[0]).all()
        assert np.linalg.norm(rows[0]) == pytest.approx(2.0, rel=1e-12)


def test_synthetic_deterministic():
    a = gen_synthetic_classification(4, 3, 6, 0.5, 9)
    b = gen_synthetic_classification(4, 3, 6, 0.5, 9)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_synthetic_preconditions():
    with pytest.raises(ValueError):
        gen_synthetic_classification(2, 1, 5, 1.0, 0)


def test_dataset_validation():
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ShapeError):
        Dataset(np.zeros((0, 2)), np.array([]), 2)


def test_holdout_split_sizes_and_disjointness():
    ds = gen_synthetic_classification(2, 2, 10, 1.0, 0)
    train, test = holdout_split(ds, 0.25, 3)
    assert len(train) == 15 and len(test) == 5
    rows = {tuple(r) for r in train.features} | {tuple(r) for r in test.features}
    assert len(rows) == 20


# ---------------------------------------------------------------- partitioner

def test_iid_partition_even():
    ds = gen_synthetic_classification(2, 10, 10, 1.0, 0)
    shards = partition_noniid(ds, 10, 0.0, seed=1)
    assert [len(s) for s in shards] == [10] * 10
    assert sorted(np.concatenate([s.indices for s in shards]).tolist()) == list(range(100))
    assert all(s.weight == pytest.approx(0.1) for s in shards)


def test_full_noniid_label_span():
    ds = gen_synthetic_classification(2, 10, 13, 1.0, 4)
    for s in partition_noniid(ds, 10, 1.0, seed=2):
        labels = np.unique(ds.labels[s.indices])
        assert labels.max() - labels.min() <= 1


def test_partition_deterministic():
    ds = gen_synthetic_classification(2, 4, 25, 1.0, 0)
    a = partition_noniid(ds, 3, 0.6, seed=5)
    b = partition_noniid(ds, 3, 0.6, seed=5)
    assert all(np.array_equal(x.indices, y.indices) and x.weight == y.weight for x, y in zip(a, b))


def test_partition_uniform_portion_size():
    # 0.1 * 100 must count as 10 uniform samples, not 9
    ds = gen_synthetic_classification(2, 10, 10, 1.0, 0)
    shards = partition_noniid(ds, 10, 0.9, seed=0)
    assert sum(len(s) for s in shards) == 100
    assert [len(s) for s in shards] == [10] * 10


def test_partition_remainder_goes_to_last_block():
    ds = gen_synthetic_classification(2, 2, 11, 1.0, 0)
    sizes = [len(s) for s in partition_noniid(ds, 4, 1.0, seed=0)]
    assert sizes == [5, 5, 5, 7]


def test_partition_weights_modes():
    ds = gen_synthetic_classification(2, 2, 11, 1.0, 0)
    by_size = partition_noniid(ds, 4, 1.0, "by_size", seed=0)
    assert [s.weight for s in by_size] == pytest.approx([5 / 22, 5 / 22, 5 / 22, 7 / 22])
    uniform = partition_noniid(ds, 4, 1.0, "uniform", seed=0)
    assert [s.weight for s in uniform] == [0.25] * 4
    with pytest.raises(ValueError):
        shard_weights([1, 2], "other")


def test_partition_preconditions():
    ds = gen_synthetic_classification(2, 2, 2, 1.0, 0)
    with pytest.raises(ValueError):
        partition_noniid(ds, 5, 0.0)
    with pytest.raises(ValueError):
        partition_noniid(ds, 2, 1.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 300), st.integers(1, 12), st.floats(0, 1), st.integers(0, 10 ** 6))
def test_partition_coverage_and_disjointness(D, N, r, seed):
    N = min(N, D)
    labels = np.random.default_rng(seed).integers(0, 5, size=D)
    ds = Dataset(np.zeros((D, 1)), labels, 5)
    shards = partition_noniid(ds, N, r, seed=seed)
    idx = np.concatenate([s.indices for s in shards])
    assert len(idx) == D and len(np.unique(idx)) == D
    check_shards(shards)


def test_check_shards_weight_sum():
    with pytest.raises(WeightError):
        check_shards([Shard(np.arange(2), 0.3, 0), Shard(np.arange(2, 4), 0.3, 1)])


def test_label_entropy_values():
    ds = Dataset(np.zeros((4, 1)), np.array([0, 0, 1, 1]), 2)
    assert label_entropy(ds, Shard(np.arange(4), 1.0, 0)) == pytest.approx(np.log(2))
    assert label_entropy(ds, Shard(np.array([0, 1]), 1.0, 0)) == 0.0


# ---------------------------------------------------------------- batch plans

def test_batch_plan_exact_partition():
    shard = Shard(np.arange(100, 164), 1.0, 0)
    plan = make_batch_plan(shard, 32, 2, [0, 0, 1, 1])
    assert len(plan.batches) == 2
    assert sorted(np.concatenate(plan.batches).tolist()) == list(range(100, 164))


def test_batch_plan_wraps_around():
    shard = Shard(np.arange(10), 1.0, 0)
    (batch,) = make_batch_plan(shard, 32, 1, 5).batches
    counts = np.bincount(batch, minlength=10)
    assert len(batch) == 32 and set(counts.tolist()) <= {3, 4}


def test_batch_plan_deterministic_and_seed_sensitive():
    shard = Shard(np.arange(50), 1.0, 0)
    a = make_batch_plan(shard, 8, 3, [1, 2])
    b = make_batch_plan(shard, 8, 3, [1, 2])
    c = make_batch_plan(shard, 8, 3, [1, 3])
    assert all(np.array_equal(x, y) for x, y in zip(a.batches, b.batches))
    assert not all(np.array_equal(x, y) for x, y in zip(a.batches, c.batches))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 10), st.integers(1, 6), st.integers(0, 1000))
def test_batch_plan_without_replacement_in_first_lap(size, B, M, seed):
    shard = Shard(np.arange(size) * 3, 1.0, 0)
    plan = make_batch_plan(shard, B, M, seed)
    drawn = np.concatenate(plan.batches)
    assert len(drawn) == B * M
    first_lap = drawn[: min(size, B * M)]
    assert set(drawn.tolist()) <= set(shard.indices.tolist())
    if B * M <= size:
        assert len(np.unique(first_lap)) == len(first_lap)


def test_batch_plan_errors():
    with pytest.raises(ShapeError):
        make_batch_plan(Shard(np.arange(0), 1.0, 3), 4, 1, 0)
    with pytest.raises(ValueError):
        make_batch_plan(Shard(np.arange(4), 1.0, 0), 0, 1, 0)


# ---------------------------------------------------------------- IDX

def test_idx_round_trip(tmp_path):
    images = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]], dtype=np.uint8)
    write_idx(images, [3, 7], tmp_path / "img", tmp_path / "lab")
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.features.tolist() == [[0.0, 1.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0]]
    assert ds.labels.tolist() == [3, 7]


def test_idx_bad_magic(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">4I", 0, 1, 1, 1) + b"\x00")
    (tmp_path / "lab").write_bytes(struct.pack(">2I", 0x801, 1) + b"\x00")
    with pytest.raises(FormatError, match="magic"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_count_mismatch(tmp_path):
    write_idx(np.zeros((3, 2, 2), dtype=np.uint8), [0, 1], tmp_path / "img", tmp_path / "lab")
    with pytest.raises(FormatError, match="3 images but 2 labels"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated(tmp_path):
    write_idx(np.zeros((2, 2, 2), dtype=np.uint8), [0, 1], tmp_path / "img", tmp_path / "lab")
    data = (tmp_path / "img").read_bytes()
    (tmp_path / "img").write_bytes(data[:-1])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(tmp_path / "img", tmp_path / "lab")
    (tmp_path / "lab").write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")


# ---------------------------------------------------------------- constants

def test_estimate_constants_full_batch_zero_sigma():
    q = make_quadratic_data(np.array([[0.0, 1.0], [2.0, -1.0]]), 8, 0.5, 0)
    est = estimate_constants(q.dataset, q.shards, as_params([0.3, 0.2]), QuadraticNet(), probes=3, batch_size=8)
    assert np.all(est.sigma_n == 0.0)
    assert est.probe_count == 3


def test_estimate_constants_single_client_zero_delta():
    q = make_quadratic_data(np.array([[1.0, 2.0]]), 20, 1.0, 0)
    est = estimate_constants(q.dataset, q.shards, as_params([0.0, 0.0]), QuadraticNet(), probes=2, batch_size=4)
    assert est.delta_hat == 0.0
    assert est.sigma_n[0] > 0 and est.R_hat > 0


def test_estimate_constants_delta_matches_center_spread():
    # noiseless targets make the realised centers exact: 0 and 6 in one dimension
    q = make_quadratic_data(np.array([[0.0], [6.0]]), 5, 0.0, 0)
    for w in ([-4.0], [10.0]):
        est = estimate_constants(q.dataset, q.shards, as_params(w), QuadraticNet(), probes=3, batch_size=5)
        assert est.delta_hat == pytest.approx(3.0, abs=1e-12)


def test_estimate_constants_dense_net():
    from mbsfl.nn import DenseNet, LayerSpec, init_model

    ds = gen_synthetic_classification(3, 3, 20, 1.0, 0)
    shards = partition_noniid(ds, 3, 0.5, seed=0)
    model = init_model([LayerSpec(3, 4, "tanh"), LayerSpec(4, 3, "softmax_xent_head")], 0)
    est = estimate_constants(ds, shards, model, DenseNet(), probes=2, batch_size=5)
    assert est.R_hat > 0 and est.delta_hat > 0 and (est.sigma_n > 0).all()
    d = est.to_dict()
    assert set(d) == {"sigma_n", "R_hat", "delta_hat", "probe_count"}


def test_build_quadratic_task_examples():
    task = build_quadratic_task([1.0, 3.0], [0.5, 0.5])
    assert task.w_star.tolist() == [2.0]
    single = build_quadratic_task([[4.0, -1.0]], [1.0])
    assert single.w_star.tolist() == [4.0, -1.0] and single.global_value(single.w_star) == 0.0
    three = build_quadratic_task([0.0, 0.0, 6.0], [1 / 3, 1 / 3, 1 / 3])
    assert three.w_star[0] == pytest.approx(2.0, abs=1e-15)
    brute = max(float(np.sum((three.objectives[n].grad(three.w_star) - 0.0) ** 2)) for n in range(3))
    assert three.delta() ** 2 == pytest.approx(16.0, abs=1e-12) and brute == pytest.approx(16.0, abs=1e-12)
    with pytest.raises(WeightError):
        build_quadratic_task([1.0, 3.0], [0.5, 0.6])
