import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpfl import autodiff as ad
from gpfl import data as gd


def _union(shards):
    return np.sort(np.concatenate([s.indices for s in shards]))


# --- generation -------------------------------------------------------------

def test_synthetic_is_deterministic_and_balanced():
    a = gd.gen_synthetic(8, 32, 1003, seed=5)
    b = gd.gen_synthetic(8, 32, 1003, seed=5)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=8)
    assert counts.max() - counts.min() <= 1


def test_separable_limit_nearest_mean():
    ds = gd.gen_synthetic(8, 32, 800, spread=1e-6, seed=0)
    means = np.stack([ds.features[ds.labels == u].mean(axis=0) for u in range(8)])
    pred = np.argmin(((ds.features[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert (pred == ds.labels).mean() == 1.0


def test_unit_range_scaling():
    ds = gd.gen_synthetic(4, 5, 200, spread=2.0, seed=1, unit_range=True)
    assert ds.features.min() == 0.0 and ds.features.max() == 1.0


def test_centralised_mlp_learns_default_clusters():
    """Centralised oracle: a plain MLP on spread 0.5 data passes 90% test accuracy well within 200 epochs."""
    from gpfl.nn import ModelSpec, extract_features, head_forward, init_parameters

    ds = gd.gen_synthetic(8, 32, 4000, spread=0.5, separation=3.0, seed=0)
    tr, te = gd.split_indices(ds.labels, 0.75, seed=0)
    m = init_parameters(ModelSpec(32, 16, 8), 0)
    params = list(m.backbone.extractor_parameters().values()) + list(m.backbone.head_parameters().values())
    rng = np.random.default_rng(0)
    X, Y = ds.features, ds.labels
    acc = 0.0
    for epoch in range(200):
        order = rng.permutation(tr)
        for s in range(0, len(order), 32):
            idx = order[s:s + 32]
            with ad.Graph() as g:
                loss = ad.softmax_cross_entropy(head_forward(m.backbone.head,
                                                             extract_features(m.backbone, ad.tensor(X[idx]))), Y[idx])
            g.backward(loss)
            for p in params:
                p.data = p.data - 0.05 * p.grad
                p.grad = None
        logits = head_forward(m.backbone.head, extract_features(m.backbone, ad.tensor(X[te])))
        acc = (logits.data.argmax(1) == Y[te]).mean()
        if acc > 0.9:
            break
    assert acc > 0.9 and epoch < 200


# --- csv --------------------------------------------------------------------

def test_csv_examples(tmp_path):
    p = tmp_path / "two.csv"
    p.write_text("0.0,1.0,0\n1.0,0.0,1\n")
    ds = gd.load_csv_dataset(p)
    assert (len(ds), ds.D, ds.U) == (2, 2, 2)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(gd.DatasetParseError):
        gd.load_csv_dataset(empty)


def test_csv_round_trip(tmp_path):
    ds = gd.gen_synthetic(3, 4, 50, seed=2)
    gd.save_csv_dataset(ds, tmp_path / "d.csv")
    back = gd.load_csv_dataset(tmp_path / "d.csv", U=3)
    np.testing.assert_allclose(back.features, ds.features, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_csv_errors_name_the_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x0,x1,label\n0.1,0.2,0\n0.3,abc,1\n")
    with pytest.raises(gd.DatasetParseError, match=":3:"):
        gd.load_csv_dataset(p)
    p.write_text("0.1,0.2,0\n0.3,1\n")
    with pytest.raises(gd.DatasetParseError, match=":2:"):
        gd.load_csv_dataset(p)
    p.write_text("0.1,0.2,0.5\n")
    with pytest.raises(gd.DatasetParseError, match="label"):
        gd.load_csv_dataset(p)


# --- splitting --------------------------------------------------------------

def test_split_examples():
    tr, te = gd.split_indices([0, 0, 1, 1], 0.75, seed=0)
    assert (len(tr), len(te)) == (3, 1)
    labels = np.array([0] * 4 + [1] * 6 + [2] * 5)
    for seed in range(20):
        tr, te = gd.split_indices(labels, 0.75, seed)
        assert set(tr) | set(te) == set(range(15)) and not set(tr) & set(te)
        for c in range(3):
            assert (labels[tr] == c).any() and (labels[te] == c).any()
    with pytest.raises(gd.SplitError):
        gd.split_indices([0], 0.75)


def test_largest_remainder_sums_exactly():
    r = np.random.default_rng(0)
    for _ in range(100):
        w = r.random(int(r.integers(1, 10)))
        total = int(r.integers(0, 1000))
        c = gd.largest_remainder(total, w)
        assert c.sum() == total and np.all(c >= 0)
        assert np.all(np.abs(c - w / w.sum() * total) < 1)


# --- partitioners -----------------------------------------------------------

def test_pathological_exhaustive_u10_n5():
    ds = gd.gen_synthetic(10, 4, 2000, seed=0)
    for seed in range(10):
        shards = gd.partition_pathological(ds, 5, 2, seed)
        np.testing.assert_array_equal(_union(shards), np.arange(2000))
        holders = np.zeros(10, int)
        for s in shards:
            labels = set(ds.labels[s.indices])
            assert len(labels) == 2
            for c in labels:
                holders[c] += 1
        assert np.all(holders == 1)
        again = gd.partition_pathological(ds, 5, 2, seed)
        assert gd.shard_hash(again) == gd.shard_hash(shards)


def test_pathological_single_client_gets_everything():
    ds = gd.gen_synthetic(4, 3, 40, seed=0)
    shards = gd.partition_pathological(ds, 1, 4, 0)
    np.testing.assert_array_equal(_union(shards), np.arange(40))


def test_pathological_overlapping_classes_use_unequal_chunks():
    ds = gd.gen_synthetic(8, 3, 1000, seed=0)
    shards = gd.partition_pathological(ds, 10, 2, 0)
    assert all(len(set(ds.labels[s.indices])) == 2 for s in shards)
    np.testing.assert_array_equal(_union(shards), np.arange(1000))
    with pytest.raises(gd.ConfigError):
        gd.partition_pathological(ds, 2, 2, 0)


def test_dirichlet_conservation_and_determinism():
    ds = gd.gen_synthetic(10, 4, 2000, seed=1)
    shards = gd.partition_dirichlet(ds, 5, 0.5, 4, seed=3)
    np.testing.assert_array_equal(_union(shards), np.arange(2000))
    per_class = sum(np.bincount(ds.labels[s.indices], minlength=10) for s in shards)
    np.testing.assert_array_equal(per_class, np.bincount(ds.labels, minlength=10))
    assert gd.shard_hash(gd.partition_dirichlet(ds, 5, 0.5, 4, seed=3)) == gd.shard_hash(shards)


def test_dirichlet_large_beta_is_near_uniform():
    ds = gd.gen_synthetic(8, 3, 8000, seed=0)
    shards = gd.partition_dirichlet(ds, 4, 1e6, seed=0)
    for s in shards:
        frac = np.bincount(ds.labels[s.indices], minlength=8) / len(s.indices)
        assert np.all(np.abs(frac - 1 / 8) <= 0.05 * 1 / 8 + 1e-3)


def test_dirichlet_small_beta_has_lower_entropy():
    def mean_entropy(beta, seed):
        ds = gd.gen_synthetic(8, 3, 2000, seed=seed)
        out = []
        for s in gd.partition_dirichlet(ds, 10, beta, seed=seed):
            p = np.bincount(ds.labels[s.indices], minlength=8) / len(s.indices)
            p = p[p > 0]
            out.append(-(p * np.log(p)).sum())
        return np.mean(out)

    for seed in range(20):
        assert mean_entropy(0.1, seed) < mean_entropy(1e6, seed)


def test_dirichlet_infeasible_raises():
    ds = gd.gen_synthetic(4, 3, 20, seed=0)
    with pytest.raises(gd.PartitionInfeasible):
        gd.partition_dirichlet(ds, 10, 0.01, min_samples=5, seed=0, max_retries=20)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_pathological_properties(U, N, seed):
    S = max(1, -(-U // N))  # smallest feasible class count
    S = min(S, U)
    ds = gd.gen_synthetic(U, 2, 40 * U, seed=seed)
    shards = gd.partition_pathological(ds, N, S, seed)
    np.testing.assert_array_equal(_union(shards), np.arange(len(ds)))
    assert all(len(set(ds.labels[s.indices])) == S for s in shards)


def test_sampling_seed_does_not_change_partition():
    from gpfl.config import ExperimentConfig
    from gpfl.experiment import make_shards

    base = ExperimentConfig(clients=6, n_samples=600, U=4, partition="pathological").validate()
    h = [gd.shard_hash(make_shards(base.replace(seed_sample=s, seed_init=s))) for s in range(3)]
    assert len(set(h)) == 1
    assert gd.shard_hash(make_shards(base.replace(seed_data=1))) != h[0]
