import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from fedmil.datasets import SyntheticSpec, generate_synthetic
from fedmil.errors import (ConfigError, DegenerateClusteringError, InfeasiblePartitionError,
                           UnsupportedSchemeError)
from fedmil.partition import (DirichletConfig, PartitionPlan, PowerLawConfig, UtilizationConfig,
                              apply_utilization, cluster_counts, kmeans, kmeans_clusters,
                              largest_remainder, partition_type1, partition_type2,
                              power_law_targets, sample_dirichlet)


@pytest.fixture(scope="module")
def binary_ds():
    return generate_synthetic(SyntheticSpec(num_bags=4000, instances_per_bag=2, feature_dim=3,
                                            num_latent_clusters=4, rng_seed=11))


def test_targets_flat_when_beta_zero():
    assert np.allclose(power_law_targets(50, 0.0), 0.9)


def test_targets_linear_ramp():
    t = power_law_targets(9, 1.0)
    assert np.allclose(t, 0.9 * np.arange(2, 11) / 10)
    assert t[-1] == pytest.approx(0.9)


def test_targets_clamped():
    assert power_law_targets(5, 1.0, v_scale=1.0).max() == 1.0


def _assert_disjoint(plan, n):
    allpos = np.concatenate(plan.shards + [plan.remainder])
    assert len(np.unique(allpos)) == len(allpos)
    assert len(allpos) <= n


@pytest.mark.parametrize("beta", [0.2, 0.5, 1.0])
def test_type1_fidelity(binary_ds, beta):
    plan = partition_type1(binary_ds, 100, PowerLawConfig(beta=beta, rng_seed=4))
    _assert_disjoint(plan, len(binary_ds))
    assert len(plan.holdout) == 10
    assert sorted(plan.holdout.values()) == [0] * 5 + [1] * 5
    for p, shard in enumerate(plan.shards):
        frac = binary_ds.labels[shard].mean()
        if p in plan.holdout:
            assert frac == plan.holdout[p]
        else:
            assert abs(frac - plan.proportions[p]) <= 1 / len(shard) + 1e-12
    sizes = plan.sizes()
    assert sizes.min() == sizes.max() == plan.config["resolved_shard_size"]
    assert len(plan.remainder) == len(binary_ds) - sizes.sum()


def test_type1_rejects_multiclass_and_overdemand(binary_ds):
    multi = generate_synthetic(SyntheticSpec(num_bags=40, num_classes=3, instances_per_bag=1,
                                             feature_dim=2))
    with pytest.raises(UnsupportedSchemeError):
        partition_type1(multi, 4, PowerLawConfig())
    with pytest.raises(InfeasiblePartitionError) as info:
        partition_type1(binary_ds, 100, PowerLawConfig(shard_size=500))
    assert info.value.client is not None


def test_type1_deterministic(binary_ds):
    cfg = PowerLawConfig(beta=0.5, rng_seed=9)
    a, b = partition_type1(binary_ds, 20, cfg), partition_type1(binary_ds, 20, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.shards, b.shards))
    assert a.to_json(binary_ds) == b.to_json(binary_ds)


def test_largest_remainder_oracle():
    assert largest_remainder([0.5, 0.3, 0.2], 7).tolist() == [4, 2, 1]
    assert largest_remainder([1, 1, 1], 10).tolist() == [4, 3, 3]
    assert largest_remainder([0.2, 0.8], 0).tolist() == [0, 0]
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = rng.random(7)
        total = int(rng.integers(0, 50))
        out = largest_remainder(w, total)
        quota = w / w.sum() * total
        assert out.sum() == total
        assert np.all(np.abs(out - quota) < 1)


def test_dirichlet_rows_and_concentration():
    rng = np.random.default_rng(0)
    small = sample_dirichlet(rng, 0.01, 200, 10)
    assert np.all(np.isfinite(small)) and np.allclose(small.sum(1), 1)
    assert np.median(small.max(1)) > 0.9
    flat = sample_dirichlet(rng, 1e6, 50, 10)
    assert np.allclose(flat, 0.1, atol=0.002)


def test_dirichlet_mean(rng):
    draws = sample_dirichlet(rng, 0.5, 20000, 4)
    assert np.allclose(draws.mean(0), 0.25, atol=0.01)
    # Var of a symmetric Dirichlet component: (1/K)(1-1/K)/(K*alpha+1)
    assert np.allclose(draws.var(0), 0.25 * 0.75 / 3, rtol=0.05)


@pytest.mark.parametrize("alpha", [0.2, 0.5, 1.0])
def test_type2_counts_match_apportionment(binary_ds, alpha):
    clusters = binary_ds.latent
    plan = partition_type2(binary_ds, 30, DirichletConfig(alpha, 4, rng_seed=2), clusters)
    _assert_disjoint(plan, len(binary_ds))
    assert sum(plan.sizes()) == len(binary_ds)
    expected = np.stack([largest_remainder(plan.proportions[:, c], int((clusters == c).sum()))
                         for c in range(4)], axis=1)
    assert np.array_equal(plan.counts, expected)
    if not plan.repairs:
        assert np.array_equal(cluster_counts(plan, clusters, 4), expected)


def test_type2_single_cluster(binary_ds):
    plan = partition_type2(binary_ds, 5, DirichletConfig(0.5, 1), np.zeros(len(binary_ds)))
    assert np.allclose(plan.proportions, 1.0)
    assert sum(plan.sizes()) == len(binary_ds)


def test_type2_repairs_empty_shards():
    ds = generate_synthetic(SyntheticSpec(num_bags=30, instances_per_bag=1, feature_dim=2,
                                          num_latent_clusters=3, rng_seed=0))
    plan = partition_type2(ds, 25, DirichletConfig(0.05, 3, rng_seed=2), ds.latent)
    assert plan.sizes().min() >= 1
    assert len(plan.repairs) == 2
    for donor, target, pos in plan.repairs:
        assert plan.shards[target].tolist() == [pos]
    with pytest.raises(InfeasiblePartitionError):
        partition_type2(ds, 40, DirichletConfig(0.5, 3), ds.latent)


def test_type2_bad_cluster_map(binary_ds):
    with pytest.raises(ConfigError):
        partition_type2(binary_ds, 5, DirichletConfig(0.5, 2), np.zeros(3))
    with pytest.raises(ConfigError):
        DirichletConfig(alpha=0.0)


def test_plan_json_round_trip(binary_ds):
    plan = partition_type2(binary_ds, 7, DirichletConfig(0.5, 4), binary_ds.latent)
    for ds in (binary_ds, None):
        back = PartitionPlan.from_json(plan.to_json(ds), ds)
        assert all(np.array_equal(a, b) for a, b in zip(plan.shards, back.shards))
        assert np.array_equal(back.counts, plan.counts)


def test_utilization(binary_ds):
    plan = partition_type2(binary_ds, 10, DirichletConfig(0.5, 4), binary_ds.latent)
    cut = apply_utilization(plan, UtilizationConfig(0.3, rng_seed=1))
    for full, part in zip(plan.shards, cut.shards):
        assert len(part) == int(np.ceil(0.3 * len(full) - 1e-9))
        assert set(part) <= set(full)
    assert cut.utilization == 0.3
    assert apply_utilization(plan, UtilizationConfig(1.0)) is plan
    ten = PartitionPlan([np.arange(10)], "type2", {}, np.ones((1, 1)))
    assert len(apply_utilization(ten, UtilizationConfig(0.3)).shards[0]) == 3
    with pytest.raises(ConfigError):
        UtilizationConfig(0.0)


def test_kmeans_separated_blobs(rng):
    centers = np.array([[0, 0], [20, 0], [0, 20]], float)
    X = np.concatenate([c + rng.normal(size=(50, 2)) for c in centers])
    labels, found, inertia = kmeans(X, 3, rng_seed=1)
    truth = np.repeat(np.arange(3), 50)
    cm = np.zeros((3, 3))
    np.add.at(cm, (truth, labels), 1)
    rows, cols = linear_sum_assignment(-cm)
    assert cm[rows, cols].sum() == 150
    assert inertia == pytest.approx(((X - found[labels]) ** 2).sum())


def test_kmeans_degenerate():
    with pytest.raises(DegenerateClusteringError):
        kmeans(np.ones((10, 2)), 2)


def test_bag_clusters_recover_latent():
    ds = generate_synthetic(SyntheticSpec(num_bags=300, instances_per_bag=10, feature_dim=8,
                                          num_latent_clusters=4, cluster_scale=8.0, rng_seed=5))
    bag_clusters, _ = kmeans_clusters(ds, 4, rng_seed=0)
    cm = np.zeros((4, 4))
    np.add.at(cm, (ds.latent, bag_clusters), 1)
    rows, cols = linear_sum_assignment(-cm)
    assert cm[rows, cols].sum() / len(ds) > 0.9


@pytest.mark.slow
def test_default_synthetic_clusters_match_latent():
    ds = generate_synthetic(SyntheticSpec(num_bags=4500, rng_seed=1))
    bag_clusters, _ = kmeans_clusters(ds, 10, rng_seed=0)
    cm = np.zeros((10, 10))
    np.add.at(cm, (ds.latent, bag_clusters), 1)
    rows, cols = linear_sum_assignment(-cm)
    assert cm[rows, cols].sum() / len(ds) > 0.9
