"""
Feature bags and non-IID client splits
======================================

A synthetic bag set, then two ways of carving it into client shards:
label-ratio skew and cluster skew.
"""

import numpy as np

from fedmil.datasets import SyntheticSpec, generate_synthetic
from fedmil.partition import (DirichletConfig, PowerLawConfig, UtilizationConfig,
                              apply_utilization, cluster_counts, kmeans_clusters,
                              partition_type1, partition_type2)

# %%
# 600 bags of 20 instances each, 16 features, 4 hidden clusters.
ds = generate_synthetic(SyntheticSpec(num_bags=600, instances_per_bag=20, feature_dim=16,
                                      num_latent_clusters=4, rng_seed=0))
print(len(ds), "bags;", ds.features.shape[0], "instance rows; class counts",
      np.bincount(ds.labels))

# %%
# Label skew: the class-1 share climbs along the client index.
plan = partition_type1(ds, 10, PowerLawConfig(beta=0.8, rng_seed=1))
for p, shard in enumerate(plan.shards):
    tag = f"holdout({plan.holdout[p]})" if p in plan.holdout else f"target {plan.proportions[p]:.2f}"
    print(f"client {p}: {len(shard)} bags, class-1 share {ds.labels[shard].mean():.2f}  {tag}")
print("unassigned:", len(plan.remainder))

# %%
# Cluster skew: k-means on instances, a bag takes its majority cluster,
# and every client draws its own mix over clusters.
clusters, _ = kmeans_clusters(ds, 4, rng_seed=0)
plan = partition_type2(ds, 10, DirichletConfig(alpha=0.3, num_clusters=4, rng_seed=2), clusters)
print(cluster_counts(plan, clusters, 4))

# %%
# Keep 30% of every shard.
small = apply_utilization(plan, UtilizationConfig(0.3, rng_seed=3))
print(plan.sizes(), "->", small.sizes())
