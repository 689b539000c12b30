"""Non-IID client partitioning and data-utilization subsampling.

Type I imbalances the binary label ratio across clients with a power law,
Type II draws a Dirichlet mixture over k-means cluster labels per client.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateClusteringError,
    InfeasiblePartitionError,
    UnsupportedSchemeError,
)

__all__ = [
    "PowerLawConfig", "DirichletConfig", "UtilizationConfig", "PartitionPlan",
    "power_law_targets", "partition_type1", "kmeans", "kmeans_clusters",
    "sample_dirichlet", "largest_remainder", "partition_type2", "apply_utilization",
]


@dataclass(frozen=True)
class PowerLawConfig:
    """Class-1 fraction of client p (1-based) is ``clamp(v_scale * (p + h_shift) ** beta)``.

    ``v_scale=None`` resolves to ``0.9 / (N + h_shift) ** beta`` so that targets
    top out at 0.9. ``shard_size=None`` picks the largest equal size that both
    class pools can satisfy.
    """

    beta: float = 0.5
    v_scale: float | None = None
    h_shift: float = 1.0
    holdout_fraction: float = 0.1
    rng_seed: int = 0
    shard_size: int | None = None

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")
        if not self.h_shift >= 0:
            raise ConfigError("h_shift must be >= 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.shard_size is not None and self.shard_size < 1:
            raise ConfigError("shard_size must be >= 1")


@dataclass(frozen=True)
class DirichletConfig:
    alpha: float = 0.5
    num_clusters: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"Dirichlet alpha must be > 0, got {self.alpha}")
        if self.num_clusters < 1:
            raise ConfigError("num_clusters must be >= 1")


@dataclass(frozen=True)
class UtilizationConfig:
    rate: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ConfigError(f"utilization rate must lie in (0, 1], got {self.rate}")


@dataclass
class PartitionPlan:
    """Per-client shards as arrays of dataset positions.

    ``proportions`` is the per-client target table: class-1 fraction (Type I,
    shape ``(N,)``) or Dirichlet draw (Type II, shape ``(N, C)``). ``counts``
    is the integer allocation derived from it before any repair. ``repairs``
    lists ``(from_client, to_client, position)`` moves made to fill empty
    shards; ``remainder`` holds positions left unassigned.
    """

    shards: list
    scheme: str
    config: dict
    proportions: np.ndarray
    counts: np.ndarray | None = None
    holdout: dict = field(default_factory=dict)
    remainder: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    repairs: list = field(default_factory=list)
    utilization: float = 1.0

    @property
    def n_clients(self):
        return len(self.shards)

    def sizes(self):
        return np.array([len(s) for s in self.shards])

    def to_json(self, ds=None) -> str:
        """JSON audit record. Shards are written as bag ids when ``ds`` is given."""
        def ids(shard):
            return [int(v) for v in (ds.bag_ids[shard] if ds is not None else shard)]

        doc = {
            "scheme": self.scheme,
            "config": self.config,
            "utilization": self.utilization,
            "shards": {str(p): ids(s) for p, s in enumerate(self.shards)},
            "proportions": np.asarray(self.proportions).tolist(),
            "counts": None if self.counts is None else np.asarray(self.counts).tolist(),
            "holdout": {str(k): v for k, v in self.holdout.items()},
            "remainder": ids(self.remainder),
            "repairs": [list(map(int, r)) for r in self.repairs],
            "id_space": "bag_id" if ds is not None else "position",
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text, ds=None):
        doc = json.loads(text)
        lookup = None
        if doc["id_space"] == "bag_id":
            if ds is None:
                raise ConfigError("plan stores bag ids; pass the dataset to resolve them")
            lookup = {int(b): i for i, b in enumerate(ds.bag_ids)}

        def pos(values):
            if lookup is None:
                return np.asarray(values, dtype=np.int64)
            return np.asarray([lookup[v] for v in values], dtype=np.int64)

        shards = [pos(doc["shards"][str(p)]) for p in range(len(doc["shards"]))]
        return cls(
            shards=shards, scheme=doc["scheme"], config=doc["config"],
            proportions=np.asarray(doc["proportions"], dtype=float),
            counts=None if doc["counts"] is None else np.asarray(doc["counts"], dtype=np.int64),
            holdout={int(k): v for k, v in doc["holdout"].items()},
            remainder=pos(doc["remainder"]),
            repairs=[tuple(r) for r in doc["repairs"]],
            utilization=doc["utilization"],
        )


def _repair_empty(shards, repairs):
    """Move one bag from the largest shard into each empty one."""
    for p, shard in enumerate(shards):
        if len(shard) == 0:
            donor = int(np.argmax([len(s) for s in shards]))
            if len(shards[donor]) < 2:
                raise InfeasiblePartitionError(
                    f"client {p} is empty and no shard has a bag to spare", client=p)
            moved = shards[donor][-1]
            shards[donor] = shards[donor][:-1]
            shards[p] = np.array([moved], dtype=np.int64)
            repairs.append((donor, p, int(moved)))


# --- Type I ------------------------------------------------------------------------

def power_law_targets(n_clients, beta, v_scale=None, h_shift=1.0):
    """Clamped class-1 fractions for clients 1..N."""
    if v_scale is None:
        v_scale = 0.9 / (n_clients + h_shift) ** beta
    p = np.arange(1, n_clients + 1, dtype=float)
    return np.clip(v_scale * (p + h_shift) ** beta, 0.0, 1.0)


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def partition_type1(ds, n_clients: int, cfg: PowerLawConfig) -> PartitionPlan:
    if ds.num_classes != 2:
        raise UnsupportedSchemeError(
            f"power-law partitioning needs binary labels, dataset has {ds.num_classes} classes")
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    rng = np.random.default_rng(cfg.rng_seed)
    targets = power_law_targets(n_clients, cfg.beta, cfg.v_scale, cfg.h_shift)

    n_hold = int(round(cfg.holdout_fraction * n_clients))
    hold_clients = np.sort(rng.choice(n_clients, size=n_hold, replace=False))
    hold_order = rng.permutation(hold_clients)
    holdout = {int(c): 0 for c in hold_order[: n_hold - n_hold // 2]}
    holdout.update({int(c): 1 for c in hold_order[n_hold - n_hold // 2:]})
    frac = targets.copy()
    for c, label in holdout.items():
        frac[c] = float(label)

    pools = [rng.permutation(np.flatnonzero(ds.labels == k)) for k in (0, 1)]

    def demand(size):
        ones = _round_half_up(frac * size)
        return ones, size - ones

    if cfg.shard_size is None:
        size = len(ds) // n_clients
        while size > 0:
            ones, zeros = demand(size)
            if ones.sum() <= len(pools[1]) and zeros.sum() <= len(pools[0]):
                break
            size -= 1
        if size == 0:
            raise InfeasiblePartitionError(
                "class pools cannot give every client even one bag", client=0)
    else:
        size = cfg.shard_size

    ones, zeros = demand(size)
    shards, taken = [], [0, 0]
    for p in range(n_clients):
        if taken[1] + ones[p] > len(pools[1]) or taken[0] + zeros[p] > len(pools[0]):
            raise InfeasiblePartitionError(
                f"class pools exhausted at client {p}: needs {ones[p]} class-1 and "
                f"{zeros[p]} class-0 bags", client=p)
        shard = np.concatenate([pools[1][taken[1]:taken[1] + ones[p]],
                                pools[0][taken[0]:taken[0] + zeros[p]]])
        taken[1] += ones[p]
        taken[0] += zeros[p]
        shards.append(np.sort(shard))
    remainder = np.sort(np.concatenate([pools[1][taken[1]:], pools[0][taken[0]:]]))

    repairs = []
    _repair_empty(shards, repairs)
    return PartitionPlan(
        shards=shards, scheme="type1",
        config={**asdict(cfg), "n_clients": n_clients, "resolved_shard_size": int(size)},
        proportions=targets, counts=ones, holdout=holdout, remainder=remainder, repairs=repairs)


# --- k-means -----------------------------------------------------------------------

def _sq_dists(X, C, x_sq=None):
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", X, X)
    d = x_sq[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]
    return np.maximum(d, 0.0)


def _count_distinct(X, cap):
    seen = set()
    for row in X:
        seen.add(row.tobytes())
        if len(seen) >= cap:
            break
    return len(seen)


def _seed_centers(X, x_sq, k, rng, n_trials):
    """Greedy k-means++: each step draws ``n_trials`` D^2-weighted candidates
    and keeps the one that lowers the total squared distance most."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centers[:1], x_sq)[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise DegenerateClusteringError("all points coincide with chosen centers")
        picks = np.searchsorted(np.cumsum(closest), rng.random(n_trials) * total, side="right")
        picks = np.minimum(picks, n - 1)
        cand = np.minimum(closest[:, None], _sq_dists(X, X[picks], x_sq))
        best = int(np.argmin(cand.sum(axis=0)))
        centers[j] = X[picks[best]]
        closest = cand[:, best]
    return centers


def _lloyd(X, x_sq, centers, max_iter, tol):
    n, k = X.shape[0], centers.shape[0]
    prev = np.inf
    for _ in range(max_iter):
        d = _sq_dists(X, centers, x_sq)
        labels = d.argmin(axis=1)
        inertia = float(d[np.arange(n), labels].sum())
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        empty = counts == 0
        centers = np.where(empty[:, None], centers, sums / np.maximum(counts, 1)[:, None])
        if empty.any():
            # re-seed empty clusters at the points farthest from their centers
            far = np.argsort(-d[np.arange(n), labels])[: int(empty.sum())]
            centers[empty] = X[far]
        if np.isfinite(prev) and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    d = _sq_dists(X, centers, x_sq)
    labels = d.argmin(axis=1)
    return labels, centers, float(d[np.arange(n), labels].sum())


def kmeans(X, k, rng_seed=0, max_iter=100, tol=1e-6, n_init=3):
    """Lloyd's algorithm from greedy k-means++ seeds, best of ``n_init`` starts.

    Each start stops after ``max_iter`` iterations or when inertia changes by
    less than ``tol`` relative to its previous value. Returns
    ``(labels, centers, inertia)`` of the start with the lowest inertia.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if n_init < 1:
        raise ConfigError("n_init must be >= 1")
    if n == 0:
        raise ConfigError("k-means needs at least one point")
    if _count_distinct(X, k) < k:
        raise DegenerateClusteringError(f"fewer than {k} distinct points")
    rng = np.random.default_rng(rng_seed)
    x_sq = np.einsum("ij,ij->i", X, X)
    n_trials = 2 + int(math.log(k))
    best = None
    for _ in range(n_init):
        result = _lloyd(X, x_sq, _seed_centers(X, x_sq, k, rng, n_trials), max_iter, tol)
        if best is None or result[2] < best[2]:
            best = result
    return best


def kmeans_clusters(ds, C: int, rng_seed=0, max_iter=100, tol=1e-6, n_init=3):
    """Cluster every instance row, then label each bag by majority vote.

    Ties go to the lowest cluster id. Returns ``(bag_clusters, inertia)``.
    """
    if C < 2:
        raise ConfigError("C must be >= 2")
    if len(ds) == 0:
        raise ConfigError("dataset is empty")
    labels, _, inertia = kmeans(ds.features, C, rng_seed, max_iter, tol, n_init)
    votes = np.zeros((len(ds), C), dtype=np.int64)
    np.add.at(votes, (ds.instance_bag_index(), labels), 1)
    return votes.argmax(axis=1), inertia


# --- Type II -----------------------------------------------------------------------

def sample_dirichlet(rng, alpha, size, dim):
    """Symmetric Dirichlet draws computed from log-Gamma variates.

    log G = log Gamma(alpha + 1) + log(U) / alpha is exact for Gamma(alpha)
    and stays finite where a direct small-alpha Gamma draw underflows to 0.
    """
    log_g = np.log(rng.gamma(alpha + 1.0, 1.0, size=(size, dim))) + \
        np.log(rng.random((size, dim))) / alpha
    log_g -= log_g.max(axis=1, keepdims=True)
    g = np.exp(log_g)
    return g / g.sum(axis=1, keepdims=True)


def largest_remainder(weights, total):
    """Integer apportionment of ``total`` proportional to ``weights``.

    Floors first, then hands the leftover units to the largest fractional parts
    (ties to the lower index).
    """
    weights = np.asarray(weights, dtype=float)
    if total == 0:
        return np.zeros(weights.shape, dtype=np.int64)
    quotas = weights / weights.sum() * total
    base = np.floor(quotas).astype(np.int64)
    short = int(total - base.sum())
    order = np.lexsort((np.arange(len(quotas)), -(quotas - base)))
    base[order[:short]] += 1
    return base


def partition_type2(ds, n_clients: int, cfg: DirichletConfig, clusters) -> PartitionPlan:
    """Spread each cluster's bags over clients by their Dirichlet weight for it."""
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    clusters = np.asarray(clusters, dtype=np.int64)
    if clusters.shape != (len(ds),):
        raise ConfigError("cluster map must cover every bag")
    C = cfg.num_clusters
    if clusters.size and (clusters.min() < 0 or clusters.max() >= C):
        raise ConfigError(f"cluster ids must lie in [0, {C})")
    rng = np.random.default_rng(cfg.rng_seed)
    props = sample_dirichlet(rng, cfg.alpha, n_clients, C)

    counts = np.zeros((n_clients, C), dtype=np.int64)
    parts = [[] for _ in range(n_clients)]
    for c in range(C):
        members = rng.permutation(np.flatnonzero(clusters == c))
        counts[:, c] = largest_remainder(props[:, c], members.size)
        bounds = np.concatenate([[0], np.cumsum(counts[:, c])])
        for p in range(n_clients):
            parts[p].append(members[bounds[p]:bounds[p + 1]])
    shards = [np.sort(np.concatenate(ps)).astype(np.int64) for ps in parts]

    repairs = []
    _repair_empty(shards, repairs)
    return PartitionPlan(
        shards=shards, scheme="type2", config={**asdict(cfg), "n_clients": n_clients},
        proportions=props, counts=counts, repairs=repairs)


def cluster_counts(plan, clusters, num_clusters):
    """Realized (client, cluster) count table of a plan."""
    clusters = np.asarray(clusters)
    return np.stack([np.bincount(clusters[s], minlength=num_clusters) for s in plan.shards])


# --- utilization -------------------------------------------------------------------

def apply_utilization(plan: PartitionPlan, cfg: UtilizationConfig) -> PartitionPlan:
    """Keep a uniform random ceil(rate * |shard|) subset of every shard."""
    if cfg.rate == 1.0:
        return plan
    rng = np.random.default_rng(cfg.rng_seed)
    shards = []
    for shard in plan.shards:
        keep = math.ceil(cfg.rate * len(shard) - 1e-9)  # 0.3 * 10 must give 3, not 4
        shards.append(np.sort(rng.choice(shard, size=keep, replace=False)))
    return PartitionPlan(
        shards=shards, scheme=plan.scheme, config=plan.config, proportions=plan.proportions,
        counts=plan.counts, holdout=plan.holdout, remainder=plan.remainder,
        repairs=plan.repairs, utilization=plan.utilization * cfg.rate)
