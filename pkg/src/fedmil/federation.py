"""Federated training loop with one-shot client selection and FedAvg."""

from __future__ import annotations

import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as mil
from .errors import ConfigError, DimensionMismatchError, FederationDivergedError
from .metrics import evaluate
from .selection import METHODS, profile_clients, select_clients

log = logging.getLogger(__name__)

__all__ = ["FederationConfig", "RoundRecord", "FederationResult", "derive_rng", "aggregate",
           "global_loss", "run_federation"]


def _key(tag):
    if isinstance(tag, str):
        return zlib.crc32(tag.encode())
    return int(tag)


def derive_rng(seed, *tags):
    """Independent generator for ``(seed, *tags)``; tags may be ints or strings."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(map(_key, tags))))


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 100
    cohort_size: int = 10
    rounds: int = 50
    local_epochs: int = 1
    method: str = "dppq"
    reselect_per_round: bool = False
    optimizer: mil.LookaheadConfig = field(default_factory=mil.LookaheadConfig)
    eval_every: int = 1
    seed: int = 0
    epsilon: float = 0.01
    embed_dim: int = 128
    attention_dim: int = 64
    workers: int = 1

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if not 1 <= self.cohort_size <= self.n_clients:
            raise ConfigError(f"cohort_size must lie in [1, {self.n_clients}]")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("rounds and local_epochs must be >= 1")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.eval_every < 1 or self.workers < 1:
            raise ConfigError("eval_every and workers must be >= 1")


@dataclass
class RoundRecord:
    round: int
    selected: tuple
    global_loss: float
    accuracy: float | None = None
    f1: float | None = None
    auc: float | None = None
    wall_time: float = 0.0


@dataclass
class FederationResult:
    records: list
    params: mil.ModelParams
    selection: object
    profiles: list
    kernel: object = None
    initial_params: mil.ModelParams | None = None


def aggregate(weighted) -> mil.ModelParams:
    """Sample-count weighted mean of ``(params, n_p)`` pairs, in the given order."""
    weighted = list(weighted)
    if not weighted:
        raise ConfigError("nothing to aggregate")
    total = float(sum(n for _, n in weighted))
    if total <= 0:
        raise ConfigError("total sample count must be positive")
    base = weighted[0][0]
    shapes = base.shapes()
    # offsets from the first model: identical client models aggregate to themselves exactly
    delta = mil.zeros_like(base)
    for params, n in weighted:
        if params.shapes() != shapes:
            raise DimensionMismatchError("client models disagree in shape")
        delta = delta + (n / total) * (params - base)
    return base + delta


def global_loss(losses, sizes) -> float:
    sizes = np.asarray(sizes, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if sizes.size == 0:
        raise ConfigError("global loss of an empty cohort")
    return float(np.sum(sizes / sizes.sum() * losses))


def _train_one(args):
    params, ds, shard, opt, epochs, rng = args
    return mil.train_local(params, ds, shard, opt, epochs, rng)


def run_federation(ds, plan, cfg: FederationConfig, test=None, init_params=None,
                   on_round=None) -> FederationResult:
    """Profile, select once, then ``cfg.rounds`` rounds of local training and FedAvg.

    ``on_round`` is called with each :class:`RoundRecord` as it completes.
    """
    shards = [np.asarray(s, dtype=np.int64) for s in plan.shards[: cfg.n_clients]]
    if len(shards) < cfg.n_clients or any(s.size == 0 for s in shards):
        raise ConfigError(f"plan must provide {cfg.n_clients} non-empty shards")

    if init_params is None:
        mcfg = mil.ModelConfig(ds.feature_dim, cfg.embed_dim, cfg.attention_dim, ds.num_classes,
                               init_seed=int(derive_rng(cfg.seed, "init").integers(2**31)))
        init_params = mil.init_params(mcfg)
    weights = init_params.copy()

    profiles = profile_clients(weights, ds, shards)
    subset, kernel = select_clients(cfg.method, profiles, cfg.cohort_size,
                                    derive_rng(cfg.seed, "select"), cfg.epsilon)
    log.info("method=%s selected clients %s", cfg.method, sorted(subset.indices))

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    records = []
    try:
        for t in range(1, cfg.rounds + 1):
            start = time.perf_counter()
            if cfg.reselect_per_round and t > 1:
                profiles = profile_clients(weights, ds, shards)
                subset, kernel = select_clients(cfg.method, profiles, cfg.cohort_size,
                                                derive_rng(cfg.seed, "select", t), cfg.epsilon)
            cohort = sorted(subset.indices)
            jobs = [(weights, ds, shards[c], cfg.optimizer, cfg.local_epochs,
                     derive_rng(cfg.seed, t, c)) for c in cohort]
            results = list(pool.map(_train_one, jobs)) if pool else [_train_one(j) for j in jobs]

            sizes = [shards[c].size for c in cohort]
            new_weights = aggregate(zip((r[0] for r in results), sizes))
            losses = [r[1] for r in results]
            if not new_weights.is_finite() or not np.all(np.isfinite(losses)):
                diagnostics = {
                    "round": t,
                    "cohort": cohort,
                    "client_losses": losses,
                    "non_finite_arrays": [name for name, a in zip(mil.PARAM_FIELDS,
                                                                  new_weights.arrays())
                                          if not np.all(np.isfinite(a))],
                    "learning_rate": cfg.optimizer.learning_rate,
                }
                raise FederationDivergedError(f"non-finite weights after round {t}", diagnostics)
            weights = new_weights

            rec = RoundRecord(t, tuple(cohort), global_loss(losses, sizes))
            if test is not None and (t % cfg.eval_every == 0 or t == cfg.rounds):
                ev = evaluate(weights, test)
                rec.accuracy, rec.f1, rec.auc = ev.accuracy, ev.f1, ev.auc
            rec.wall_time = time.perf_counter() - start
            records.append(rec)
            if on_round is not None:
                on_round(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return FederationResult(records, weights, subset, profiles, kernel, init_params)
