"""Client profiling and quality-diversity k-DPP client selection.

The server sees only each client's mean embedding and mean loss under the
initial global model. From those it builds

* a similarity matrix ``S`` (1 minus min-max scaled pairwise L2 distance),
* a quality diagonal ``q`` (min-max scaled losses floored at ``epsilon``),
* the kernel ``L = Q S^T S Q``,

and draws an exact size-P sample with ``P(G) ~ det(L_G)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import model as mil
from .errors import (
    ConfigError,
    DegenerateSimilarityError,
    EigenDecompositionError,
    EmptyShardError,
    InfeasibleSubsetSizeError,
)
from .linalg import elementary_symmetric, sym_eig

log = logging.getLogger(__name__)

METHODS = ("random", "dpp", "dppq")
RANK_TOL = 1e-12


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    mean_feature: np.ndarray
    mean_loss: float
    shard_size: int


@dataclass(frozen=True)
class Subset:
    indices: tuple
    method: str

    def __len__(self):
        return len(self.indices)


@dataclass
class SelectionKernel:
    S: np.ndarray
    q: np.ndarray
    L: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    epsilon: float | None = None

    @property
    def Q(self):
        return np.diag(self.q)

    def to_json(self, profiles=None) -> str:
        doc = {
            "S": self.S.tolist(),
            "q": self.q.tolist(),
            "L": self.L.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "epsilon": self.epsilon,
        }
        if profiles is not None:
            doc["profiles"] = [
                {"client_id": p.client_id, "mean_loss": p.mean_loss, "shard_size": p.shard_size,
                 "mean_feature": np.asarray(p.mean_feature).tolist()} for p in profiles]
        return json.dumps(doc, indent=1)


def profile_clients(params, ds, shards):
    """Mean embedding and mean loss of every client under ``params``.

    A bag's embedding is the instance-mean of its extracted features; the
    client profile averages those over the client's bags.
    """
    profiles = []
    for p, shard in enumerate(shards):
        shard = np.asarray(shard, dtype=np.int64)
        if shard.size == 0:
            raise EmptyShardError(f"client {p} has no data to profile")
        emb = mil.bag_mean_embeddings(params, ds, shard)
        losses = mil.bag_losses(params, ds, shard)
        profiles.append(ClientProfile(p, emb.mean(axis=0), float(losses.mean()), int(shard.size)))
    return profiles


def _features(profiles):
    if isinstance(profiles, np.ndarray):
        return np.asarray(profiles, dtype=np.float64)
    return np.stack([np.asarray(p.mean_feature, dtype=np.float64) for p in profiles])


def _losses(profiles):
    if isinstance(profiles, np.ndarray) or (profiles and not isinstance(profiles[0], ClientProfile)):
        return np.asarray(profiles, dtype=np.float64)
    return np.array([p.mean_loss for p in profiles], dtype=np.float64)


def similarity_matrix(profiles, strict=False):
    """``s_rt = 1 - (d_rt - min d) / (max d - min d)`` over all pairwise L2 distances.

    The min includes the zero diagonal, so ``diag(S) = 1``. If every distance
    is equal, returns the identity (or raises when ``strict``).
    """
    H = _features(profiles)
    if H.shape[0] < 2:
        raise ConfigError("similarity needs at least two clients")
    # explicit differences, not the Gram expansion: exact zeros for coincident profiles
    D = np.sqrt(((H[:, None, :] - H[None, :, :]) ** 2).sum(-1))
    lo, hi = D.min(), D.max()
    if hi - lo <= 0:
        if strict:
            raise DegenerateSimilarityError("all client profiles coincide")
        log.warning("all pairwise profile distances are equal; using S = I")
        return np.eye(H.shape[0])
    S = 1.0 - (D - lo) / (hi - lo)
    return 0.5 * (S + S.T)


def quality_matrix(profiles, epsilon=0.01):
    """Quality vector ``q_p = eps + (L_p - L_min) / (L_max - L_min) * (1 - eps)``.

    Returned as the diagonal vector; all-equal losses give ``q = eps``.
    """
    if not 0 <= epsilon <= 1:
        raise ConfigError("epsilon must lie in [0, 1]")
    losses = _losses(profiles)
    if losses.shape[0] < 2:
        raise ConfigError("quality needs at least two clients")
    lo, hi = losses.min(), losses.max()
    if hi - lo <= 0:
        log.warning("all client losses are equal; quality set to epsilon")
        return np.full(losses.shape, float(epsilon))
    q = epsilon + (losses - lo) / (hi - lo) * (1.0 - epsilon)
    return np.clip(q, epsilon, 1.0)


def build_kernel(S, Q, epsilon=None) -> SelectionKernel:
    """``L = Q S^T S Q`` with its eigendecomposition. ``Q`` may be a vector or diagonal matrix."""
    S = np.asarray(S, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    q = np.diag(Q).copy() if Q.ndim == 2 else Q.copy()
    if S.ndim != 2 or S.shape[0] != S.shape[1] or q.shape != (S.shape[0],):
        raise ConfigError(f"shape mismatch: S {S.shape}, Q {Q.shape}")
    G = S.T @ S
    L = q[:, None] * G * q[None, :]
    L = 0.5 * (L + L.T)
    vals, vecs = sym_eig(L)
    top = max(1.0, float(vals[-1])) if vals.size else 1.0
    if vals.size and vals[0] < -1e-8 * top:
        raise EigenDecompositionError(f"kernel is not PSD (min eigenvalue {vals[0]:.3e})")
    return SelectionKernel(S, q, L, vals, vecs, epsilon)


def _pick(rng, weights):
    cdf = np.cumsum(weights)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(weights) - 1)


class KDPPSampler:
    """Exact k-DPP sampler for a fixed eigendecomposed PSD kernel.

    Validation and the elementary symmetric table are computed once, so
    repeated draws only pay for the two sampling phases.
    """

    def __init__(self, eigenvalues, eigenvectors, k):
        lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
        N = lam.shape[0]
        if k < 1:
            raise ConfigError("subset size must be >= 1")
        if k > N:
            raise InfeasibleSubsetSizeError(f"cannot draw {k} of {N} items")
        rank = int(np.sum(lam > RANK_TOL))
        if rank < k:
            raise InfeasibleSubsetSizeError(f"kernel rank {rank} is below the subset size {k}")
        E = elementary_symmetric(lam, k)
        # inclusion probability of eigenvector i-1 given `r` still to choose among the first i
        self._accept = [[0.0] * (N + 1) for _ in range(k + 1)]
        for r in range(1, k + 1):
            for i in range(r, N + 1):
                self._accept[r][i] = 1.0 if i == r else lam[i - 1] * E[r - 1, i - 1] / E[r, i]
        self.vectors = np.asarray(eigenvectors, dtype=np.float64)
        self.N, self.k = N, k

    def draw(self, rng):
        chosen, r = [], self.k
        for i in range(self.N, 0, -1):
            if r == 0:
                break
            if rng.random() < self._accept[r][i]:
                chosen.append(i - 1)
                r -= 1
        V = self.vectors[:, chosen]
        # chain rule on the projection kernel V V^T: condition on each pick by a rank-one update
        K = V @ V.T
        items = []
        for _ in range(self.k):
            w = np.clip(np.diag(K).copy(), 0.0, None)
            w[items] = 0.0
            i = _pick(rng, w)
            items.append(i)
            K = K - np.outer(K[:, i], K[i, :]) / K[i, i]
        return items


def sample_k_dpp(eigenvalues, eigenvectors, k, rng):
    """Exact k-DPP draw from an eigendecomposed PSD kernel. Returns item indices."""
    return KDPPSampler(eigenvalues, eigenvectors, k).draw(rng)


def sample_dppq(kernel: SelectionKernel, P, rng, method="dppq") -> Subset:
    items = sample_k_dpp(kernel.eigenvalues, kernel.eigenvectors, P, rng)
    return Subset(tuple(int(i) for i in items), method)


def sample_dpp_baseline(profiles, P, rng, strict=False) -> Subset:
    """Diversity-only k-DPP: same similarity, unit quality."""
    S = similarity_matrix(profiles, strict=strict)
    kernel = build_kernel(S, np.ones(S.shape[0]))
    return sample_dppq(kernel, P, rng, method="dpp")


def sample_random(N, P, rng) -> Subset:
    """Uniform P-subset via a partial Fisher-Yates shuffle."""
    if P < 1:
        raise ConfigError("subset size must be >= 1")
    if P > N:
        raise ConfigError(f"cannot choose {P} of {N} clients")
    order = np.arange(N)
    for i in range(P):
        j = int(rng.integers(i, N))
        order[i], order[j] = order[j], order[i]
    return Subset(tuple(int(v) for v in order[:P]), "random")


def select_clients(method, profiles, P, rng, epsilon=0.01):
    """Dispatch on ``method``; returns ``(Subset, kernel or None)``."""
    if len(profiles) == 1 and P == 1 and method in METHODS:
        return Subset((0,), method), None
    if method == "random":
        return sample_random(len(profiles), P, rng), None
    if method == "dpp":
        kernel = build_kernel(similarity_matrix(profiles), np.ones(len(profiles)))
        return sample_dppq(kernel, P, rng, method="dpp"), kernel
    if method == "dppq":
        kernel = build_kernel(similarity_matrix(profiles), quality_matrix(profiles, epsilon),
                              epsilon)
        return sample_dppq(kernel, P, rng), kernel
    raise ConfigError(f"unknown selection method {method!r}; expected one of {METHODS}")
