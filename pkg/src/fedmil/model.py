"""Gated-attention MIL network with hand-written gradients and SGD + Lookahead.

Per bag with instance rows x_1..x_n::

    h_m    = relu(W x_m + b)                       embeddings, (n, M)
    s_m    = w . (tanh(V h_m) * sigmoid(U h_m))     attention scores
    a      = softmax(s)
    z      = sum_m a_m h_m
    logits = Wc z + bc
    loss   = logsumexp(logits) - logits[y]

All arithmetic is float64; bags with the same instance count are stacked and
processed as one ``(B, n, d)`` block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatchError, EmptyShardError

PARAM_FIELDS = ("W", "b", "V", "U", "w", "Wc", "bc")

# instance rows per stacked block; bounds peak memory of the (B, n, M) caches
_BLOCK_ROWS = 32768


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    embed_dim: int = 128
    attention_dim: int = 64
    num_classes: int = 2
    init_seed: int = 0

    def __post_init__(self):
        for f in ("input_dim", "embed_dim", "attention_dim", "num_classes"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1")


@dataclass(frozen=True)
class LookaheadConfig:
    learning_rate: float = 0.01
    lookahead_steps: int = 5
    lookahead_alpha: float = 0.5

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.lookahead_steps < 1:
            raise ConfigError("lookahead_steps must be >= 1")
        if not 0 < self.lookahead_alpha <= 1:
            raise ConfigError("lookahead_alpha must lie in (0, 1]")


@dataclass
class ModelParams:
    """All trainable arrays. Behaves as a vector: ``+``, ``-``, scalar ``*``."""

    W: np.ndarray   # (M, d) extractor
    b: np.ndarray   # (M,)
    V: np.ndarray   # (L, M) tanh branch
    U: np.ndarray   # (L, M) sigmoid gate
    w: np.ndarray   # (L,)
    Wc: np.ndarray  # (K, M) classifier
    bc: np.ndarray  # (K,)

    def arrays(self):
        return [getattr(self, f) for f in PARAM_FIELDS]

    def _map(self, fn, other=None):
        if other is None:
            return ModelParams(*(fn(a) for a in self.arrays()))
        if not isinstance(other, ModelParams):
            return NotImplemented
        if self.shapes() != other.shapes():
            raise DimensionMismatchError(f"shape mismatch: {self.shapes()} vs {other.shapes()}")
        return ModelParams(*(fn(a, c) for a, c in zip(self.arrays(), other.arrays())))

    def __add__(self, other):
        return self._map(np.add, other)

    def __sub__(self, other):
        return self._map(np.subtract, other)

    def __mul__(self, c):
        if isinstance(c, ModelParams):
            return NotImplemented
        c = float(c)
        return self._map(lambda a: a * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self._map(np.negative)

    def copy(self):
        return self._map(np.array)

    def shapes(self):
        return tuple(a.shape for a in self.arrays())

    @property
    def config_dims(self):
        M, d = self.W.shape
        return d, M, self.V.shape[0], self.Wc.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec, like: ModelParams):
        out, pos = [], 0
        for a in like.arrays():
            out.append(np.array(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        if pos != len(vec):
            raise DimensionMismatchError(f"flat vector has {len(vec)} entries, expected {pos}")
        return cls(*out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.shapes() == other.shapes() and all(
            np.array_equal(a, c) for a, c in zip(self.arrays(), other.arrays()))

    # checkpoint blob: b"MILP" | u32 version | u32 count | per array (u32 ndim, u32 dims...) | f8 data
    def to_bytes(self) -> bytes:
        head = [b"MILP", struct.pack("<II", 1, len(PARAM_FIELDS))]
        for a in self.arrays():
            head.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        return b"".join(head) + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> ModelParams:
        if blob[:4] != b"MILP":
            raise ValueError("not a parameter blob")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != 1 or count != len(PARAM_FIELDS):
            raise ValueError(f"unsupported blob (version {version}, {count} arrays)")
        pos, shapes = 12, []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", blob, pos)
            shapes.append(struct.unpack_from(f"<{ndim}I", blob, pos + 4))
            pos += 4 + 4 * ndim
        total = sum(int(np.prod(s)) for s in shapes)
        if len(blob) - pos != 8 * total:
            raise ValueError("parameter blob length does not match its shape header")
        data = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
        arrays, k = [], 0
        for s in shapes:
            size = int(np.prod(s))
            arrays.append(data[k:k + size].reshape(s).copy())
            k += size
        return cls(*arrays)


def zeros_like(p: ModelParams) -> ModelParams:
    return p._map(np.zeros_like)


def init_params(cfg: ModelConfig) -> ModelParams:
    """Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero."""
    rng = np.random.default_rng(cfg.init_seed)
    d, M, L, K = cfg.input_dim, cfg.embed_dim, cfg.attention_dim, cfg.num_classes

    def glorot(rows, cols):
        lim = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-lim, lim, size=(rows, cols))

    W = glorot(M, d)
    V = glorot(L, M)
    U = glorot(L, M)
    w = glorot(1, L)[0]
    Wc = glorot(K, M)
    return ModelParams(W, np.zeros(M), V, U, w, Wc, np.zeros(K))


# --- core batched passes -------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_dim(params, X):
    if X.shape[-1] != params.W.shape[1]:
        raise DimensionMismatchError(
            f"bag feature_dim {X.shape[-1]} != model input_dim {params.W.shape[1]}")


def _forward(params: ModelParams, X, y=None):
    """Forward pass on a ``(B, n, d)`` block. Returns a cache dict."""
    _check_dim(params, X)
    pre = X @ params.W.T + params.b          # (B, n, M)
    H = np.maximum(pre, 0.0)
    T = np.tanh(H @ params.V.T)              # (B, n, L)
    S = _sigmoid(H @ params.U.T)
    G = T * S
    scores = G @ params.w                    # (B, n)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    a = e / e.sum(axis=1, keepdims=True)
    z = np.einsum("bn,bnm->bm", a, H)
    logits = z @ params.Wc.T + params.bc     # (B, K)
    shift = logits.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    cache = dict(X=X, pre=pre, H=H, T=T, S=S, G=G, a=a, z=z, logits=logits, lse=lse)
    if y is not None:
        y = np.asarray(y)
        cache["y"] = y
        cache["losses"] = lse - logits[np.arange(len(y)), y]
    return cache


def _backward(params: ModelParams, cache, weights):
    """Gradient of ``sum_b weights[b] * loss_b`` for a cached block."""
    X, H, T, S, G, a, z = (cache[k] for k in ("X", "H", "T", "S", "G", "a", "z"))
    y = cache["y"]
    probs = np.exp(cache["logits"] - cache["lse"][:, None])
    dlogits = probs
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits *= weights[:, None]

    dWc = dlogits.T @ z
    dbc = dlogits.sum(axis=0)
    dz = dlogits @ params.Wc                             # (B, M)

    dH = a[:, :, None] * dz[:, None, :]
    da = np.einsum("bnm,bm->bn", H, dz)
    ds = a * (da - (a * da).sum(axis=1, keepdims=True))  # softmax backward

    dw = np.einsum("bn,bnl->l", ds, G)
    dG = ds[:, :, None] * params.w
    dpre_t = dG * S * (1.0 - T * T)
    dpre_s = dG * T * S * (1.0 - S)
    H2 = H.reshape(-1, H.shape[-1])
    dV = dpre_t.reshape(-1, dpre_t.shape[-1]).T @ H2
    dU = dpre_s.reshape(-1, dpre_s.shape[-1]).T @ H2
    dH += dpre_t @ params.V + dpre_s @ params.U

    dpre = dH * (cache["pre"] > 0)                       # relu subgradient 0 at 0
    dpre2 = dpre.reshape(-1, dpre.shape[-1])
    dW = dpre2.T @ X.reshape(-1, X.shape[-1])
    db = dpre2.sum(axis=0)
    return ModelParams(dW, db, dV, dU, dw, dWc, dbc)


def _blocks(ds, indices):
    """Split ``ds.groups(indices)`` further so no block exceeds _BLOCK_ROWS rows."""
    for pos, X, y in ds.groups(indices):
        B, n = X.shape[:2]
        step = max(1, _BLOCK_ROWS // n)
        for lo in range(0, B, step):
            yield pos[lo:lo + step], X[lo:lo + step], y[lo:lo + step]


# --- single-bag operations -------------------------------------------------------

def _bag_block(bag):
    X = np.asarray(bag.instances, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DimensionMismatchError("a bag needs an (n, d) instance matrix with n >= 1")
    return X[None]


def extract_features(params: ModelParams, bag) -> np.ndarray:
    X = _bag_block(bag)[0]
    _check_dim(params, X)
    return np.maximum(X @ params.W.T + params.b, 0.0)


def attention_pool(params: ModelParams, embeddings):
    """Gated-attention pooling of ``(n, M)`` embeddings. Returns ``(z, a)``."""
    H = np.asarray(embeddings, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise DimensionMismatchError("need at least one embedding")
    scores = (np.tanh(H @ params.V.T) * _sigmoid(H @ params.U.T)) @ params.w
    e = np.exp(scores - scores.max())
    a = e / e.sum()
    return a @ H, a


def forward_loss(params: ModelParams, bag):
    """Cross-entropy loss of one bag; the second value feeds :func:`backward`."""
    cache = _forward(params, _bag_block(bag), np.array([bag.label]))
    return float(cache["losses"][0]), cache


def backward(params: ModelParams, bag, aux) -> ModelParams:
    return _backward(params, aux, np.ones(1))


# --- dataset-level helpers ---------------------------------------------------------

def loss_and_grad(params: ModelParams, ds, indices):
    """Mean loss over the bags at ``indices`` and its exact gradient."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise EmptyShardError("cannot compute a loss over zero bags")
    total = 0.0
    grad = None
    inv = 1.0 / indices.size
    for _, X, y in _blocks(ds, indices):
        cache = _forward(params, X, y)
        total += cache["losses"].sum()
        g = _backward(params, cache, np.full(len(y), inv))
        grad = g if grad is None else grad + g
    return total * inv, grad


def bag_losses(params: ModelParams, ds, indices=None) -> np.ndarray:
    if indices is None:
        indices = np.arange(len(ds))
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty(indices.size)
    for pos, X, y in _blocks(ds, indices):
        out[pos] = _forward(params, X, y)["losses"]
    return out


def predict_proba(params: ModelParams, ds, indices=None) -> np.ndarray:
    if indices is None:
        indices = np.arange(len(ds))
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size, params.Wc.shape[0]))
    for pos, X, _ in _blocks(ds, indices):
        cache = _forward(params, X)
        out[pos] = np.exp(cache["logits"] - cache["lse"][:, None])
    return out


def bag_mean_embeddings(params: ModelParams, ds, indices=None) -> np.ndarray:
    """Instance-mean of the extracted embeddings, one row per bag."""
    if indices is None:
        indices = np.arange(len(ds))
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size, params.W.shape[0]))
    for pos, X, _ in _blocks(ds, indices):
        _check_dim(params, X)
        out[pos] = np.maximum(X @ params.W.T + params.b, 0.0).mean(axis=1)
    return out


def train_local(params: ModelParams, ds, indices, cfg: LookaheadConfig, epochs: int, rng=None):
    """Full-batch SGD wrapped in Lookahead for ``epochs`` steps.

    Fast weights take one gradient step per epoch; every ``lookahead_steps``
    steps the slow weights move ``lookahead_alpha`` of the way toward the fast
    ones and the fast weights restart from there. Pending fast steps are folded
    into the slow weights once more at the end, so ``epochs < lookahead_steps``
    still makes progress. Returns the slow weights and their mean shard loss.

    ``rng`` is accepted for interface symmetry; full-batch steps draw nothing.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise EmptyShardError("train_local called with an empty shard")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    lr, k, alpha = cfg.learning_rate, cfg.lookahead_steps, cfg.lookahead_alpha

    def sync(slow, fast):
        return fast.copy() if alpha == 1.0 else slow + alpha * (fast - slow)

    slow = params.copy()
    fast = params.copy()
    for step in range(1, epochs + 1):
        _, grad = loss_and_grad(fast, ds, indices)
        fast = fast - lr * grad
        if step % k == 0:
            slow = sync(slow, fast)
            fast = slow.copy()
    if epochs % k:
        slow = sync(slow, fast)
    final_loss = float(bag_losses(slow, ds, indices).mean())
    return slow, final_loss


__all__ = [
    "ModelConfig", "LookaheadConfig", "ModelParams", "init_params", "zeros_like",
    "extract_features", "attention_pool", "forward_loss", "backward",
    "loss_and_grad", "bag_losses", "predict_proba", "bag_mean_embeddings", "train_local",
]
