"""Target-affinity head, contrastive objective, training and retrieval.

A query's word tokens are averaged through a learned word table into a state
``z``; a two-layer MLP maps ``z`` to a query vector ``q`` living in object
embedding space. Objects are scored by the raw dot product ``q . e``.

The multi-positive InfoNCE loss for one query is::

    -log( sum_{e in E+} exp(q.e / tau) / sum_{e in E} exp(q.e / tau) )
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .geometry import embed_all_objects
from .relevance import TargetSet, tokenize
from .scene import ObjectEmbedding, SceneBundle
from .tensorfile import read_tensor, write_tensor

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.07
PARAM_NAMES = ("table", "W1", "b1", "W2", "b2")
ACTIVATIONS = ("relu", "identity")


class InvalidBatchError(ValueError):
    pass


class SkipSample(Exception):
    """The sample has no positives; its contrastive term is not computed."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AffinityHead:
    """Word table ``(V, D)`` plus MLP ``D -> H -> C``."""

    vocabulary: tuple[str, ...]
    table: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        for name in PARAM_NAMES:
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        V, D = self.table.shape
        H = self.W1.shape[0]
        if V != len(self.vocabulary):
            raise ValueError("word table must have one row per vocabulary word")
        if self.W1.shape != (H, D) or self.b1.shape != (H,):
            raise ValueError(f"first layer must be ({H}, {D}) with bias ({H},)")
        C = self.W2.shape[0]
        if self.W2.shape != (C, H) or self.b2.shape != (C,):
            raise ValueError(f"second layer must be ({C}, {H}) with bias ({C},)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in PARAM_NAMES):
            raise ValueError("head parameters must be finite")

    @property
    def query_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, **params) -> "AffinityHead":
        return replace(self, **params)

    def __eq__(self, other):
        if not isinstance(other, AffinityHead):
            return NotImplemented
        return (
            self.vocabulary == other.vocabulary
            and self.activation == other.activation
            and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)
        )


def build_vocabulary(category_names: Sequence[str]) -> tuple[str, ...]:
    return tuple(sorted({w for name in category_names for w in tokenize(name)}))


def init_head(
    vocabulary: Sequence[str],
    feature_dim: int,
    query_dim: int = 32,
    hidden_dim: int | None = None,
    seed: int = 0,
    activation: str = "relu",
) -> AffinityHead:
    hidden_dim = hidden_dim or query_dim
    rng = np.random.default_rng(seed)
    return AffinityHead(
        vocabulary=tuple(vocabulary),
        table=rng.standard_normal((len(vocabulary), query_dim)),
        W1=rng.standard_normal((hidden_dim, query_dim)) * np.sqrt(2.0 / query_dim),
        b1=np.zeros(hidden_dim),
        W2=rng.standard_normal((feature_dim, hidden_dim)) * np.sqrt(1.0 / hidden_dim),
        b2=np.zeros(feature_dim),
        activation=activation,
    )


def token_weights(head: AffinityHead, tokens: Sequence[str]) -> np.ndarray:
    """Row weights ``a`` with ``z = a @ table`` (mean over in-vocabulary tokens)."""
    index = {w: i for i, w in enumerate(head.vocabulary)}
    a = np.zeros(len(head.vocabulary))
    hits = [index[t] for t in tokens if t in index]
    for i in hits:
        a[i] += 1.0 / len(hits)
    return a


def encode_query(head: AffinityHead, query: str | Sequence[str]) -> np.ndarray:
    tokens = tokenize(query) if isinstance(query, str) else list(query)
    return token_weights(head, tokens) @ head.table


def _act(head: AffinityHead, x):
    return np.maximum(x, 0.0) if head.activation == "relu" else x


def _act_grad(head: AffinityHead, x):
    return (x > 0).astype(np.float64) if head.activation == "relu" else np.ones_like(x)


def mlp_forward(head: AffinityHead, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != head.query_dim:
        raise ValueError(f"query state has dim {z.shape[-1]}, head expects {head.query_dim}")
    return _act(head, z @ head.W1.T + head.b1) @ head.W2.T + head.b2


# --------------------------------------------------------------------------
# losses


@dataclass(frozen=True, eq=False)
class ContrastiveBatch:
    """One query against the objects of one scene.

    ``query`` is either a query state vector or a token sequence / string that
    the head encodes. Objects with no points are dropped from the candidates
    unless ``exclude_empty`` is False.
    """

    query: object
    candidates: Sequence[ObjectEmbedding]
    positive_ids: Sequence[int]
    temperature: float = DEFAULT_TEMPERATURE
    exclude_empty: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidBatchError("temperature must be positive")
        ids = {c.object_id for c in self.candidates}
        missing = set(self.positive_ids) - ids
        if missing:
            raise InvalidBatchError(f"positive ids {sorted(missing)} are not candidates")

    def active(self) -> tuple[np.ndarray, np.ndarray]:
        """(candidate matrix ``(M, C)``, boolean positive mask ``(M,)``)."""
        cands = [c for c in self.candidates if not (self.exclude_empty and c.is_empty)]
        if not cands:
            raise InvalidBatchError("batch has no candidates")
        pos = set(self.positive_ids)
        mask = np.array([c.object_id in pos for c in cands])
        if not mask.any():
            raise SkipSample("no positive candidates")
        return np.stack([c.vector for c in cands]), mask


@dataclass
class LossReport:
    value: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)


def _infonce_from_scores(scores: np.ndarray, mask: np.ndarray) -> float:
    # -log(S+ / (S+ + S-)) = log(1 + S- / S+); accurate when the loss is tiny,
    # and exactly 0 when there are no negatives.
    if mask.all():
        return 0.0
    return float(np.logaddexp(0.0, logsumexp(scores[~mask]) - logsumexp(scores[mask])))


def infonce_loss(batch: ContrastiveBatch, q) -> float:
    E, mask = batch.active()
    return _infonce_from_scores(E @ np.asarray(q, dtype=np.float64) / batch.temperature, mask)


def infonce_grad_q(batch: ContrastiveBatch, q) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to ``q``.

    With ``p`` the softmax over all candidates and ``p+`` the softmax over the
    positives, d loss / d score is ``p - p+``. It is evaluated as ``p`` on
    negatives and ``-w * p+`` on positives, ``w = S- / S`` being the negative
    mass, which avoids cancellation when the loss is small.
    """
    E, mask = batch.active()
    scores = E @ np.asarray(q, dtype=np.float64) / batch.temperature
    dscores = np.zeros_like(scores)
    if not mask.all():
        lse_pos = logsumexp(scores[mask])
        lse_neg = logsumexp(scores[~mask])
        lse_all = np.logaddexp(lse_pos, lse_neg)
        dscores[~mask] = np.exp(scores[~mask] - lse_all)
        dscores[mask] = -np.exp(lse_neg - lse_all) * np.exp(scores[mask] - lse_pos)
    return _infonce_from_scores(scores, mask), dscores @ E / batch.temperature


def _backprop(head: AffinityHead, z: np.ndarray, weights: np.ndarray | None, dq: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar with ``d/dq = dq`` through the MLP (and word table)."""
    pre = z @ head.W1.T + head.b1
    hidden = _act(head, pre)
    dpre = (head.W2.T @ dq) * _act_grad(head, pre)
    dz = head.W1.T @ dpre
    grads = {
        "W2": np.outer(dq, hidden),
        "b2": dq,
        "W1": np.outer(dpre, z),
        "b1": dpre,
        "table": np.outer(weights, dz) if weights is not None else np.zeros_like(head.table),
        "z": dz,
    }
    return grads


def _query_state(head: AffinityHead, query) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(query, str) or (isinstance(query, (list, tuple)) and all(isinstance(t, str) for t in query)):
        tokens = tokenize(query) if isinstance(query, str) else list(query)
        weights = token_weights(head, tokens)
        return weights @ head.table, weights
    return np.asarray(query, dtype=np.float64), None


def infonce_grad(batch: ContrastiveBatch, head: AffinityHead, query=None) -> LossReport:
    """InfoNCE value and exact gradients for every head parameter.

    ``query`` overrides ``batch.query``. When the query is given as tokens the
    word-table rows it uses receive gradient; ``gradients["z"]`` is always the
    gradient with respect to the query state.
    """
    z, weights = _query_state(head, batch.query if query is None else query)
    q = mlp_forward(head, z)
    value, dq = infonce_grad_q(batch, q)
    return LossReport(value, _backprop(head, z, weights, dq))


def mse_regression_loss(q, positives: Sequence[ObjectEmbedding]) -> float:
    """Mean squared error between ``q`` and the mean positive embedding."""
    if not positives:
        raise SkipSample("no positives to regress onto")
    target = np.mean([p.vector for p in positives], axis=0)
    return float(np.mean((np.asarray(q, dtype=np.float64) - target) ** 2))


def mse_regression_grad(batch: ContrastiveBatch, head: AffinityHead, query=None) -> LossReport:
    E, mask = batch.active()
    z, weights = _query_state(head, batch.query if query is None else query)
    q = mlp_forward(head, z)
    target = E[mask].mean(axis=0)
    dq = 2.0 * (q - target) / q.shape[0]
    return LossReport(float(np.mean((q - target) ** 2)), _backprop(head, z, weights, dq))


def total_loss(lm_loss: float = 0.0, contrastive_loss: float = 0.0) -> float:
    """Language-modeling loss plus contrastive loss."""
    if not (np.isfinite(lm_loss) and np.isfinite(contrastive_loss)):
        raise ValueError("losses must be finite")
    return float(lm_loss) + float(contrastive_loss)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    steps: int = 2000
    tau: float = DEFAULT_TEMPERATURE
    seed: int = 0
    loss_kind: str = "infonce"
    query_dim: int = 32
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.loss_kind not in ("infonce", "mse"):
            raise ConfigurationError(f"unknown loss kind {self.loss_kind!r}")
        if self.steps < 0 or not self.lr > 0 or not self.tau > 0:
            raise ConfigurationError("steps must be >= 0, lr and tau positive")


Sample = tuple  # (query tokens, SceneBundle, TargetSet)


class EmbeddingCache:
    """Object embeddings per scene, computed once per bundle instance."""

    def __init__(self):
        self._store: dict[int, tuple[SceneBundle, list[ObjectEmbedding]]] = {}

    def __call__(self, scene: SceneBundle) -> list[ObjectEmbedding]:
        key = id(scene)
        if key not in self._store:
            self._store[key] = (scene, embed_all_objects(scene))
        return self._store[key][1]


@dataclass
class _PackedBatch:
    weights: np.ndarray  # (N, V) token weights
    E: np.ndarray  # (N, M, C) candidates, zero padded
    valid: np.ndarray  # (N, M)
    positive: np.ndarray  # (N, M)


def _pack(samples, head: AffinityHead, cache: EmbeddingCache) -> _PackedBatch:
    rows = []
    for tokens, scene, target in samples:
        if not target.trainable:
            continue
        embs = [e for e in cache(scene) if not e.is_empty]
        pos = set(target.ids)
        mask = np.array([e.object_id in pos for e in embs], dtype=bool)
        if not mask.any():
            continue
        rows.append((token_weights(head, list(tokens)), np.stack([e.vector for e in embs]), mask))
    if not rows:
        raise ConfigurationError("no trainable samples (every target set is empty or skipped)")
    M = max(r[1].shape[0] for r in rows)
    N, C = len(rows), head.feature_dim
    E = np.zeros((N, M, C))
    valid = np.zeros((N, M), dtype=bool)
    positive = np.zeros((N, M), dtype=bool)
    for n, (_, e, mask) in enumerate(rows):
        E[n, : len(e)] = e
        valid[n, : len(e)] = True
        positive[n, : len(e)] = mask
    return _PackedBatch(np.stack([r[0] for r in rows]), E, valid, positive)


def _masked_logsumexp(scores, mask):
    """Row-wise log-sum-exp over ``mask``; ``-inf`` for rows with no entries."""
    masked = np.where(mask, scores, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return (top + np.log(np.exp(masked - top).sum(axis=1, keepdims=True)))[:, 0]


def batch_loss_and_grads(head: AffinityHead, packed: _PackedBatch, tau: float, loss_kind: str = "infonce"):
    """Mean loss over packed samples and its gradients for every parameter."""
    N = packed.weights.shape[0]
    Z = packed.weights @ head.table
    pre = Z @ head.W1.T + head.b1
    hidden = _act(head, pre)
    Q = hidden @ head.W2.T + head.b2

    if loss_kind == "infonce":
        scores = np.einsum("nmc,nc->nm", packed.E, Q) / tau
        negative = packed.valid & ~packed.positive
        lse_pos = _masked_logsumexp(scores, packed.positive)
        lse_neg = _masked_logsumexp(scores, negative)
        lse_all = np.logaddexp(lse_pos, lse_neg)
        losses = np.logaddexp(0.0, lse_neg - lse_pos)
        neg_mass = np.exp(lse_neg - lse_all)
        # exponents of masked-out entries are -inf, so padding never overflows
        dscores = np.exp(np.where(negative, scores - lse_all[:, None], -np.inf))
        dscores -= neg_mass[:, None] * np.exp(np.where(packed.positive, scores - lse_pos[:, None], -np.inf))
        dQ = np.einsum("nm,nmc->nc", dscores, packed.E) / tau
    else:
        targets = np.einsum("nm,nmc->nc", packed.positive.astype(float), packed.E)
        targets /= packed.positive.sum(axis=1, keepdims=True)
        diff = Q - targets
        losses = np.mean(diff**2, axis=1)
        dQ = 2.0 * diff / Q.shape[1]

    dQ /= N
    dpre = (dQ @ head.W2) * _act_grad(head, pre)
    dZ = dpre @ head.W1
    grads = {
        "W2": dQ.T @ hidden,
        "b2": dQ.sum(axis=0),
        "W1": dpre.T @ Z,
        "b1": dpre.sum(axis=0),
        "table": packed.weights.T @ dZ,
    }
    return float(losses.mean()), grads


def train_affinity(
    samples: Sequence[Sample],
    config: TrainConfig = TrainConfig(),
    vocabulary: Sequence[str] | None = None,
    cache: EmbeddingCache | None = None,
) -> AffinityHead:
    """Full-batch gradient descent on the contrastive (or MSE) objective.

    ``samples`` are ``(query tokens, SceneBundle, TargetSet)`` triples. Skipped
    and empty target sets contribute nothing.
    """
    cache = cache or EmbeddingCache()
    if vocabulary is None:
        vocabulary = build_vocabulary([o.category for _, scene, _ in samples for o in scene.objects])
    dims = {scene.feature_dim for _, scene, _ in samples if scene.feature_dim}
    if len(dims) != 1:
        raise ConfigurationError(f"samples must share one feature dimension, got {sorted(dims)}")
    head = init_head(vocabulary, dims.pop(), config.query_dim, config.hidden_dim, config.seed)
    packed = _pack(samples, head, cache)
    log.info("training on %d samples for %d steps", packed.weights.shape[0], config.steps)

    params = {k: v.copy() for k, v in head.params().items()}
    current = head
    for step in range(config.steps):
        loss, grads = batch_loss_and_grads(current, packed, config.tau, config.loss_kind)
        for name in PARAM_NAMES:
            params[name] -= config.lr * grads[name]
        current = head.with_params(**params)
        if log.isEnabledFor(logging.DEBUG) and step % 200 == 0:
            log.debug("step %d loss %.6f", step, loss)
    return current


# --------------------------------------------------------------------------
# retrieval


def retrieve_topk(q, embeddings: Sequence[ObjectEmbedding], k: int = 3) -> list[tuple[int, float]]:
    """Top-``k`` objects by dot product; ties go to the smaller object id."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    if not embeddings:
        raise ValueError("no embeddings to rank")
    q = np.asarray(q, dtype=np.float64)
    scored = [(float(e.vector @ q), e.object_id) for e in embeddings]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [(obj_id, sim) for sim, obj_id in scored[:k]]


def query_vector(head: AffinityHead, query) -> np.ndarray:
    return mlp_forward(head, encode_query(head, query))


def retrieval_accuracy(head: AffinityHead, samples: Sequence[Sample], k: int = 1, cache: EmbeddingCache | None = None) -> float:
    """Fraction of trainable samples whose top-``k`` hits a positive object.

    Only objects with at least one point are ranked; samples whose positives
    are all empty are not counted.
    """
    cache = cache or EmbeddingCache()
    hits = total = 0
    for tokens, scene, target in samples:
        if not target.trainable:
            continue
        embs = [e for e in cache(scene) if not e.is_empty]
        if not any(e.object_id in target.ids for e in embs):
            continue
        ranked = retrieve_topk(query_vector(head, list(tokens)), embs, k)
        hits += any(obj_id in target.ids for obj_id, _ in ranked)
        total += 1
    if total == 0:
        raise ValueError("no evaluable samples")
    return hits / total


# --------------------------------------------------------------------------
# persistence


def save_head(head: AffinityHead, path) -> None:
    """Write ``manifest.json`` plus one tensor file per parameter into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, value in head.params().items():
        write_tensor(root / f"{name}.cvpt", value)
        tensors[name] = f"{name}.cvpt"
    manifest = {
        "format": "cvp-affinity-head",
        "activation": head.activation,
        "vocabulary": list(head.vocabulary),
        "tensors": tensors,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_head(path) -> AffinityHead:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    params = {name: read_tensor(root / fname) for name, fname in manifest["tensors"].items()}
    return AffinityHead(vocabulary=manifest["vocabulary"], activation=manifest["activation"], **params)
