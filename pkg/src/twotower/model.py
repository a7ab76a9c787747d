"""Two-tower encoder with a shared item-embedding table.

Both towers read the same embedding table: the item tower is a plain row
lookup, the user tower aggregates the rows of the pseudo-user sequence with
mean, last or attention pooling.  The match score is the l2-normalized dot
product rescaled by a fixed temperature, so scores live in
``[-1/tau, +1/tau]`` and are invariant to the scale of either vector.

Besides the forward operations this module provides the analytic backward
pass through scoring, normalization and aggregation, producing sparse
per-row gradients.  The loss modules supply the gradient of the loss with
respect to the score matrix; everything below the scores lives here.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

AGGREGATORS = ("mean", "last", "attention")


class VocabularyError(KeyError):
    """Raised when an item id falls outside the embedding table."""


@dataclass
class ModelParams:
    """Embedding table, attention query vector and temperature."""

    item_embeddings: np.ndarray  # (num_items, dim)
    attention_vector: np.ndarray  # (dim,)
    temperature: float

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.item_embeddings.ndim != 2:
            raise ValueError("item_embeddings must be a 2-d table")
        if self.attention_vector.shape != (self.item_embeddings.shape[1],):
            raise ValueError("attention_vector dimension must match the table")

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.item_embeddings.shape[1]

    @classmethod
    def initialize(cls, num_items: int, dim: int, temperature: float, seed: int) -> "ModelParams":
        """Fresh parameters: table i.i.d. uniform on [-1/sqrt(d), +1/sqrt(d)],
        attention vector zero (attention pooling then starts out as mean)."""
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        table = rng.uniform(-scale, scale, size=(num_items, dim))
        return cls(table, np.zeros(dim), temperature)

    def clone(self) -> "ModelParams":
        return ModelParams(self.item_embeddings.copy(), self.attention_vector.copy(), self.temperature)


@dataclass(frozen=True)
class EncoderConfig:
    """User-tower configuration; the item tower is always a table lookup."""

    aggregator: str = "mean"

    def __post_init__(self) -> None:
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")


@dataclass
class GradientTable:
    """Sparse gradient: touched embedding rows plus the attention vector."""

    rows: dict[int, np.ndarray] = field(default_factory=dict)
    attention: np.ndarray | None = None

    def add_row(self, row_id: int, grad: np.ndarray) -> None:
        if row_id in self.rows:
            self.rows[row_id] += grad
        else:
            self.rows[row_id] = grad.copy()

    def add_attention(self, grad: np.ndarray) -> None:
        if self.attention is None:
            self.attention = grad.copy()
        else:
            self.attention += grad

    def is_finite(self) -> bool:
        if self.attention is not None and not np.all(np.isfinite(self.attention)):
            return False
        return all(np.all(np.isfinite(g)) for g in self.rows.values())


def _resolve_sequence(pseudo_user: Sequence[int], params: ModelParams, strict: bool) -> np.ndarray:
    ids = np.asarray(pseudo_user, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("pseudo-user sequence is empty")
    known = (ids >= 0) & (ids < params.num_items)
    if not np.all(known):
        bad = ids[~known]
        if strict:
            raise VocabularyError(f"unknown item id(s) {bad.tolist()} in pseudo-user sequence")
        logger.warning("skipping %d unknown item id(s) in pseudo-user sequence", bad.size)
        ids = ids[known]
        if ids.size == 0:
            raise VocabularyError("pseudo-user sequence contains no known items")
    return ids


def encode_user(
    pseudo_user: Sequence[int],
    params: ModelParams,
    config: EncoderConfig,
    strict: bool = True,
) -> np.ndarray:
    """Aggregate the sequence's embedding rows into one raw user vector.

    With ``strict`` (training), out-of-vocabulary ids raise; otherwise they
    are skipped with a warning and only a fully unknown sequence raises.
    """
    ids = _resolve_sequence(pseudo_user, params, strict)
    rows = params.item_embeddings[ids]
    if config.aggregator == "mean":
        return rows.mean(axis=0)
    if config.aggregator == "last":
        return rows[-1].copy()
    scores = rows @ params.attention_vector
    weights = _softmax(scores)
    return weights @ rows


def encode_item(item_id: int, params: ModelParams) -> np.ndarray:
    """Return the item's embedding row (the item tower is the lookup)."""
    if not 0 <= item_id < params.num_items:
        raise VocabularyError(f"unknown item id {item_id}")
    return params.item_embeddings[item_id].copy()


def score(u_vec: np.ndarray, i_vec: np.ndarray, temperature: float) -> float:
    """Temperature-scaled cosine: ``<u|i> / (|u||i| tau)``."""
    nu = np.linalg.norm(u_vec)
    ni = np.linalg.norm(i_vec)
    if nu == 0.0 or ni == 0.0:
        raise ValueError("cannot score a zero-norm vector")
    return float(u_vec @ i_vec / (nu * ni * temperature))


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max()
    e = np.exp(shifted)
    return e / e.sum()


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm vector encountered during scoring")
    return x / norms[:, None], norms


@dataclass
class UserBatch:
    sequences: list[np.ndarray]
    vectors: np.ndarray  # (B, d) raw aggregator outputs
    attn_weights: list[np.ndarray] | None


def encode_user_batch(
    sequences: Sequence[Sequence[int]],
    params: ModelParams,
    config: EncoderConfig,
    strict: bool = True,
) -> UserBatch:
    resolved = [_resolve_sequence(seq, params, strict) for seq in sequences]
    vectors = np.empty((len(resolved), params.dim))
    attn_weights: list[np.ndarray] | None = None
    if config.aggregator == "attention":
        attn_weights = []
    for b, ids in enumerate(resolved):
        rows = params.item_embeddings[ids]
        if config.aggregator == "mean":
            vectors[b] = rows.mean(axis=0)
        elif config.aggregator == "last":
            vectors[b] = rows[-1]
        else:
            weights = _softmax(rows @ params.attention_vector)
            attn_weights.append(weights)  # type: ignore[union-attr]
            vectors[b] = weights @ rows
    return UserBatch(resolved, vectors, attn_weights)


def _user_backward(
    users: UserBatch,
    d_vectors: np.ndarray,
    params: ModelParams,
    config: EncoderConfig,
    grads: GradientTable,
) -> None:
    """Push gradients w.r.t. raw user vectors into the embedding rows."""
    for b, ids in enumerate(users.sequences):
        du = d_vectors[b]
        if config.aggregator == "mean":
            share = du / ids.size
            for item in ids:
                grads.add_row(int(item), share)
        elif config.aggregator == "last":
            grads.add_row(int(ids[-1]), du)
        else:
            rows = params.item_embeddings[ids]
            weights = users.attn_weights[b]  # type: ignore[index]
            q = rows @ du  # dL/dw per position
            ds = weights * (q - weights @ q)  # softmax backward
            for p, item in enumerate(ids):
                grads.add_row(int(item), weights[p] * du + ds[p] * params.attention_vector)
            grads.add_attention(rows.T @ ds)


@dataclass
class MatrixCache:
    """Forward state for a users-by-items score matrix."""

    users: UserBatch
    col_ids: np.ndarray
    u_hat: np.ndarray
    u_norm: np.ndarray
    v_hat: np.ndarray
    v_norm: np.ndarray
    cos: np.ndarray  # (B, C) cosine matrix; phi = cos / tau


def score_matrix_forward(
    sequences: Sequence[Sequence[int]],
    col_item_ids: Sequence[int],
    params: ModelParams,
    config: EncoderConfig,
    strict: bool = True,
) -> tuple[np.ndarray, MatrixCache]:
    """Score every user row against every item column."""
    users = encode_user_batch(sequences, params, config, strict)
    col_ids = np.asarray(col_item_ids, dtype=np.int64)
    if np.any((col_ids < 0) | (col_ids >= params.num_items)):
        raise VocabularyError("unknown item id among score columns")
    u_hat, u_norm = normalize_rows(users.vectors)
    v_hat, v_norm = normalize_rows(params.item_embeddings[col_ids])
    cos = u_hat @ v_hat.T
    phi = cos / params.temperature
    return phi, MatrixCache(users, col_ids, u_hat, u_norm, v_hat, v_norm, cos)


def score_matrix_backward(
    cache: MatrixCache,
    dphi: np.ndarray,
    params: ModelParams,
    config: EncoderConfig,
) -> GradientTable:
    """Chain a loss gradient w.r.t. the score matrix down to parameter rows."""
    tau = params.temperature
    g_cos = (dphi * cache.cos).astype(float)
    d_users = (dphi @ cache.v_hat - g_cos.sum(axis=1)[:, None] * cache.u_hat) / (tau * cache.u_norm[:, None])
    d_items = (dphi.T @ cache.u_hat - g_cos.sum(axis=0)[:, None] * cache.v_hat) / (tau * cache.v_norm[:, None])
    grads = GradientTable()
    for c, item in enumerate(cache.col_ids):
        grads.add_row(int(item), d_items[c])
    _user_backward(cache.users, d_users, params, config, grads)
    return grads


@dataclass
class PairCache:
    users: UserBatch
    item_ids: np.ndarray
    u_hat: np.ndarray
    u_norm: np.ndarray
    v_hat: np.ndarray
    v_norm: np.ndarray
    cos: np.ndarray  # (B,)


def score_pairs_forward(
    sequences: Sequence[Sequence[int]],
    item_ids: Sequence[int],
    params: ModelParams,
    config: EncoderConfig,
    strict: bool = True,
) -> tuple[np.ndarray, PairCache]:
    """Score the b-th user against the b-th item only."""
    users = encode_user_batch(sequences, params, config, strict)
    ids = np.asarray(item_ids, dtype=np.int64)
    if np.any((ids < 0) | (ids >= params.num_items)):
        raise VocabularyError("unknown item id among scored pairs")
    u_hat, u_norm = normalize_rows(users.vectors)
    v_hat, v_norm = normalize_rows(params.item_embeddings[ids])
    cos = np.einsum("bd,bd->b", u_hat, v_hat)
    return cos / params.temperature, PairCache(users, ids, u_hat, u_norm, v_hat, v_norm, cos)


def score_pairs_backward(
    cache: PairCache,
    dphi: np.ndarray,
    params: ModelParams,
    config: EncoderConfig,
) -> GradientTable:
    tau = params.temperature
    coef = dphi / tau
    d_users = (cache.v_hat - cache.cos[:, None] * cache.u_hat) * (coef / cache.u_norm)[:, None]
    d_items = (cache.u_hat - cache.cos[:, None] * cache.v_hat) * (coef / cache.v_norm)[:, None]
    grads = GradientTable()
    for b, item in enumerate(cache.item_ids):
        grads.add_row(int(item), d_items[b])
    _user_backward(cache.users, d_users, params, config, grads)
    return grads


@dataclass
class RowsetCache:
    """Forward state when every user row has its own candidate item list."""

    users: UserBatch
    candidate_ids: list[np.ndarray]
    u_hat: np.ndarray
    u_norm: np.ndarray
    v_hat: list[np.ndarray]
    v_norm: list[np.ndarray]
    cos: list[np.ndarray]


def score_rowsets_forward(
    sequences: Sequence[Sequence[int]],
    candidate_ids: Sequence[Sequence[int]],
    params: ModelParams,
    config: EncoderConfig,
) -> tuple[list[np.ndarray], RowsetCache]:
    users = encode_user_batch(sequences, params, config)
    u_hat, u_norm = normalize_rows(users.vectors)
    ids_list, vh_list, vn_list, cos_list, phi_list = [], [], [], [], []
    for b, cand in enumerate(candidate_ids):
        ids = np.asarray(cand, dtype=np.int64)
        if np.any((ids < 0) | (ids >= params.num_items)):
            raise VocabularyError("unknown item id among candidates")
        v_hat, v_norm = normalize_rows(params.item_embeddings[ids])
        cos = v_hat @ u_hat[b]
        ids_list.append(ids)
        vh_list.append(v_hat)
        vn_list.append(v_norm)
        cos_list.append(cos)
        phi_list.append(cos / params.temperature)
    return phi_list, RowsetCache(users, ids_list, u_hat, u_norm, vh_list, vn_list, cos_list)


def score_rowsets_backward(
    cache: RowsetCache,
    dphi: Sequence[np.ndarray],
    params: ModelParams,
    config: EncoderConfig,
) -> GradientTable:
    tau = params.temperature
    grads = GradientTable()
    d_users = np.zeros_like(cache.u_hat)
    for b, ids in enumerate(cache.candidate_ids):
        g = np.asarray(dphi[b], dtype=float)
        v_hat, v_norm, cos = cache.v_hat[b], cache.v_norm[b], cache.cos[b]
        d_users[b] = (g @ v_hat - (g @ cos) * cache.u_hat[b]) / (tau * cache.u_norm[b])
        d_items = (np.outer(g, cache.u_hat[b]) - (g * cos)[:, None] * v_hat) / (tau * v_norm[:, None])
        for c, item in enumerate(ids):
            grads.add_row(int(item), d_items[c])
    _user_backward(cache.users, d_users, params, config, grads)
    return grads


def score_matrix(batch: Sequence, params: ModelParams, config: EncoderConfig) -> np.ndarray:
    """Score matrix of a batch: entry (r, c) scores user r against target c."""
    sequences = [ex.pseudo_user for ex in batch]
    targets = [ex.target_item for ex in batch]
    phi, _ = score_matrix_forward(sequences, targets, params, config)
    return phi
