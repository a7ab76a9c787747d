"""Matching losses and their analytic gradients.

Five families over the temperature-scaled cosine score ``phi``:

* ``bce``               binary cross-entropy on labeled pairs, with the
                        negative-sampling strategies living in the data module;
* ``bidirectional``     the generalized in-batch loss: a row softmax over the
                        batch's items plus a column softmax over the batch's
                        users, each optionally bias-corrected by subtracting
                        the log empirical marginal of the sampled side.  Flag
                        presets recover InfoNCE, SimCLR, row-bcNCE, col-bcNCE
                        and bbcNCE;
* ``full_softmax_row``  exact multinomial NLL with the partition over the whole
                        item vocabulary (desk-scale oracle);
* ``full_softmax_col``  the symmetric oracle over a supplied user universe;
* ``ssm``               sampled softmax with proposal-corrected logits.

Every loss reports its gradient with respect to the raw scores; parameter
gradients are obtained by chaining through the encoder backward passes in
:mod:`twotower.model`.  Softmax terms are computed with max-subtracted
log-sum-exp throughout; bias terms are added to the logits before
stabilization.  In-batch duplicates (two examples sharing a target) are not
masked: the marginal correction is the intended remedy for popularity skew.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from .data import EmpiricalMarginals, LabeledExample, TrainingExample, UserKey
from .model import (
    EncoderConfig,
    GradientTable,
    ModelParams,
    score_matrix_backward,
    score_matrix_forward,
    score_pairs_backward,
    score_pairs_forward,
    score_rowsets_backward,
    score_rowsets_forward,
)

LOSS_FAMILIES = ("bce", "ssm", "full_softmax_row", "full_softmax_col", "bidirectional")

# preset -> (alpha, delta_alpha, beta, delta_beta)
PRESETS: Mapping[str, tuple[int, int, int, int]] = {
    "infonce": (1, 0, 0, 0),
    "simclr": (1, 0, 1, 0),
    "row_bcnce": (1, 1, 0, 0),
    "col_bcnce": (0, 0, 1, 1),
    "bbcnce": (1, 1, 1, 1),
}


@dataclass(frozen=True)
class LossConfig:
    """Loss family plus the binary flags of the bidirectional loss."""

    family: str = "bidirectional"
    alpha: int = 1
    beta: int = 1
    delta_alpha: int = 1
    delta_beta: int = 1
    negative_strategy: str = "uniform"
    num_sampled: int = 10
    ssm_proposal: str = "marginal"
    preset: str | None = None

    def __post_init__(self) -> None:
        if self.family not in LOSS_FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}; choose from {LOSS_FAMILIES}")
        for name in ("alpha", "beta", "delta_alpha", "delta_beta"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")
        if self.family == "bidirectional" and self.alpha == 0 and self.beta == 0:
            raise ValueError("bidirectional loss with alpha=beta=0 is identically zero")
        if self.ssm_proposal not in ("marginal", "uniform"):
            raise ValueError("ssm_proposal must be 'marginal' or 'uniform'")
        if self.preset is not None:
            expected = PRESETS.get(self.preset)
            if expected is None:
                raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
            actual = (self.alpha, self.delta_alpha, self.beta, self.delta_beta)
            if actual != expected:
                raise ValueError(f"flags {actual} do not match preset {self.preset!r} {expected}")

    @classmethod
    def from_preset(cls, name: str, **kwargs) -> "LossConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        alpha, delta_alpha, beta, delta_beta = PRESETS[name]
        return cls(
            family="bidirectional",
            alpha=alpha,
            beta=beta,
            delta_alpha=delta_alpha,
            delta_beta=delta_beta,
            preset=name,
            **kwargs,
        )


@dataclass
class LossOutput:
    """Loss value, parameter gradients (sparse by row) and score gradients."""

    value: float
    gradients: GradientTable | None = None
    dscore: np.ndarray | list[np.ndarray] | None = None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def bce_value(phi: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean Bernoulli NLL of the pair logits and its score gradient."""
    phi = np.asarray(phi, dtype=float)
    labels = np.asarray(labels, dtype=float)
    # -log sigmoid(phi) = logaddexp(0, -phi); -log(1 - sigmoid(phi)) = logaddexp(0, phi)
    per = labels * np.logaddexp(0.0, -phi) + (1.0 - labels) * np.logaddexp(0.0, phi)
    value = float(per.mean())
    dphi = (_sigmoid(phi) - labels) / phi.size
    return value, dphi


def bidirectional_nce_loss(
    score_matrix: np.ndarray,
    log_p_u: np.ndarray,
    log_p_i: np.ndarray,
    config: LossConfig,
) -> LossOutput:
    """Generalized bidirectional in-batch loss on a precomputed score matrix.

    The r-th diagonal entry is the positive pair.  The row term softmaxes
    entry (r, r) against row r (the batch's items, each logit reduced by
    ``delta_alpha * log_p_i`` of its column); the column term softmaxes it
    against column r (the batch's users, each logit reduced by
    ``delta_beta * log_p_u`` of its row).  The value is
    ``alpha * mean(row terms) + beta * mean(col terms)`` -- accumulated in
    that order so the two halves decompose exactly.
    """
    phi = np.asarray(score_matrix, dtype=float)
    if phi.ndim != 2 or phi.shape[0] != phi.shape[1]:
        raise ValueError("score matrix must be square")
    size = phi.shape[0]
    if size < 2:
        raise ValueError("in-batch loss needs a batch of at least 2 (no negatives otherwise)")
    log_p_u = np.asarray(log_p_u, dtype=float)
    log_p_i = np.asarray(log_p_i, dtype=float)
    if log_p_u.shape != (size,) or log_p_i.shape != (size,):
        raise ValueError("bias vectors must align with the batch")

    alpha, beta = config.alpha, config.beta
    diag = np.arange(size)
    dphi = np.zeros_like(phi)
    value = 0.0

    if alpha:
        h = phi - config.delta_alpha * log_p_i[None, :]
        row_lse = logsumexp(h, axis=1)
        row_terms = row_lse - h[diag, diag]
        value += alpha * float(row_terms.mean())
        p_row = np.exp(h - row_lse[:, None])
        p_row[diag, diag] -= 1.0
        dphi += (alpha / size) * p_row
    if beta:
        o = phi - config.delta_beta * log_p_u[:, None]
        col_lse = logsumexp(o, axis=0)
        col_terms = col_lse - o[diag, diag]
        value += beta * float(col_terms.mean())
        p_col = np.exp(o - col_lse[None, :])
        p_col[diag, diag] -= 1.0
        dphi += (beta / size) * p_col

    return LossOutput(value=value, dscore=dphi)


def full_softmax_value(phi: np.ndarray, positive_cols: np.ndarray) -> tuple[float, np.ndarray]:
    """Exact softmax NLL along axis 1 with its score gradient."""
    phi = np.asarray(phi, dtype=float)
    positive_cols = np.asarray(positive_cols, dtype=np.int64)
    rows = np.arange(phi.shape[0])
    lse = logsumexp(phi, axis=1)
    value = float((lse - phi[rows, positive_cols]).mean())
    dphi = np.exp(phi - lse[:, None])
    dphi[rows, positive_cols] -= 1.0
    return value, dphi / phi.shape[0]


def bce_loss(
    batch: Sequence[LabeledExample],
    params: ModelParams,
    enc_config: EncoderConfig,
) -> LossOutput:
    """Binary cross-entropy over labeled pairs, with parameter gradients."""
    if not batch:
        raise ValueError("batch is empty")
    sequences = [ex.pseudo_user for ex in batch]
    items = [ex.target_item for ex in batch]
    labels = np.array([ex.label for ex in batch], dtype=float)
    phi, cache = score_pairs_forward(sequences, items, params, enc_config)
    value, dphi = bce_value(phi, labels)
    grads = score_pairs_backward(cache, dphi, params, enc_config)
    return LossOutput(value=value, gradients=grads, dscore=dphi)


def _bias_vectors(batch: Sequence[TrainingExample]) -> tuple[np.ndarray, np.ndarray]:
    log_p_u = np.empty(len(batch))
    log_p_i = np.empty(len(batch))
    for b, ex in enumerate(batch):
        if ex.log_p_u is None or ex.log_p_i is None:
            raise ValueError("batch examples lack bias annotations; run annotate_bias first")
        log_p_u[b] = ex.log_p_u
        log_p_i[b] = ex.log_p_i
    return log_p_u, log_p_i


def bidirectional_batch_loss(
    batch: Sequence[TrainingExample],
    params: ModelParams,
    enc_config: EncoderConfig,
    config: LossConfig,
) -> LossOutput:
    """Score the batch, apply the bidirectional loss, backprop to parameters."""
    sequences = [ex.pseudo_user for ex in batch]
    targets = [ex.target_item for ex in batch]
    log_p_u, log_p_i = _bias_vectors(batch)
    phi, cache = score_matrix_forward(sequences, targets, params, enc_config)
    out = bidirectional_nce_loss(phi, log_p_u, log_p_i, config)
    out.gradients = score_matrix_backward(cache, out.dscore, params, enc_config)
    return out


def full_softmax_row_loss(
    batch: Sequence[TrainingExample],
    params: ModelParams,
    enc_config: EncoderConfig,
    num_items: int | None = None,
) -> LossOutput:
    """Multinomial NLL with the partition over the entire item vocabulary."""
    if not batch:
        raise ValueError("batch is empty")
    num_items = params.num_items if num_items is None else num_items
    sequences = [ex.pseudo_user for ex in batch]
    targets = np.array([ex.target_item for ex in batch], dtype=np.int64)
    phi, cache = score_matrix_forward(sequences, np.arange(num_items), params, enc_config)
    value, dphi = full_softmax_value(phi, targets)
    grads = score_matrix_backward(cache, dphi, params, enc_config)
    return LossOutput(value=value, gradients=grads, dscore=dphi)


def full_softmax_col_loss(
    batch: Sequence[TrainingExample],
    params: ModelParams,
    enc_config: EncoderConfig,
    user_universe: Sequence[UserKey],
) -> LossOutput:
    """Symmetric oracle: softmax over a full pseudo-user universe per item."""
    if not batch:
        raise ValueError("batch is empty")
    index = {key: pos for pos, key in enumerate(user_universe)}
    try:
        positives = np.array([index[ex.pseudo_user] for ex in batch], dtype=np.int64)
    except KeyError as exc:
        raise ValueError("batch pseudo-user missing from the supplied universe") from exc
    targets = [ex.target_item for ex in batch]
    # Rows are universe users, columns the batch's targets.
    phi, cache = score_matrix_forward(list(user_universe), targets, params, enc_config)
    value, dphi_t = full_softmax_value(phi.T, positives)
    grads = score_matrix_backward(cache, dphi_t.T, params, enc_config)
    return LossOutput(value=value, gradients=grads, dscore=dphi_t.T)


def _proposal_distribution(
    marginals: EmpiricalMarginals,
    num_items: int,
    proposal: str,
) -> np.ndarray:
    if proposal == "uniform":
        return np.full(num_items, 1.0 / num_items)
    q = np.zeros(num_items)
    for item, count in marginals.count_item.items():
        q[item] = count / marginals.total
    return q


def ssm_loss(
    batch: Sequence[TrainingExample],
    params: ModelParams,
    enc_config: EncoderConfig,
    marginals: EmpiricalMarginals,
    num_sampled: int,
    rng: np.random.Generator,
    proposal: str = "marginal",
) -> LossOutput:
    """Sampled-softmax estimate of the row loss.

    Per positive, ``num_sampled`` negatives are drawn without replacement
    from the proposal over the whole vocabulary (the positive excluded) and
    every logit is corrected by ``-log q``; the loss is the softmax NLL over
    the positive plus its sampled candidates.
    """
    if not batch:
        raise ValueError("batch is empty")
    if num_sampled < 1:
        raise ValueError("num_sampled must be >= 1")
    num_items = params.num_items
    if num_sampled >= num_items:
        raise ValueError("num_sampled must be smaller than the item vocabulary")
    q = _proposal_distribution(marginals, num_items, proposal)

    sequences = [ex.pseudo_user for ex in batch]
    candidates: list[np.ndarray] = []
    for ex in batch:
        if q[ex.target_item] <= 0.0:
            raise ValueError(f"positive item {ex.target_item} has zero proposal probability")
        masked = q.copy()
        masked[ex.target_item] = 0.0
        support = np.count_nonzero(masked)
        if support < num_sampled:
            raise ValueError("proposal support too small to draw num_sampled negatives without replacement")
        masked /= masked.sum()
        negs = rng.choice(num_items, size=num_sampled, replace=False, p=masked)
        candidates.append(np.concatenate(([ex.target_item], negs)))

    phi_list, cache = score_rowsets_forward(sequences, candidates, params, enc_config)
    size = len(batch)
    value = 0.0
    dphi_list: list[np.ndarray] = []
    for cand, phi in zip(candidates, phi_list):
        corrected = phi - np.log(q[cand])
        lse = logsumexp(corrected)
        value += float(lse - corrected[0])
        p = np.exp(corrected - lse)
        p[0] -= 1.0
        dphi_list.append(p / size)
    value /= size
    grads = score_rowsets_backward(cache, dphi_list, params, enc_config)
    return LossOutput(value=value, gradients=grads, dscore=dphi_list)


def loss_with_gradients(
    batch: Sequence,
    params: ModelParams,
    enc_config: EncoderConfig,
    config: LossConfig,
    *,
    marginals: EmpiricalMarginals | None = None,
    rng: np.random.Generator | None = None,
    num_items: int | None = None,
    user_universe: Sequence[UserKey] | None = None,
) -> LossOutput:
    """Evaluate the configured loss on a batch; value plus exact gradients."""
    if config.family == "bce":
        return bce_loss(batch, params, enc_config)
    if config.family == "bidirectional":
        return bidirectional_batch_loss(batch, params, enc_config, config)
    if config.family == "full_softmax_row":
        return full_softmax_row_loss(batch, params, enc_config, num_items)
    if config.family == "full_softmax_col":
        if user_universe is None:
            raise ValueError("full_softmax_col needs a user universe")
        return full_softmax_col_loss(batch, params, enc_config, user_universe)
    if config.family == "ssm":
        if marginals is None or rng is None:
            raise ValueError("ssm loss needs marginals and an rng")
        return ssm_loss(batch, params, enc_config, marginals, config.num_sampled, rng, config.ssm_proposal)
    raise ValueError(f"unknown loss family {config.family!r}")
