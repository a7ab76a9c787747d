"""Synthetic-data harness checking which probability each loss learns.

Data is drawn i.i.d. from a known user-item joint table, so the realized
empirical distribution can be counted exactly.  Each loss configuration is
trained to convergence on that data and the learned score table is compared,
up to an additive constant, against the optimum the loss should reach:

=====================================  =========================
configuration                          score converges to
=====================================  =========================
bce / user-marginal sampling           log p(i|u)
bce / item-marginal sampling           log p(u|i)
bce / product-of-marginals sampling    pmi(u,i)
bce / uniform sampling                 log p(u,i)
ssm                                    log p(i|u)
row_bcnce                              log p(i|u)
col_bcnce                              log p(u|i)
infonce, simclr                        pmi(u,i)
bbcnce                                 log p(u,i)
=====================================  =========================

Training is full-batch: with the batch equal to the whole sample, the
in-batch denominators reduce exactly to marginal-weighted sums over the
observed support, so the loss is evaluated in aggregated (count-weighted)
form with gradients flowing through the regular encoder backward pass.
Synthetic users enter the shared embedding table as one reserved token each,
giving every user a free embedding row.

A one-sided loss cannot pin the score table completely: a row-only softmax
is invariant to adding any per-user offset (a column-only one to any
per-item offset), so only the two-sided and binary-label losses determine
the table up to a single global constant.  The optimum check therefore fits
the constant structure each configuration actually determines (its
``gauge``) and gates on that, while also reporting the plain
single-constant diagnostics for reference.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import spearmanr

from .data import InteractionRecord, TrainingExample
from .losses import PRESETS, LossConfig
from .model import EncoderConfig, ModelParams, score_matrix_backward, score_matrix_forward
from .trainer import OptimizerState, TrainConfig, apply_optimizer_step

BCE_SWEEP = ("user-marginal", "item-marginal", "product-of-marginals", "uniform")
MULTINOMIAL_SWEEP = ("ssm", "infonce", "simclr", "row_bcnce", "col_bcnce", "bbcnce")

EQUAL_OPTIMA_GROUPS: dict[str, tuple[str, ...]] = {
    "log p(u,i)": ("bce/uniform", "bbcnce"),
    "log p(i|u)": ("bce/user-marginal", "row_bcnce", "ssm"),
    "log p(u|i)": ("bce/item-marginal", "col_bcnce"),
    "pmi": ("bce/product-of-marginals", "infonce", "simclr"),
}


@dataclass
class SyntheticSpec:
    """Small user-item joint to sample from, optionally drifting per month."""

    num_users: int = 8
    num_items: int = 12
    joint: np.ndarray | None = None
    num_samples: int = 200_000
    num_months: int = 1
    days_per_month: int = 30
    drift: list[np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.joint is None and self.drift is None:
            raise ValueError("provide a joint table or a drift sequence")
        tables = self.drift if self.drift is not None else [self.joint]
        for table in tables:
            if table.shape != (self.num_users, self.num_items):
                raise ValueError("joint table shape must be (num_users, num_items)")
            if np.any(table < 0):
                raise ValueError("joint table must be nonnegative")
            if abs(float(table.sum()) - 1.0) > 1e-12:
                raise ValueError("joint table must sum to 1 within 1e-12")
        if self.drift is not None and len(self.drift) != self.num_months:
            raise ValueError("drift must supply one table per month")

    def table_for_month(self, month: int) -> np.ndarray:
        if self.drift is not None:
            return self.drift[month - 1]
        return self.joint  # type: ignore[return-value]

    def user_token(self, user: int) -> int:
        """Embedding-table row reserved for a synthetic user identity."""
        return self.num_items + user


def random_joint(
    num_users: int,
    num_items: int,
    seed: int,
    table_rank: int = 3,
    sparsity: float = 0.3,
) -> np.ndarray:
    """Low-rank positive random table with a sparsified support, normalized."""
    rng = np.random.default_rng(seed)
    left = rng.gamma(shape=2.0, scale=1.0, size=(num_users, table_rank))
    right = rng.gamma(shape=2.0, scale=1.0, size=(table_rank, num_items))
    table = left @ right
    if sparsity > 0:
        mask = rng.random((num_users, num_items)) < sparsity
        # never empty a whole row or column
        for u in range(num_users):
            keep = rng.integers(num_items)
            mask[u, keep] = False
        for i in range(num_items):
            keep = rng.integers(num_users)
            mask[keep, i] = False
        table = np.where(mask, 0.0, table)
    return table / table.sum()


@dataclass
class EmpiricalTables:
    """Exact empirical distribution of a realized sample."""

    counts: np.ndarray

    total: int = field(init=False)
    joint: np.ndarray = field(init=False)
    p_user: np.ndarray = field(init=False)
    p_item: np.ndarray = field(init=False)
    observed: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.total = int(self.counts.sum())
        if self.total == 0:
            raise ValueError("empty sample")
        self.joint = self.counts / self.total
        self.p_user = self.joint.sum(axis=1)
        self.p_item = self.joint.sum(axis=0)
        self.observed = self.counts > 0

    @property
    def log_joint(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.joint)

    @property
    def log_p_user(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.p_user)

    @property
    def log_p_item(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.p_item)


@dataclass
class SyntheticSample:
    spec: SyntheticSpec
    records: list[InteractionRecord]
    examples: list[TrainingExample]
    counts: np.ndarray
    month_counts: list[np.ndarray]
    month_index: dict[int, int]

    @property
    def tables(self) -> EmpiricalTables:
        return EmpiricalTables(self.counts)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticSample:
    """Draw ``num_samples`` i.i.d. (user, item) events with uniform timestamps.

    Each event's day is uniform over the month span; the (user, item) cell is
    drawn from that month's joint table.  Users appear in the resulting
    examples as singleton pseudo-user sequences holding their reserved token.
    """
    rng = np.random.default_rng(seed)
    num_days = spec.num_months * spec.days_per_month
    days = np.sort(rng.integers(0, num_days, size=spec.num_samples))
    month_of = days // spec.days_per_month + 1

    records: list[InteractionRecord] = []
    examples: list[TrainingExample] = []
    counts = np.zeros((spec.num_users, spec.num_items), dtype=np.int64)
    month_counts = [np.zeros((spec.num_users, spec.num_items), dtype=np.int64) for _ in range(spec.num_months)]
    cells = np.empty(spec.num_samples, dtype=np.int64)
    for month in range(1, spec.num_months + 1):
        sel = month_of == month
        n = int(sel.sum())
        if n == 0:
            continue
        flat = spec.table_for_month(month).ravel()
        cells[sel] = rng.choice(flat.size, size=n, p=flat)
    for day, cell in zip(days, cells):
        user, item = divmod(int(cell), spec.num_items)
        records.append(InteractionRecord(user, item, int(day)))
        examples.append(
            TrainingExample(user_id=user, pseudo_user=(spec.user_token(user),), target_item=item, day=int(day))
        )
        counts[user, item] += 1
        month_counts[int(day) // spec.days_per_month][user, item] += 1
    month_index = {d: d // spec.days_per_month + 1 for d in range(num_days)}
    return SyntheticSample(spec, records, examples, counts, month_counts, month_index)


def _target_kind(config: LossConfig) -> str:
    if config.family == "bce":
        return {
            "user-marginal": "row",
            "item-marginal": "col",
            "product-of-marginals": "pmi",
            "uniform": "joint",
        }[config.negative_strategy]
    if config.family == "ssm":
        return "row"
    if config.family == "bidirectional":
        flags = (config.alpha, config.delta_alpha, config.beta, config.delta_beta)
        for name, preset in PRESETS.items():
            if preset == flags:
                return {"infonce": "pmi", "simclr": "pmi", "row_bcnce": "row", "col_bcnce": "col", "bbcnce": "joint"}[name]
        raise ValueError(f"no known optimum for bidirectional flags {flags}")
    raise ValueError(f"no optimum target for loss family {config.family!r}")


TARGET_NAMES = {"row": "log p(i|u)", "col": "log p(u|i)", "pmi": "pmi", "joint": "log p(u,i)"}


def optimum_gauge(config: LossConfig) -> str:
    """Constant structure the loss leaves undetermined at its optimum.

    ``none``: pinned up to one global constant (all bce strategies and any
    two-sided bidirectional setting).  ``per-user``: row-only losses (the
    row softmax cancels any per-user offset).  ``per-item``: column-only.
    """
    if config.family == "bce":
        return "none"
    if config.family == "ssm":
        return "per-user"
    if config.family == "bidirectional":
        if config.alpha and config.beta:
            return "none"
        return "per-user" if config.alpha else "per-item"
    raise ValueError(f"no optimum gauge for loss family {config.family!r}")


def _center(table: np.ndarray, mask: np.ndarray, gauge: str) -> np.ndarray:
    """Remove the gauge's undetermined offsets over the observed support."""
    masked = np.where(mask, table, np.nan)
    if gauge == "per-user":
        return masked - np.nanmean(masked, axis=1, keepdims=True)
    if gauge == "per-item":
        return masked - np.nanmean(masked, axis=0, keepdims=True)
    return masked - np.nanmean(masked)


def target_table(config: LossConfig, tables: EmpiricalTables) -> tuple[str, np.ndarray]:
    """Predicted optimum of the score table, NaN outside the observed support."""
    kind = _target_kind(config)
    log_joint = tables.log_joint
    if kind == "row":
        target = log_joint - tables.log_p_user[:, None]
    elif kind == "col":
        target = log_joint - tables.log_p_item[None, :]
    elif kind == "pmi":
        target = log_joint - tables.log_p_user[:, None] - tables.log_p_item[None, :]
    else:
        target = log_joint
    return TARGET_NAMES[kind], np.where(tables.observed, target, np.nan)


def population_loss(
    phi: np.ndarray,
    tables: EmpiricalTables,
    config: LossConfig,
    ssm_proposal: str = "marginal",
) -> tuple[float, np.ndarray]:
    """Exact full-batch loss over the empirical distribution, with gradient.

    For the in-batch families the denominators are the exact large-batch
    sums: every candidate enters weighted by its empirical marginal, which
    restricts the partition to the observed support.
    """
    joint = tables.joint
    log_pu, log_pi = tables.log_p_user, tables.log_p_item
    obs_users = tables.p_user > 0
    obs_items = tables.p_item > 0

    if config.family == "bce":
        m, k = joint.shape
        if config.negative_strategy == "user-marginal":
            p_n = tables.p_user[:, None] / k * np.ones_like(joint)
        elif config.negative_strategy == "item-marginal":
            p_n = np.ones_like(joint) * tables.p_item[None, :] / m
        elif config.negative_strategy == "product-of-marginals":
            p_n = tables.p_user[:, None] * tables.p_item[None, :]
        elif config.negative_strategy == "uniform":
            p_n = np.full_like(joint, 1.0 / (m * k))
        else:
            raise ValueError(f"unknown strategy {config.negative_strategy!r}")
        value = float(np.sum(joint * np.logaddexp(0.0, -phi)) + np.sum(p_n * np.logaddexp(0.0, phi)))
        sig = 1.0 / (1.0 + np.exp(-phi))
        dphi = -joint * (1.0 - sig) + p_n * sig
        return value, dphi

    if config.family == "ssm":
        if ssm_proposal == "marginal":
            masked = np.where(obs_items[None, :], phi, -np.inf)
        else:
            masked = phi
        lse = logsumexp(masked, axis=1)
        value = float(np.sum(np.where(tables.observed, joint * (-phi + lse[:, None]), 0.0)))
        softmax = np.exp(masked - lse[:, None])
        dphi = -joint + tables.p_user[:, None] * softmax
        return value, dphi

    if config.family != "bidirectional":
        raise ValueError(f"population loss undefined for family {config.family!r}")

    value = 0.0
    dphi = np.zeros_like(phi)
    if config.alpha:
        # weighted logits: phi + (1 - delta_alpha) * log p(i), support-restricted
        if config.delta_alpha:
            w = np.where(obs_items[None, :], phi, -np.inf)
        else:
            w = phi + log_pi[None, :]
        lse = logsumexp(w, axis=1)
        bias = config.delta_alpha * log_pi[None, :]
        per_cell = -phi + np.where(tables.observed, bias, 0.0) + lse[:, None]
        value += config.alpha * float(np.sum(np.where(tables.observed, joint * per_cell, 0.0)))
        softmax = np.exp(w - lse[:, None])
        dphi += config.alpha * (-joint + tables.p_user[:, None] * softmax)
    if config.beta:
        if config.delta_beta:
            w = np.where(obs_users[:, None], phi, -np.inf)
        else:
            w = phi + log_pu[:, None]
        lse = logsumexp(w, axis=0)
        bias = config.delta_beta * log_pu[:, None]
        per_cell = -phi + np.where(tables.observed, bias, 0.0) + lse[None, :]
        value += config.beta * float(np.sum(np.where(tables.observed, joint * per_cell, 0.0)))
        softmax = np.exp(w - lse[None, :])
        dphi += config.beta * (-joint + tables.p_item[None, :] * softmax)
    return value, dphi


def phi_table(
    params: ModelParams,
    spec: SyntheticSpec,
    enc_config: EncoderConfig,
) -> np.ndarray:
    """Score every synthetic user token against every item."""
    sequences = [(spec.user_token(u),) for u in range(spec.num_users)]
    phi, _ = score_matrix_forward(sequences, np.arange(spec.num_items), params, enc_config)
    return phi


def train_to_optimum(
    config: LossConfig,
    tables: EmpiricalTables,
    spec: SyntheticSpec,
    *,
    dim: int = 10,
    temperature: float = 0.05,
    epochs: int = 2000,
    learning_rate: float = 0.05,
    seed: int = 0,
    enc_config: EncoderConfig = EncoderConfig("mean"),
) -> ModelParams:
    """Full-batch training of one loss configuration on the empirical tables."""
    params = ModelParams.initialize(spec.num_items + spec.num_users, dim, temperature, seed)
    opt = OptimizerState.from_config(
        TrainConfig(learning_rate=learning_rate, optimizer="adam", batch_size=2, months=())
    )
    sequences = [(spec.user_token(u),) for u in range(spec.num_users)]
    item_ids = np.arange(spec.num_items)
    for _ in range(epochs):
        phi, cache = score_matrix_forward(sequences, item_ids, params, enc_config)
        _, dphi = population_loss(phi, tables, config, ssm_proposal=config.ssm_proposal)
        grads = score_matrix_backward(cache, dphi, params, enc_config)
        apply_optimizer_step(params, grads, opt)
    return params


@dataclass
class OptimumReport:
    """Comparison of a trained score table against its predicted optimum.

    ``constant``, ``residual`` and ``rank_correlation`` are the plain
    single-constant diagnostics; the ``*_gauged`` pair removes the offsets
    the loss provably cannot determine and carries the pass/fail gates.
    For gauge ``none`` the two sets coincide.
    """

    label: str
    seed: int
    target_name: str
    gauge: str
    constant: float
    residual: float
    rank_correlation: float
    residual_gauged: float
    rank_correlation_gauged: float
    num_observed: int
    num_excluded: int
    range_ok: bool
    passed: bool


def _rank_corr(a: np.ndarray, b: np.ndarray) -> float:
    if np.ptp(a) < 1e-12 or np.ptp(b) < 1e-12:
        return math.nan
    return float(spearmanr(a, b).statistic)


def check_optimum(
    config: LossConfig,
    params: ModelParams,
    tables: EmpiricalTables,
    spec: SyntheticSpec,
    *,
    enc_config: EncoderConfig = EncoderConfig("mean"),
    label: str = "",
    seed: int = 0,
    rank_gate: float = 0.95,
    residual_gate: float = 0.25,
) -> OptimumReport:
    """Fit the additive constants and report residual plus rank agreement.

    Cells never observed in the sample have undefined log targets and are
    excluded (their count is reported).  A constant target (uniform joint)
    leaves rank correlation undefined; the residual gate alone then decides.
    """
    phi = phi_table(params, spec, enc_config)
    target_name, target = target_table(config, tables)
    gauge = optimum_gauge(config)
    mask = tables.observed
    phi_obs = phi[mask]
    target_obs = target[mask]

    diffs = phi_obs - target_obs
    constant = float(diffs.mean())
    residual = float(np.abs(diffs - constant).max())
    rank = _rank_corr(phi_obs, target_obs)

    if gauge == "none":
        residual_gauged, rank_gauged = residual, rank
    else:
        diff_table = np.where(mask, phi - target, np.nan)
        axis = 1 if gauge == "per-user" else 0
        offsets = np.nanmean(diff_table, axis=axis, keepdims=True)
        residual_gauged = float(np.nanmax(np.abs(diff_table - offsets)))
        rank_gauged = _rank_corr(_center(phi, mask, gauge)[mask], _center(target, mask, gauge)[mask])

    centered = target_obs - (target_obs.max() + target_obs.min()) / 2.0
    range_ok = bool(np.abs(centered).max() <= 1.0 / params.temperature)
    passed = residual_gauged <= residual_gate and (math.isnan(rank_gauged) or rank_gauged >= rank_gate)
    return OptimumReport(
        label=label,
        seed=seed,
        target_name=target_name,
        gauge=gauge,
        constant=constant,
        residual=residual,
        rank_correlation=rank,
        residual_gauged=residual_gauged,
        rank_correlation_gauged=rank_gauged,
        num_observed=int(mask.sum()),
        num_excluded=int((~mask).sum()),
        range_ok=range_ok,
        passed=passed,
    )


def sweep_configs() -> list[tuple[str, LossConfig]]:
    """The full strategy-by-preset grid of checkable configurations."""
    configs: list[tuple[str, LossConfig]] = []
    for strategy in BCE_SWEEP:
        configs.append((f"bce/{strategy}", LossConfig(family="bce", negative_strategy=strategy)))
    for name in MULTINOMIAL_SWEEP:
        if name == "ssm":
            configs.append(("ssm", LossConfig(family="ssm")))
        else:
            configs.append((name, LossConfig.from_preset(name)))
    return configs


# Comparison gauge per equal-optimum group: one-sided members leave their
# per-side offsets undetermined, so mixed groups compare centered tables.
GROUP_GAUGE = {
    "log p(u,i)": "none",
    "log p(i|u)": "per-user",
    "log p(u|i)": "per-item",
    "pmi": "per-user",
}


@dataclass
class GroupAgreement:
    seed: int
    group: str
    label_a: str
    label_b: str
    rank_correlation: float


@dataclass
class SweepResult:
    reports: list[OptimumReport]
    agreements: list[GroupAgreement]
    phi_tables: dict[tuple[str, int], np.ndarray]
    masks: dict[int, np.ndarray]

    def all_passed(self) -> bool:
        return all(r.passed for r in self.reports)


def run_table_sweep(
    spec: SyntheticSpec,
    seeds: Sequence[int],
    *,
    dim: int = 10,
    temperature: float = 0.05,
    epochs: int = 2000,
    learning_rate: float = 0.05,
    rank_gate: float = 0.95,
    residual_gate: float = 0.25,
) -> SweepResult:
    """Train every configuration per seed and gate each against its optimum.

    Gate failures are flagged in the report rows, never raised.  Pairwise
    rank agreement inside each equal-optimum group is reported alongside.
    """
    reports: list[OptimumReport] = []
    agreements: list[GroupAgreement] = []
    phi_tables: dict[tuple[str, int], np.ndarray] = {}
    masks: dict[int, np.ndarray] = {}
    enc_config = EncoderConfig("mean")
    for seed in seeds:
        sample = generate_synthetic(spec, seed)
        tables = sample.tables
        mask = tables.observed
        masks[seed] = mask
        for label, config in sweep_configs():
            params = train_to_optimum(
                config,
                tables,
                spec,
                dim=dim,
                temperature=temperature,
                epochs=epochs,
                learning_rate=learning_rate,
                seed=seed,
            )
            reports.append(
                check_optimum(
                    config,
                    params,
                    tables,
                    spec,
                    enc_config=enc_config,
                    label=label,
                    seed=seed,
                    rank_gate=rank_gate,
                    residual_gate=residual_gate,
                )
            )
            phi_tables[(label, seed)] = phi_table(params, spec, enc_config)
        for group, labels in EQUAL_OPTIMA_GROUPS.items():
            gauge = GROUP_GAUGE[group]
            for pos, label_a in enumerate(labels):
                for label_b in labels[pos + 1 :]:
                    a = _center(phi_tables[(label_a, seed)], mask, gauge)[mask]
                    b = _center(phi_tables[(label_b, seed)], mask, gauge)[mask]
                    agreements.append(GroupAgreement(seed, group, label_a, label_b, _rank_corr(a, b)))
    return SweepResult(reports, agreements, phi_tables, masks)


def _fmt_rank(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.4f}"


def sweep_report_text(result: SweepResult) -> str:
    """Machine-readable sweep report: one row per (configuration, seed)."""
    lines = [
        "label\tseed\ttarget\tgauge\tconstant\tresidual\trank_correlation"
        "\tresidual_gauged\trank_correlation_gauged\trange_ok\tpass"
    ]
    for r in result.reports:
        lines.append(
            f"{r.label}\t{r.seed}\t{r.target_name}\t{r.gauge}\t{r.constant:.4f}\t{r.residual:.4f}"
            f"\t{_fmt_rank(r.rank_correlation)}\t{r.residual_gauged:.4f}"
            f"\t{_fmt_rank(r.rank_correlation_gauged)}\t{int(r.range_ok)}\t{'pass' if r.passed else 'FAIL'}"
        )
    lines.append("")
    lines.append("group\tseed\tlabel_a\tlabel_b\trank_correlation")
    for a in result.agreements:
        lines.append(f"{a.group}\t{a.seed}\t{a.label_a}\t{a.label_b}\t{_fmt_rank(a.rank_correlation)}")
    return "\n".join(lines) + "\n"
