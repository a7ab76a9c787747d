"""Ranking evaluation for item recommendation (IR) and user targeting (UT).

The protocol pairs every test positive with a fixed number of uniformly
sampled negatives from the task's candidate pool, ranks the pool by match
score and reports Recall@N and NDCG@N averaged per case, plus popularity
statistics (trailing-window interaction counts) of the retrieved objects.
"""

from __future__ import annotations

import math
import statistics
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .data import InteractionRecord, TrainingExample, UserKey
from .model import EncoderConfig, ModelParams, encode_user_batch, normalize_rows

TASKS = ("ir", "ut")


@dataclass(frozen=True)
class EvalCase:
    """One ranking problem: a query against a fixed candidate pool.

    For IR the query is a pseudo-user sequence and candidates are item ids;
    for UT the query is an item id and candidates are indices into the eval
    pool's user-key list.
    """

    task: str
    query: UserKey | int
    positives: frozenset[int]
    candidates: tuple[int, ...]
    cutoff: int


@dataclass
class EvalPool:
    """Shared candidate universe for a batch of cases."""

    task: str
    user_keys: tuple[UserKey, ...] | None = None
    key_owner: dict[UserKey, int] | None = None


@dataclass
class EvalReport:
    task: str
    cutoff: int
    num_cases: int
    recall_at_n: float
    ndcg_at_n: float
    popularity_median: float | None = None
    popularity_mean: float | None = None
    per_case: list[dict] | None = None


def build_eval_cases(
    test_examples: Sequence[TrainingExample],
    task: str,
    num_negatives: int,
    seed: int,
    cutoff: int,
) -> tuple[list[EvalCase], EvalPool]:
    """One case per (query, positive) pair with sampled negatives.

    IR: each test example's target is the positive, negatives drawn
    uniformly without replacement from the test item pool excluding every
    positive of that user.  UT is symmetric over pseudo-user keys.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if num_negatives < 0:
        raise ValueError("num_negatives must be >= 0")
    if not test_examples:
        raise ValueError("no test examples to evaluate")
    rng = np.random.default_rng(seed)
    ordered = sorted(test_examples, key=lambda e: (e.user_id, e.day, e.target_item, e.pseudo_user))
    cases: list[EvalCase] = []

    if task == "ir":
        pool = sorted({ex.target_item for ex in ordered})
        pool_arr = np.array(pool, dtype=np.int64)
        user_positives: dict[int, set[int]] = {}
        for ex in ordered:
            user_positives.setdefault(ex.user_id, set()).add(ex.target_item)
        for ex in ordered:
            exclude = user_positives[ex.user_id]
            eligible = pool_arr[~np.isin(pool_arr, sorted(exclude))]
            if eligible.size < num_negatives:
                raise ValueError(
                    f"item pool too small: {eligible.size} eligible negatives, {num_negatives} requested"
                )
            negs = rng.choice(eligible, size=num_negatives, replace=False) if num_negatives else np.array([], dtype=np.int64)
            candidates = (ex.target_item, *[int(n) for n in negs])
            cases.append(EvalCase("ir", ex.pseudo_user, frozenset({ex.target_item}), candidates, cutoff))
        return cases, EvalPool(task="ir")

    keys = sorted({ex.pseudo_user for ex in ordered})
    key_index = {key: pos for pos, key in enumerate(keys)}
    key_owner: dict[UserKey, int] = {}
    for ex in ordered:
        key_owner.setdefault(ex.pseudo_user, ex.user_id)
    item_positives: dict[int, set[int]] = {}
    for ex in ordered:
        item_positives.setdefault(ex.target_item, set()).add(key_index[ex.pseudo_user])
    all_indices = np.arange(len(keys))
    for ex in ordered:
        positive = key_index[ex.pseudo_user]
        exclude = item_positives[ex.target_item]
        eligible = all_indices[~np.isin(all_indices, sorted(exclude))]
        if eligible.size < num_negatives:
            raise ValueError(
                f"user pool too small: {eligible.size} eligible negatives, {num_negatives} requested"
            )
        negs = rng.choice(eligible, size=num_negatives, replace=False) if num_negatives else np.array([], dtype=np.int64)
        candidates = (positive, *[int(n) for n in negs])
        cases.append(EvalCase("ut", ex.target_item, frozenset({positive}), candidates, cutoff))
    return cases, EvalPool(task="ut", user_keys=tuple(keys), key_owner=key_owner)


def _candidate_vectors(
    case: EvalCase,
    params: ModelParams,
    enc_config: EncoderConfig,
    pool: EvalPool,
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized query vector and candidate matrix for one case."""
    if case.task == "ir":
        users = encode_user_batch([case.query], params, enc_config, strict=True)
        query = users.vectors[0]
        cand = params.item_embeddings[np.asarray(case.candidates, dtype=np.int64)]
    else:
        query = params.item_embeddings[int(case.query)]
        keys = [pool.user_keys[idx] for idx in case.candidates]
        cand = encode_user_batch(keys, params, enc_config, strict=True).vectors
    q_hat, _ = normalize_rows(query[None, :])
    c_hat, _ = normalize_rows(cand)
    return q_hat[0], c_hat


def rank_candidates(
    case: EvalCase,
    params: ModelParams,
    enc_config: EncoderConfig,
    pool: EvalPool,
) -> list[int]:
    """Candidates by descending score; ties broken by ascending id."""
    q_hat, c_hat = _candidate_vectors(case, params, enc_config, pool)
    scores = c_hat @ q_hat / params.temperature
    order = sorted(range(len(case.candidates)), key=lambda pos: (-scores[pos], case.candidates[pos]))
    return [case.candidates[pos] for pos in order]


def recall_at_n(case: EvalCase, ranking: Sequence[int]) -> float:
    top = set(ranking[: case.cutoff])
    hits = len(top & case.positives)
    return hits / min(len(case.positives), case.cutoff)


def ndcg_at_n(case: EvalCase, ranking: Sequence[int]) -> float:
    dcg = 0.0
    for pos, candidate in enumerate(ranking[: case.cutoff], start=1):
        if candidate in case.positives:
            dcg += 1.0 / math.log2(pos + 1)
    ideal = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(len(case.positives), case.cutoff) + 1))
    return dcg / ideal


def popularity_counts(
    records: Sequence[InteractionRecord],
    anchor_day: int,
    window_days: int = 365,
) -> tuple[Counter, Counter]:
    """Interactions per item and per user inside ``[anchor-window, anchor)``."""
    items: Counter = Counter()
    users: Counter = Counter()
    lo = anchor_day - window_days
    for rec in records:
        if lo <= rec.day < anchor_day:
            items[rec.item_id] += 1
            users[rec.user_id] += 1
    return items, users


def popularity_stats(top_lists: Sequence[Sequence[int]], counts: Counter) -> tuple[float, float]:
    """Median and mean trailing-window popularity over all retrieved objects."""
    values = [counts.get(obj, 0) for ranking in top_lists for obj in ranking]
    if not values:
        return 0.0, 0.0
    return float(statistics.median(values)), float(statistics.fmean(values))


def evaluate(
    cases: Sequence[EvalCase],
    pool: EvalPool,
    params: ModelParams,
    enc_config: EncoderConfig,
    *,
    records: Sequence[InteractionRecord] | None = None,
    anchor_day: int | None = None,
    window_days: int = 365,
    keep_per_case: bool = False,
) -> EvalReport:
    """Rank every case and aggregate metrics (mean of per-case values)."""
    if not cases:
        raise ValueError("no evaluation cases")
    recalls: list[float] = []
    ndcgs: list[float] = []
    per_case: list[dict] = []
    top_lists: list[list[int]] = []
    for case in cases:
        ranking = rank_candidates(case, params, enc_config, pool)
        r = recall_at_n(case, ranking)
        n = ndcg_at_n(case, ranking)
        recalls.append(r)
        ndcgs.append(n)
        top = ranking[: case.cutoff]
        if pool.task == "ut":
            top_objects = [pool.key_owner[pool.user_keys[idx]] for idx in top]
        else:
            top_objects = top
        top_lists.append(top_objects)
        if keep_per_case:
            per_case.append({"query": list(case.query) if case.task == "ir" else case.query, "recall": r, "ndcg": n, "top": top_objects})

    pop_median = pop_mean = None
    if records is not None and anchor_day is not None:
        item_counts, user_counts = popularity_counts(records, anchor_day, window_days)
        counts = item_counts if pool.task == "ir" else user_counts
        pop_median, pop_mean = popularity_stats(top_lists, counts)

    return EvalReport(
        task=cases[0].task,
        cutoff=cases[0].cutoff,
        num_cases=len(cases),
        recall_at_n=float(np.mean(recalls)),
        ndcg_at_n=float(np.mean(ndcgs)),
        popularity_median=pop_median,
        popularity_mean=pop_mean,
        per_case=per_case if keep_per_case else None,
    )
