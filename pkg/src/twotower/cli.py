"""One command-line entry point for the whole pipeline.

Subcommands: ``prepare`` (logs to example files), ``train`` (incremental or
shuffled), ``eval`` (ranking metrics on the test month), ``verify`` (the
synthetic optimum sweep), ``retrieve`` (ad-hoc top-N for a query) and
``trace`` (per-month test metrics over saved checkpoints).  Every command
reads one config document, honors ``--seed``, writes the resolved config
next to its outputs, and is deterministic for a fixed seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import re
import shutil
import sys
from dataclasses import dataclass

import numpy as np

from . import config as config_mod
from . import data as data_mod
from .config import ConfigError, RunConfig, fingerprint, loss_config_from, render_config, verify_seeds
from .evaluation import build_eval_cases, evaluate
from .model import EncoderConfig, ModelParams
from .trainer import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_incremental,
    train_shuffled,
)
from .verify import SyntheticSpec, random_joint, run_table_sweep, sweep_report_text

logger = logging.getLogger(__name__)


class CliError(Exception):
    """User-facing command failure; message printed, exit code 1."""


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, dtype=np.uint64)[0])


_TAG_NEGATIVES = 11
_TAG_VALIDATION_CASES = 13
_TAG_TEST_CASES = 17


@dataclass
class Prepared:
    log: data_mod.InteractionLog
    split: data_mod.DatasetSplit
    marginals: data_mod.EmpiricalMarginals
    months_total: int
    train_months: list[int]


def _load_config(args: argparse.Namespace) -> RunConfig:
    path = args.config
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    cfg = config_mod.load_config(path)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _write_resolved(cfg: RunConfig) -> None:
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    with open(os.path.join(cfg.paths.output_dir, "resolved.cfg"), "w", encoding="utf-8") as out:
        out.write(render_config(cfg))


def _run_pipeline(cfg: RunConfig) -> Prepared:
    path = cfg.data.input
    if not path:
        raise CliError("data.input is not set in the config")
    if not os.path.exists(path):
        raise CliError(f"input log not found: {path}")
    with open(path, "r", encoding="utf-8") as src:
        try:
            log = data_mod.ingest_logs(src, delimiter=cfg.data.delimiter)
        except data_mod.IngestError as exc:
            raise CliError(f"{path}: {exc}") from exc
    examples = data_mod.build_examples(log.records, cfg.data.horizon_days, cfg.data.max_seq_len)
    months_total = cfg.data.months_total or log.num_months
    if months_total < 3:
        raise CliError(f"need at least 3 months of data, found {months_total}")
    split = data_mod.split_by_time(examples, months_total, log.day_to_month)
    split = data_mod.filter_sparse(split, cfg.data.min_degree)
    if not split.train:
        raise CliError("no training examples survive the split and degree filter")
    marginals = data_mod.compute_marginals(split.train)
    split = data_mod.DatasetSplit(
        train=data_mod.annotate_bias(split.train, marginals),
        validation=data_mod.annotate_bias(split.validation, marginals),
        test=data_mod.annotate_bias(split.test, marginals),
        month_index=split.month_index,
    )
    train_months = sorted({split.month_index[ex.day] for ex in split.train})
    return Prepared(log, split, marginals, months_total, train_months)


def _labeled_train(cfg: RunConfig, prepared: Prepared) -> list[data_mod.LabeledExample]:
    return data_mod.sample_negatives_bce(
        prepared.split.train,
        cfg.loss.negative_strategy,
        num_items=prepared.log.num_items,
        ratio=cfg.loss.negative_ratio,
        rng_seed=_derive_seed(cfg.seed, _TAG_NEGATIVES),
    )


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    prepared = _run_pipeline(cfg)
    _write_resolved(cfg)
    out_dir = cfg.paths.output_dir
    data_mod.write_examples_tsv(prepared.split.train, os.path.join(out_dir, "train_examples.tsv"))
    data_mod.write_examples_tsv(prepared.split.validation, os.path.join(out_dir, "validation_examples.tsv"))
    data_mod.write_examples_tsv(prepared.split.test, os.path.join(out_dir, "test_examples.tsv"))
    data_mod.write_marginals_tsv(prepared.marginals, os.path.join(out_dir, "marginals.tsv"))
    loss_config = loss_config_from(cfg)
    if loss_config.family == "bce":
        labeled = _labeled_train(cfg, prepared)
        data_mod.write_labeled_tsv(labeled, os.path.join(out_dir, "train_labeled.tsv"))
    print(
        f"prepared {len(prepared.split.train)} train / {len(prepared.split.validation)} validation / "
        f"{len(prepared.split.test)} test examples over {prepared.months_total} months -> {out_dir}"
    )
    return 0


def _validation_eval_fn(cfg: RunConfig, prepared: Prepared, enc: EncoderConfig):
    if not prepared.split.validation:
        logger.warning("validation split empty; no per-month metrics recorded")
        return None
    try:
        cases, pool = build_eval_cases(
            prepared.split.validation,
            cfg.eval.task,
            cfg.eval.num_negatives,
            seed=_derive_seed(cfg.seed, _TAG_VALIDATION_CASES),
            cutoff=cfg.eval.top_n,
        )
    except ValueError as exc:
        logger.warning("cannot build validation cases (%s); no per-month metrics recorded", exc)
        return None

    def eval_fn(params: ModelParams, month: int) -> dict:
        report = evaluate(cases, pool, params, enc)
        return {"recall": report.recall_at_n, "ndcg": report.ndcg_at_n}

    return eval_fn


def _write_trace(path: str, rows: list[dict], append: bool) -> None:
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, encoding="utf-8") as out:
        if mode == "w":
            out.write("month\trecall\tndcg\n")
        for row in rows:
            out.write(f"{row['month']}\t{row.get('recall', float('nan')):.6f}\t{row.get('ndcg', float('nan')):.6f}\n")


def _export_embeddings(path: str, params: ModelParams, prepared: Prepared, enc: EncoderConfig) -> None:
    from .model import encode_user

    item_token = {idx: tok for tok, idx in prepared.log.item_vocab.items()}
    keys = sorted({ex.pseudo_user for ex in prepared.split.train})
    with open(path, "w", encoding="utf-8") as out:
        for idx in range(params.num_items):
            vec = " ".join(f"{v:.6f}" for v in params.item_embeddings[idx])
            out.write(f"item\t{item_token[idx]}\t{vec}\n")
        for key in keys:
            vec = " ".join(f"{v:.6f}" for v in encode_user(key, params, enc))
            seq = " ".join(item_token[i] for i in key)
            out.write(f"user\t{seq}\t{vec}\n")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    prepared = _run_pipeline(cfg)
    _write_resolved(cfg)
    enc = EncoderConfig(cfg.model.aggregator)
    loss_config = loss_config_from(cfg)
    if loss_config.family == "bidirectional" and cfg.train.batch_size < 2:
        raise CliError("in-batch losses need train.batch_size >= 2 (a batch must contain a negative)")
    fp = fingerprint(cfg)
    train_config = TrainConfig(
        epochs_per_month=cfg.train.epochs_per_month,
        batch_size=cfg.train.batch_size,
        learning_rate=cfg.train.learning_rate,
        optimizer=cfg.train.optimizer,
        adam_beta1=cfg.train.adam_beta1,
        adam_beta2=cfg.train.adam_beta2,
        adam_epsilon=cfg.train.adam_epsilon,
        seed=cfg.seed,
        months=tuple(prepared.train_months),
    )
    params = ModelParams.initialize(prepared.log.num_items, cfg.model.dim, cfg.model.temperature, cfg.seed)
    examples = _labeled_train(cfg, prepared) if loss_config.family == "bce" else prepared.split.train
    eval_fn = _validation_eval_fn(cfg, prepared, enc)
    checkpoint_dir = os.path.join(cfg.paths.output_dir, "checkpoints")

    resume = None
    if args.checkpoint:
        try:
            resume = load_checkpoint(args.checkpoint, expected_fingerprint=fp)
        except (OSError, CheckpointError) as exc:
            raise CliError(str(exc)) from exc

    kwargs = dict(
        marginals=prepared.marginals,
        num_items=prepared.log.num_items,
        eval_fn=eval_fn,
        checkpoint_dir=checkpoint_dir,
        fingerprint=fp,
    )
    if loss_config.family == "full_softmax_col":
        kwargs["user_universe"] = sorted({ex.pseudo_user for ex in prepared.split.train})
    if cfg.train.mode == "incremental":
        result = train_incremental(
            examples, prepared.split.month_index, params, enc, loss_config, train_config, resume=resume, **kwargs
        )
    elif cfg.train.mode == "shuffled":
        result = train_shuffled(examples, prepared.split.month_index, params, enc, loss_config, train_config, **kwargs)
    else:
        raise CliError(f"unknown train.mode {cfg.train.mode!r}")

    _write_trace(os.path.join(cfg.paths.output_dir, "trace.tsv"), result.trace, append=resume is not None)
    final_path = os.path.join(checkpoint_dir, "final.ckpt")
    if result.checkpoints:
        shutil.copyfile(result.checkpoints[-1], final_path)
    for notice in result.notices:
        logger.info("%s", notice)
    if args.export_embeddings:
        _export_embeddings(args.export_embeddings, params, prepared, enc)
    print(f"trained {result.steps} steps over months {list(train_config.months)}; final checkpoint {final_path}")
    for row in result.trace:
        print(f"  month {row['month']}: recall={row.get('recall', float('nan')):.4f} ndcg={row.get('ndcg', float('nan')):.4f}")
    return 0


def _test_anchor_day(prepared: Prepared) -> int:
    test_days = [d for d, m in prepared.split.month_index.items() if m == prepared.months_total]
    return min(test_days) if test_days else max(prepared.split.month_index) + 1


def _load_params(args: argparse.Namespace, cfg: RunConfig, num_items: int) -> Checkpoint:
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    try:
        checkpoint = load_checkpoint(args.checkpoint, expected_fingerprint=fingerprint(cfg))
    except (OSError, CheckpointError) as exc:
        raise CliError(str(exc)) from exc
    if checkpoint.params.num_items != num_items:
        raise CliError(
            f"checkpoint vocabulary ({checkpoint.params.num_items} items) does not match data ({num_items})"
        )
    return checkpoint


def _eval_report(cfg: RunConfig, prepared: Prepared, params: ModelParams, task: str, verbose: bool):
    enc = EncoderConfig(cfg.model.aggregator)
    if not prepared.split.test:
        raise CliError("test split is empty; nothing to evaluate")
    cases, pool = build_eval_cases(
        prepared.split.test,
        task,
        cfg.eval.num_negatives,
        seed=_derive_seed(cfg.seed, _TAG_TEST_CASES),
        cutoff=cfg.eval.top_n,
    )
    return evaluate(
        cases,
        pool,
        params,
        enc,
        records=prepared.log.records,
        anchor_day=_test_anchor_day(prepared),
        window_days=cfg.eval.popularity_window_days,
        keep_per_case=verbose,
    )


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    prepared = _run_pipeline(cfg)
    _write_resolved(cfg)
    checkpoint = _load_params(args, cfg, prepared.log.num_items)
    task = args.task or cfg.eval.task
    report = _eval_report(cfg, prepared, checkpoint.params, task, args.verbose)
    payload = dataclasses.asdict(report)
    if not args.verbose:
        payload.pop("per_case")
    out_path = os.path.join(cfg.paths.output_dir, "eval_report.json")
    with open(out_path, "w", encoding="utf-8") as out:
        json.dump(payload, out, sort_keys=True, indent=2)
        out.write("\n")
    print(
        f"{task} over {report.num_cases} cases: recall@{report.cutoff}={report.recall_at_n:.4f} "
        f"ndcg@{report.cutoff}={report.ndcg_at_n:.4f} (report: {out_path})"
    )
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    _write_resolved(cfg)
    v = cfg.verify
    spec = SyntheticSpec(
        num_users=v.num_users,
        num_items=v.num_items,
        joint=random_joint(v.num_users, v.num_items, seed=v.table_seed, table_rank=v.table_rank, sparsity=v.sparsity),
        num_samples=v.num_samples,
    )
    result = run_table_sweep(
        spec,
        verify_seeds(cfg),
        dim=v.dim,
        temperature=v.temperature,
        epochs=v.epochs,
        learning_rate=v.learning_rate,
    )
    text = sweep_report_text(result)
    out_path = os.path.join(cfg.paths.output_dir, "sweep_report.tsv")
    with open(out_path, "w", encoding="utf-8") as out:
        out.write(text)
    print(text, end="")
    failed = [r for r in result.reports if not r.passed]
    print(f"{len(result.reports) - len(failed)}/{len(result.reports)} optimum checks passed -> {out_path}")
    return 0


def _rank_all_items(params: ModelParams, enc: EncoderConfig, query_ids: list[int], top_n: int) -> list[tuple[int, float]]:
    from .model import encode_user

    user = encode_user(query_ids, params, enc, strict=False)
    u_hat = user / np.linalg.norm(user)
    table = params.item_embeddings
    norms = np.linalg.norm(table, axis=1)
    scores = table @ u_hat / (norms * params.temperature)
    order = sorted(range(params.num_items), key=lambda i: (-scores[i], i))[:top_n]
    return [(i, float(scores[i])) for i in order]


def cmd_retrieve(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    prepared = _run_pipeline(cfg)
    checkpoint = _load_params(args, cfg, prepared.log.num_items)
    params = checkpoint.params
    enc = EncoderConfig(cfg.model.aggregator)
    task = args.task or cfg.eval.task
    top_n = args.top_n or cfg.eval.top_n
    tokens = [t for t in re.split(r"[ ,]+", args.query.strip()) if t]
    if not tokens:
        raise CliError("--query is empty")
    item_token = {idx: tok for tok, idx in prepared.log.item_vocab.items()}

    if task == "ir":
        ids = []
        for tok in tokens:
            if tok in prepared.log.item_vocab:
                ids.append(prepared.log.item_vocab[tok])
            else:
                logger.warning("unknown item token %r skipped", tok)
        if not ids:
            raise CliError("no known items in the query sequence")
        for rank, (item, score_value) in enumerate(_rank_all_items(params, enc, ids, top_n), start=1):
            print(f"{rank}\t{item_token[item]}\t{score_value:.6f}")
        return 0

    if len(tokens) != 1:
        raise CliError("user targeting takes exactly one item token as the query")
    tok = tokens[0]
    if tok not in prepared.log.item_vocab:
        raise CliError(f"unknown item token {tok!r}")
    item_id = prepared.log.item_vocab[tok]
    keys = sorted(
        {ex.pseudo_user for part in (prepared.split.train, prepared.split.validation, prepared.split.test) for ex in part}
    )
    key_owner: dict[tuple[int, ...], int] = {}
    for part in (prepared.split.train, prepared.split.validation, prepared.split.test):
        for ex in part:
            key_owner.setdefault(ex.pseudo_user, ex.user_id)
    from .model import encode_user_batch, normalize_rows

    users = encode_user_batch(keys, params, enc, strict=True)
    u_hat, _ = normalize_rows(users.vectors)
    item_vec = params.item_embeddings[item_id]
    i_hat = item_vec / np.linalg.norm(item_vec)
    scores = u_hat @ i_hat / params.temperature
    order = sorted(range(len(keys)), key=lambda pos: (-scores[pos], pos))[:top_n]
    user_token = {idx: t for t, idx in prepared.log.user_vocab.items()}
    for rank, pos in enumerate(order, start=1):
        print(f"{rank}\t{user_token[key_owner[keys[pos]]]}\t{scores[pos]:.6f}")
    return 0


def cmd_trace(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    prepared = _run_pipeline(cfg)
    _write_resolved(cfg)
    directory = args.checkpoint_dir or os.path.join(cfg.paths.output_dir, "checkpoints")
    paths = sorted(p for p in glob.glob(os.path.join(directory, "month_*.ckpt")) if "_epoch_" not in p)
    if not paths:
        raise CliError(f"no month checkpoints found in {directory}")
    task = args.task or cfg.eval.task
    rows = []
    for path in paths:
        try:
            checkpoint = load_checkpoint(path, expected_fingerprint=fingerprint(cfg))
        except CheckpointError as exc:
            raise CliError(str(exc)) from exc
        month = int(os.path.basename(path)[len("month_") : len("month_") + 4])
        report = _eval_report(cfg, prepared, checkpoint.params, task, verbose=False)
        rows.append({"month": month, "recall": report.recall_at_n, "ndcg": report.ndcg_at_n})
    out_path = os.path.join(cfg.paths.output_dir, "month_trace.tsv")
    _write_trace(out_path, rows, append=False)
    print("month\trecall\tndcg")
    for row in rows:
        print(f"{row['month']}\t{row['recall']:.6f}\t{row['ndcg']:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twotower", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
        p.add_argument("--config", required=True, help="run configuration file (key = value lines)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="checkpoint file path")

    common(sub.add_parser("prepare", help="build example files from the raw event log"))
    p_train = sub.add_parser("train", help="train (incremental by month, or shuffled)")
    common(p_train, checkpoint=True)
    p_train.add_argument("--export-embeddings", default=None, help="write user/item vectors to this TSV")
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test month")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--task", choices=("ir", "ut"), default=None)
    p_eval.add_argument("--verbose", action="store_true", help="include the per-case breakdown")
    common(sub.add_parser("verify", help="run the synthetic optimum sweep"))
    p_ret = sub.add_parser("retrieve", help="rank items for a user sequence, or users for an item")
    common(p_ret, checkpoint=True)
    p_ret.add_argument("--task", choices=("ir", "ut"), default=None)
    p_ret.add_argument("--query", required=True, help="item tokens (ir) or one item token (ut)")
    p_ret.add_argument("--top-n", type=int, default=None)
    p_trace = sub.add_parser("trace", help="per-month test metrics over saved month checkpoints")
    common(p_trace, checkpoint=False)
    p_trace.add_argument("--checkpoint-dir", default=None)
    p_trace.add_argument("--task", choices=("ir", "ut"), default=None)
    return parser


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "retrieve": cmd_retrieve,
    "trace": cmd_trace,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
