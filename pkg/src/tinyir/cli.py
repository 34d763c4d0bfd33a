"""Single command-line entry point exposing the whole pipeline.

Every subcommand is one process, reads and writes only the files named in
its arguments, and funnels all randomness through explicit seeds, so two
invocations with identical inputs produce byte-identical outputs.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. Errors are a single machine-parsable line on stderr of the form
``tinyir: error: <kind>: <message>``. The TINYIR_CONFIG environment
variable supplies a default --config path where one applies.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import shutil
import sys
import types
import typing

import numpy as np

from . import __version__
from .augment import CROP, DROPOUT, AugmentationConfig, build_batches, dump_pairs
from .corpus import EOS, DocumentStore, Vocabulary, build_vocab, content_ids, \
    ingest_jsonl, tokenize
from .errors import ConfigError, ConflictError, DataError, NumericalError, \
    ParseError, ShapeError, TinyIRError
from .experiments import ContextStudyConfig, ExperimentSetup, PasskeySpec, \
    SyntheticCorpusSpec, generate_passkey_corpus, generate_synthetic_corpus, \
    run_ablation_hard_negatives, run_augmentation_comparison, run_context_pair, \
    run_fill_fraction_sweep
from .gradcheck import check_gradients, run_standard_suite
from .model import ModelConfig, embed_eos, init_params, load_checkpoint, \
    checkpoint_fingerprint
from .retrieval import embed_corpus, embed_text, evaluate, load_index, \
    load_qrels, load_queries, mrr, ndcg_at_k, recall_at_k, save_index, \
    save_run, search as dense_search, bm25_run
from .sparse import BM25Params, build_index, load_negatives, mine_all, \
    save_negatives
from .training import SCOPE_BATCH, SCOPE_OWN, ContrastiveBatch, TrainConfig, \
    info_nce_loss, train
from . import tensor as T


# ---------------------------------------------------------------------------
# config file -> dataclass
# ---------------------------------------------------------------------------


def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        members = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(members[0], value, where)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where + ".")
    if origin is tuple:
        members = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {where!r} expects a list")
        if len(members) == 2 and members[1] is Ellipsis:
            return tuple(_coerce(members[0], v, where) for v in value)
        if len(value) != len(members):
            raise ConfigError(f"config key {where!r} expects {len(members)} items")
        return tuple(_coerce(m, v, where) for m, v in zip(members, value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {where!r} expects a number")
        return float(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {where!r} expects true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {where!r} expects an integer")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {where!r} expects a string")
        return value
    raise ConfigError(f"config key {where!r} has unsupported type {tp!r}")


def from_dict(cls, data, where: str = ""):
    """Build a (possibly nested) config dataclass from parsed JSON.

    Unknown keys are rejected with the full dotted path; missing keys fall
    back to the dataclass defaults.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"config section {where or cls.__name__!r} must be an object")
    by_name = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in by_name:
            raise ConfigError(f"unknown config key {where + str(key)!r}")
    hints = typing.get_type_hints(cls)
    kwargs = {
        name: _coerce(hints[name], value, where + name)
        for name, value in data.items()
    }
    return cls(**kwargs)


def _config_source(args) -> dict:
    """--config flag, else $TINYIR_CONFIG, else empty (all defaults)."""
    path = args.config or os.environ.get("TINYIR_CONFIG")
    if not path:
        return {}
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    return data


def _dump_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# shared data loading
# ---------------------------------------------------------------------------


def _load_store(path: str) -> tuple[DocumentStore, Vocabulary | None]:
    """Accept either a raw JSONL corpus or a directory produced by `ingest`
    (corpus.jsonl plus optional vocab.txt)."""
    if os.path.isdir(path):
        store = ingest_jsonl(os.path.join(path, "corpus.jsonl"))
        vocab_path = os.path.join(path, "vocab.txt")
        vocab = Vocabulary.load(vocab_path) if os.path.exists(vocab_path) else None
        return store, vocab
    return ingest_jsonl(path), None


def _ensure_vocab(store: DocumentStore, vocab: Vocabulary | None,
                  max_size: int, min_freq: int = 1) -> Vocabulary:
    if vocab is not None:
        return vocab
    return build_vocab(store, max_size, min_freq)


def _check_vocab_matches(cfg: ModelConfig, vocab: Vocabulary) -> None:
    if cfg.vocab_size != len(vocab):
        raise ConflictError(
            f"checkpoint expects a vocabulary of {cfg.vocab_size} tokens "
            f"but the store provides {len(vocab)}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_ingest(args) -> int:
    store = ingest_jsonl(args.jsonl)
    vocab = build_vocab(store, args.vocab_size, args.min_freq)
    os.makedirs(args.out, exist_ok=True)
    store.save_jsonl(os.path.join(args.out, "corpus.jsonl"))
    vocab.save(os.path.join(args.out, "vocab.txt"))
    print(f"ingested {len(store)} documents, vocabulary of {len(vocab)} tokens "
          f"-> {args.out}")
    return 0


def _cmd_index(args) -> int:
    store, vocab = _load_store(args.store)
    vocab = _ensure_vocab(store, vocab, args.vocab_size)
    index = build_index(store, vocab, BM25Params(k1=args.k1, b=args.b))
    n_postings = sum(len(p) for p in index.postings.values())
    print(f"indexed {index.n_docs} documents: {len(index.postings)} terms, "
          f"{n_postings} postings, avgdl {index.avgdl:.2f} "
          f"(k1={index.params.k1}, b={index.params.b})")
    return 0


def _cmd_mine(args) -> int:
    store, vocab = _load_store(args.store)
    vocab = _ensure_vocab(store, vocab, args.vocab_size)
    index = build_index(store, vocab, BM25Params(k1=args.k1, b=args.b))
    negatives = mine_all(store, index, args.k, vocab,
                         query_len=args.query_len, seed=args.seed)
    save_negatives(args.out, negatives)
    print(f"mined {args.k} hard negatives for {len(negatives)} documents -> {args.out}")
    return 0


_MODEL_FLAG_FIELDS = ("d_model", "n_heads", "n_layers", "d_ff", "max_context",
                      "rope_theta")


def _train_configs(args, vocab_size: int) -> tuple[ModelConfig, AugmentationConfig, TrainConfig]:
    """Config file sections merged with command-line overrides."""
    data = _config_source(args)
    for section in data:
        if section not in ("model", "augmentation", "training"):
            raise ConfigError(f"unknown config section {section!r}")

    model_section = dict(data.get("model", {}))
    if "vocab_size" in model_section:
        raise ConfigError("model.vocab_size is derived from the corpus vocabulary")
    model_cfg = from_dict(ModelConfig, {**model_section, "vocab_size": vocab_size},
                          "model.")
    aug_cfg = from_dict(AugmentationConfig, data.get("augmentation", {}),
                        "augmentation.")
    train_cfg = from_dict(TrainConfig, data.get("training", {}), "training.")

    model_over = {f: getattr(args, f) for f in _MODEL_FLAG_FIELDS
                  if getattr(args, f) is not None}
    if args.attn is not None:
        model_over["attn_mode"] = args.attn
    if model_over:
        model_cfg = dataclasses.replace(model_cfg, **model_over)

    aug_over = {}
    for flag, field in (("mode", "mode"), ("k", "k_negatives"),
                        ("anchor_len", "anchor_len"), ("passage_len", "passage_len"),
                        ("dropout_p", "dropout_p")):
        if getattr(args, flag) is not None:
            aug_over[field] = getattr(args, flag)
    if args.seed is not None:
        aug_over["seed"] = args.seed
    if aug_over:
        aug_cfg = dataclasses.replace(aug_cfg, **aug_over)

    train_over = {}
    for flag in ("tau", "lr", "batch_size", "epochs", "weight_decay",
                 "grad_clip", "warmup_steps", "negatives_scope",
                 "lora_rank", "lora_alpha"):
        if getattr(args, flag) is not None:
            train_over[flag] = getattr(args, flag)
    if args.lora:
        train_over["use_lora"] = True
    if args.seed is not None:
        train_over["seed"] = args.seed
    if train_over:
        train_cfg = dataclasses.replace(train_cfg, **train_over)
    return model_cfg, aug_cfg, train_cfg


def _cmd_train(args) -> int:
    store, vocab = _load_store(args.store)
    vocab = _ensure_vocab(store, vocab, args.vocab_size)
    model_cfg, aug_cfg, train_cfg = _train_configs(args, len(vocab))

    if args.negatives:
        negatives = load_negatives(args.negatives)
    elif aug_cfg.k_negatives > 0:
        index = build_index(store, vocab)
        negatives = mine_all(store, index, aug_cfg.k_negatives, vocab,
                             query_len=args.query_len, seed=args.mine_seed)
    else:
        negatives = {doc.id: [] for doc in store}

    os.makedirs(args.out, exist_ok=True)
    _dump_json(os.path.join(args.out, "effective_config.json"), {
        "model": dataclasses.asdict(model_cfg),
        "augmentation": dataclasses.asdict(aug_cfg),
        "training": dataclasses.asdict(train_cfg),
    })
    vocab.save(os.path.join(args.out, "vocab.txt"))
    if args.dump_pairs:
        pairs = [p for batch in build_batches(store, vocab, negatives, aug_cfg,
                                              train_cfg.batch_size)
                 for p in batch]
        dump_pairs(pairs, args.dump_pairs)

    params = init_params(model_cfg, seed=train_cfg.seed)
    result = train(store, vocab, negatives, params, model_cfg, aug_cfg,
                   train_cfg, out_dir=args.out, log_every=args.log_every)
    print(f"trained {len(result.losses)} steps, "
          f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_embed(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    store, vocab = _load_store(args.store)
    if vocab is None:
        raise DataError(f"{args.store} has no vocab.txt; embedding needs the "
                        "exact vocabulary the model was trained with")
    _check_vocab_matches(cfg, vocab)
    max_len = args.max_len if args.max_len is not None else cfg.max_context
    index = embed_corpus(params, cfg, store, vocab, max_len)
    os.makedirs(args.out, exist_ok=True)
    save_index(os.path.join(args.out, "embeddings.l2ix"), index)
    shutil.copyfile(args.ckpt, os.path.join(args.out, "model.ckpt"))
    vocab.save(os.path.join(args.out, "vocab.txt"))
    _dump_json(os.path.join(args.out, "meta.json"),
               {"max_len": max_len, "passage_prefix": "Passage: "})
    print(f"embedded {len(index)} documents at dimension "
          f"{index.vectors.shape[1]} -> {args.out}")
    return 0


def _cmd_search(args) -> int:
    index = load_index(os.path.join(args.index, "embeddings.l2ix"))
    ckpt_path = os.path.join(args.index, "model.ckpt")
    if index.fingerprint != checkpoint_fingerprint(ckpt_path):
        raise ConflictError("embeddings were produced by a different checkpoint")
    params, cfg = load_checkpoint(ckpt_path)
    vocab = Vocabulary.load(os.path.join(args.index, "vocab.txt"))
    meta = _read_json(os.path.join(args.index, "meta.json"))
    max_len = int(meta["max_len"])
    vec = embed_text(args.query, args.prefix, params, cfg, vocab, max_len)
    for rank, (doc_id, score) in enumerate(dense_search(index, vec, args.k), start=1):
        print(f"{rank}\t{doc_id}\t{score:.6f}")
    return 0


def _print_metrics(report: dict) -> None:
    for name, block in report.items():
        skipped = len(block["no_relevant"])
        print(f"{name:<12} mean {block['mean']:.6f} "
              f"over {len(block['per_query'])} queries"
              + (f" ({skipped} skipped, no relevant docs)" if skipped else ""))


def _cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    store, vocab = _load_store(args.store)
    if vocab is None:
        raise DataError(f"{args.store} has no vocab.txt; evaluation needs the "
                        "exact vocabulary the model was trained with")
    _check_vocab_matches(cfg, vocab)
    queries = load_queries(args.queries)
    qrels = load_qrels(args.qrels)
    max_len = args.max_len if args.max_len is not None else cfg.max_context
    os.makedirs(args.out, exist_ok=True)
    run_path = os.path.join(args.out, "run.trec")
    report, _ = evaluate(params, cfg, store, vocab, queries, qrels,
                         max_len, k=args.k, run_path=run_path, tag=args.tag)
    _dump_json(os.path.join(args.out, "report.json"), report)
    _print_metrics(report)
    print(f"run file: {run_path}")
    return 0


def _cmd_bm25_eval(args) -> int:
    store, vocab = _load_store(args.store)
    vocab = _ensure_vocab(store, vocab, args.vocab_size)
    queries = load_queries(args.queries)
    qrels = load_qrels(args.qrels)
    index = build_index(store, vocab, BM25Params(k1=args.k1, b=args.b))
    run = bm25_run(index, vocab, queries, k=max(args.k, 10))
    report = {}
    for name, metric in (("ndcg", ndcg_at_k), ("recall", recall_at_k), ("mrr", mrr)):
        m = metric(run, qrels, args.k)
        report[f"{name}_at_{args.k}"] = {"mean": m.mean, "per_query": m.per_query,
                                         "no_relevant": m.no_relevant}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_run(os.path.join(args.out, "run.trec"), run, tag="bm25")
        _dump_json(os.path.join(args.out, "report.json"), report)
    _print_metrics(report)
    return 0


def _cmd_synth(args) -> int:
    spec = from_dict(SyntheticCorpusSpec, _read_json(args.spec) if args.spec else {})
    store, labels = generate_synthetic_corpus(spec)
    os.makedirs(args.out, exist_ok=True)
    store.save_jsonl(os.path.join(args.out, "corpus.jsonl"))
    _dump_json(os.path.join(args.out, "labels.json"), labels)
    _dump_json(os.path.join(args.out, "spec.json"), dataclasses.asdict(spec))
    print(f"generated {len(store)} documents over {spec.n_topics} topics -> {args.out}")
    return 0


def _cmd_passkey(args) -> int:
    spec = from_dict(PasskeySpec, _read_json(args.spec) if args.spec else {})
    store, queries, qrels = generate_passkey_corpus(spec)
    os.makedirs(args.out, exist_ok=True)
    store.save_jsonl(os.path.join(args.out, "corpus.jsonl"))
    from .retrieval import save_qrels, save_queries
    save_queries(os.path.join(args.out, "queries.jsonl"), queries)
    save_qrels(os.path.join(args.out, "qrels.tsv"), qrels)
    _dump_json(os.path.join(args.out, "spec.json"), dataclasses.asdict(spec))
    print(f"generated {len(store)} passkey documents (depth {spec.depth}) -> {args.out}")
    return 0


def _experiment_setup(args) -> ExperimentSetup:
    return from_dict(ExperimentSetup, _config_source(args))


def _cmd_ablate_negatives(args) -> int:
    report = run_ablation_hard_negatives(_experiment_setup(args), args.out)
    print(f"untrained nDCG@10      {report['untrained']['ndcg_mean']:.4f}")
    print(f"in-batch only nDCG@10  {report['in_batch_only']['ndcg_mean']:.4f}")
    print(f"hard negatives nDCG@10 {report['with_hard_negatives']['ndcg_mean']:.4f}")
    print(f"delta (hard - in-batch) {report['ndcg_delta']:+.4f}")
    return 0


def _cmd_compare_aug(args) -> int:
    report = run_augmentation_comparison(_experiment_setup(args), args.out)
    print(f"crop nDCG@10    {report['crop']['ndcg_mean']:.4f}")
    print(f"dropout nDCG@10 {report['dropout']['ndcg_mean']:.4f}")
    print(f"delta (crop - dropout) {report['ndcg_delta']:+.4f}")
    return 0


def _context_study(args) -> ContextStudyConfig:
    return from_dict(ContextStudyConfig, _config_source(args))


def _cmd_context_pair(args) -> int:
    report, _, _ = run_context_pair(_context_study(args), args.out)
    print(f"inputs truncated to {report['truncate_to']} tokens "
          f"(sha256 {report['input_sha256'][:12]})")
    print(f"long twin nDCG@10  {report['long']['ndcg_mean']:.4f}")
    print(f"short twin nDCG@10 {report['short']['ndcg_mean']:.4f}")
    print(f"delta {report['ndcg_delta']:+.4f} (control delta "
          f"{report['control_delta']:+.4f})")
    return 0


def _cmd_fill_sweep(args) -> int:
    study = from_dict(ContextStudyConfig,
                      _read_json(os.path.join(args.pair, "config.json")))
    params, cfg = load_checkpoint(os.path.join(args.pair, "long", "model.ckpt"))
    vocab = Vocabulary.load(os.path.join(args.pair, "vocab.txt"))
    keys = _read_json(os.path.join(args.pair, "keys.json"))
    if not isinstance(keys, list):
        raise ParseError("keys.json must hold a list of passkey strings")
    report = run_fill_fraction_sweep(params, cfg, vocab,
                                     [str(k) for k in keys][:study.sweep_docs],
                                     study, args.out)
    for fill, acc in report["curve"]:
        print(f"fill {fill:.2f}  accuracy@1 {acc:.4f}")
    return 0


def _checkpoint_probe(path: str, seed: int):
    """A small contrastive loss wired through a loaded checkpoint, for
    finite-difference spot checks on real weights."""
    params, cfg = load_checkpoint(path, dtype=np.float64)
    if cfg.vocab_size <= EOS + 2:
        raise DataError("checkpoint vocabulary too small to sample probe sequences")
    rng = np.random.default_rng([seed, 17])
    n = max(2, min(8, cfg.max_context - 1))

    def seq():
        return [int(t) for t in rng.integers(EOS + 1, cfg.vocab_size, size=n)] + [EOS]

    anchors, positives, negatives = [seq(), seq()], [seq(), seq()], [seq(), seq()]

    def build():
        def stack(seqs):
            return T.concat([embed_eos(s, params, cfg) for s in seqs], axis=0)
        batch = ContrastiveBatch(anchors=stack(anchors), positives=stack(positives),
                                 negatives=stack(negatives), k_per_anchor=1)
        return info_nce_loss(batch, 0.05)

    return params.named(), build


def _cmd_grad_check(args) -> int:
    if args.target == "random":
        results = run_standard_suite(tol=args.tol, h=args.h, seed=args.seed,
                                     pipeline_entries=args.entries)
    else:
        named, build = _checkpoint_probe(args.target, args.seed)
        report = check_gradients(build, named, h=args.h, tol=args.tol,
                                 max_entries_per_param=args.entries,
                                 rng=np.random.default_rng(args.seed))
        results = [("checkpoint_pipeline", report)]
    worst = 0.0
    failed = []
    for name, report in results:
        status = "ok  " if report.ok else "FAIL"
        print(f"{status} {name:<28} checked={report.checked:<5d} "
              f"max_err={report.max_err:.3e}")
        worst = max(worst, report.max_err)
        if not report.ok:
            failed.append(name)
            for pname, idx, analytic, numeric, err in report.failures[:5]:
                print(f"       {pname}{idx}: analytic={analytic:.6e} "
                      f"numeric={numeric:.6e} err={err:.3e}")
    if failed:
        raise NumericalError(f"{len(failed)} of {len(results)} gradient probes "
                             f"failed (tol {args.tol}): {', '.join(failed)}")
    print(f"all {len(results)} probes passed (worst error {worst:.3e}, tol {args.tol})")
    return 0


def _render_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (int, str)) or v is None:
        return str(v)
    if isinstance(v, list):
        if len(v) > 8:
            return (f"[{len(v)} values: {_render_value(v[0])} "
                    f".. {_render_value(v[-1])}]")
        return "[" + ", ".join(_render_value(x) for x in v) + "]"
    return json.dumps(v, sort_keys=True)


def _flatten(obj, prefix: str = "") -> list[tuple[str, str]]:
    if isinstance(obj, dict) and obj:
        rows = []
        for key, value in obj.items():
            rows.extend(_flatten(value, f"{prefix}{key}."))
        return rows
    return [(prefix[:-1], _render_value(obj))]


def _cmd_report(args) -> int:
    if os.path.isfile(args.dir):
        paths = [args.dir]
    else:
        paths = sorted(glob.glob(os.path.join(args.dir, "**", "report.json"),
                                 recursive=True))
    if not paths:
        raise DataError(f"no report.json found under {args.dir}")
    for i, path in enumerate(paths):
        if i:
            print()
        print(f"== {os.path.relpath(path)} ==")
        rows = sorted(_flatten(_read_json(path)))
        width = max(len(k) for k, _ in rows)
        for key, value in rows:
            print(f"{key:<{width}}  {value}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the artifact contract reserves 2 for
    data errors, so usage problems map to 1 instead."""

    def error(self, message):
        print(f"{self.prog}: error: usage: {' '.join(message.split())}",
              file=sys.stderr)
        raise SystemExit(1)


def _add_store_vocab(p, positional: str = "store") -> None:
    p.add_argument(positional, help="corpus JSONL file or an ingest output directory")
    p.add_argument("--vocab-size", type=int, default=2000,
                   help="vocabulary cap when the store has no vocab.txt (default 2000)")


def _add_bm25_flags(p) -> None:
    p.add_argument("--k1", type=float, default=1.2,
                   help="BM25 term-frequency saturation (default 1.2)")
    p.add_argument("--b", type=float, default=0.75,
                   help="BM25 length normalization (default 0.75)")


def _add_config_flag(p) -> None:
    p.add_argument("--config", default=None,
                   help="JSON config file (default: $TINYIR_CONFIG if set)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tinyir",
                     description="Train and evaluate a desk-scale dense retriever.")
    parser.add_argument("--version", action="version", version=f"tinyir {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>")

    p = sub.add_parser("ingest", help="build a document store and vocabulary")
    p.add_argument("jsonl", help="corpus as JSONL objects with 'id' and 'text'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--vocab-size", type=int, default=2000,
                   help="vocabulary cap including reserved tokens (default 2000)")
    p.add_argument("--min-freq", type=int, default=1,
                   help="minimum token frequency (default 1)")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("index", help="build the BM25 inverted index and report stats")
    _add_store_vocab(p)
    _add_bm25_flags(p)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("mine", help="mine BM25 hard negatives for every document")
    _add_store_vocab(p)
    p.add_argument("--k", type=int, default=7,
                   help="negatives per document (default 7)")
    p.add_argument("--out", required=True, help="output negatives JSONL")
    p.add_argument("--query-len", type=int, default=512,
                   help="tokens of the document used as its own query (default 512)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for padding when BM25 returns too few (default 0)")
    _add_bm25_flags(p)
    p.set_defaults(func=_cmd_mine)

    p = sub.add_parser("train", help="contrastive training over a corpus")
    _add_store_vocab(p)
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    _add_config_flag(p)
    p.add_argument("--mode", choices=[CROP, DROPOUT], default=None,
                   help="positive-pair augmentation (default crop)")
    p.add_argument("--k", type=int, default=None,
                   help="hard negatives per anchor (default 7)")
    p.add_argument("--tau", type=float, default=None,
                   help="contrastive temperature (default 0.05)")
    p.add_argument("--lr", type=float, default=None,
                   help="AdamW learning rate (default 1e-4)")
    p.add_argument("--batch-size", type=int, default=None,
                   help="pairs per step (default 64)")
    p.add_argument("--epochs", type=int, default=None,
                   help="passes over the corpus (default 1)")
    p.add_argument("--weight-decay", type=float, default=None,
                   help="decoupled weight decay (default 0.01)")
    p.add_argument("--grad-clip", type=float, default=None,
                   help="global gradient-norm clip (default off)")
    p.add_argument("--warmup-steps", type=int, default=None,
                   help="linear learning-rate warmup steps (default 0)")
    p.add_argument("--anchor-len", type=int, default=None,
                   help="anchor crop length in tokens (default 64)")
    p.add_argument("--passage-len", type=int, default=None,
                   help="positive crop length in tokens (default 512)")
    p.add_argument("--dropout-p", type=float, default=None,
                   help="dropout rate used by dropout-mode augmentation (default 0.1)")
    p.add_argument("--seed", type=int, default=None,
                   help="seed for init, shuffling and crops (default 0)")
    p.add_argument("--lora", action="store_true",
                   help="freeze base weights and train low-rank adapters")
    p.add_argument("--lora-rank", type=int, default=None,
                   help="adapter rank (default 8)")
    p.add_argument("--lora-alpha", type=float, default=None,
                   help="adapter scaling numerator (default 16)")
    p.add_argument("--attn", choices=["causal", "bidirectional"], default=None,
                   help="attention masking mode (default causal)")
    p.add_argument("--negatives-scope", choices=[SCOPE_BATCH, SCOPE_OWN],
                   default=None,
                   help="share mined negatives across the batch or keep them "
                        "per-anchor (default batch)")
    for flag, hint in (("--d-model", "embedding width (default 64)"),
                       ("--n-heads", "attention heads (default 4)"),
                       ("--n-layers", "transformer blocks (default 2)"),
                       ("--d-ff", "feed-forward width (default 256)"),
                       ("--max-context", "context window in tokens (default 256)")):
        p.add_argument(flag, type=int, default=None, help=hint)
    p.add_argument("--rope-theta", type=float, default=None,
                   help="rotary position base (default 10000)")
    p.add_argument("--negatives", default=None,
                   help="pre-mined negatives JSONL (default: mine internally)")
    p.add_argument("--mine-seed", type=int, default=0,
                   help="seed for internal mining (default 0)")
    p.add_argument("--query-len", type=int, default=512,
                   help="query length for internal mining (default 512)")
    p.add_argument("--dump-pairs", default=None,
                   help="also dump the epoch-0 training pairs to this JSONL")
    p.add_argument("--log-every", type=int, default=1,
                   help="CSV log interval in steps (default 1)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", help="embed a corpus into a searchable bundle")
    p.add_argument("ckpt", help="model checkpoint")
    p.add_argument("store", help="ingest output directory (must hold vocab.txt)")
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--max-len", type=int, default=None,
                   help="truncate documents to this many tokens "
                        "(default: model max_context)")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("search", help="ad-hoc query against an embed bundle")
    p.add_argument("index", help="embed output directory")
    p.add_argument("--query", required=True, help="query text")
    p.add_argument("--k", type=int, default=10, help="results to return (default 10)")
    p.add_argument("--prefix", default="Query: ",
                   help="prefix prepended before encoding (default 'Query: '; "
                        "pass 'Passage: ' to reproduce document embeddings exactly)")
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("eval", help="embed, retrieve and score against qrels")
    p.add_argument("ckpt", help="model checkpoint")
    p.add_argument("store", help="ingest output directory (must hold vocab.txt)")
    p.add_argument("queries", help="queries JSONL with 'id' and 'text'")
    p.add_argument("qrels", help="qrels TSV: qid <tab> docid <tab> grade")
    p.add_argument("--out", required=True, help="output directory for run and report")
    p.add_argument("--k", type=int, default=10, help="metric cutoff (default 10)")
    p.add_argument("--max-len", type=int, default=None,
                   help="truncation length (default: model max_context)")
    p.add_argument("--tag", default="tinyir", help="run tag (default tinyir)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bm25-eval", help="score the lexical BM25 baseline")
    _add_store_vocab(p)
    p.add_argument("queries", help="queries JSONL")
    p.add_argument("qrels", help="qrels TSV")
    p.add_argument("--k", type=int, default=10, help="metric cutoff (default 10)")
    p.add_argument("--out", default=None, help="optional output directory")
    _add_bm25_flags(p)
    p.set_defaults(func=_cmd_bm25_eval)

    p = sub.add_parser("synth", help="generate the clustered synthetic corpus")
    p.add_argument("--spec", default=None, help="JSON spec file (defaults built in)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("passkey", help="generate a passkey needle corpus")
    p.add_argument("--spec", default=None, help="JSON spec file (defaults built in)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_passkey)

    p = sub.add_parser("ablate-negatives",
                       help="train with and without mined hard negatives")
    _add_config_flag(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_ablate_negatives)

    p = sub.add_parser("compare-aug",
                       help="crop versus dropout positives, same seeds")
    _add_config_flag(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_compare_aug)

    p = sub.add_parser("context-pair",
                       help="train context-window twins and evaluate on "
                            "identical truncated inputs")
    _add_config_flag(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_context_pair)

    p = sub.add_parser("fill-sweep",
                       help="passkey accuracy as documents approach the window")
    p.add_argument("--pair", required=True,
                   help="a context-pair output directory (uses its long twin)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_fill_sweep)

    p = sub.add_parser("grad-check",
                       help="finite-difference verification of all gradients")
    p.add_argument("target", nargs="?", default="random",
                   help="'random' for the standard probe suite, or a "
                        "checkpoint path (default random)")
    p.add_argument("--tol", type=float, default=1e-5,
                   help="relative error tolerance (default 1e-5)")
    p.add_argument("--h", type=float, default=1e-5,
                   help="central difference step (default 1e-5)")
    p.add_argument("--seed", type=int, default=0,
                   help="probe sampling seed (default 0)")
    p.add_argument("--entries", type=int, default=25,
                   help="sampled entries per parameter in composed probes "
                        "(default 25)")
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("report", help="render report.json files as aligned tables")
    p.add_argument("dir", help="directory to scan recursively (or one report file)")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail(e, 1)
    except NumericalError as e:
        return _fail(e, 3)
    except (ParseError, ConflictError, DataError, ShapeError) as e:
        return _fail(e, 2)
    except TinyIRError as e:
        return _fail(e, 2)
    except OSError as e:
        return _fail(e, 2)


def _fail(e: BaseException, code: int) -> int:
    message = " ".join(str(e).split())
    print(f"tinyir: error: {type(e).__name__}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
