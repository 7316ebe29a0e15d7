"""Command-line entry point.

Subcommands: ``ingest``, ``synth``, ``train unsup|sup``, ``eval``,
``export``, ``ablate`` and ``diagnose``. Values may also come from a TOML
file given with ``--config``; its keys use the flag names with ``_`` for
``-`` and a command-line flag always wins over the file. Exit status is 0 on
success, 1 on a runtime error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli
from threadpoolctl import threadpool_limits

from . import __version__
from .adaptor import adapt, load_weights, save_weights
from .errors import AdaptorError, PrefixOutOfRange
from .evaluator import METHODS, ablation_table, build_report, distance_diagnostics, run_ablation
from .gateway import ProviderSpec, cache_embeddings, embed_texts
from .losses import DimSchedule, LossToggles, ObjectiveWeights
from .store import EmbeddingMatrix, load_embeddings, load_qrels, save_embeddings, save_qrels, split_train_val
from .synthetic import planted_subspace
from .trainer import TrainConfig, default_dims, train_supervised, train_unsupervised

log = logging.getLogger("prefix_adaptor")

_DEFAULTS = TrainConfig()


class UsageError(Exception):
    """Bad or missing arguments; reported with exit status 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str]
    seed: int
    version: str = __version__
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def parse_dims(value) -> DimSchedule | None:
    if value is None:
        return None
    if isinstance(value, str):
        try:
            value = [int(v) for v in value.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"--dims expects comma-separated integers, got {value!r}") from exc
    try:
        return DimSchedule(tuple(int(v) for v in value))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _require(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="corpus embeddings (binary or JSONL)")
    p.add_argument("--dims", help="prefix lengths, e.g. 8,16,32 (default: powers of two up to d, plus d)")
    p.add_argument("--alpha", type=float, default=_DEFAULTS.weights.alpha, help="pairwise loss weight")
    p.add_argument("--beta", type=float, default=_DEFAULTS.weights.beta, help="reconstruction loss weight")
    p.add_argument("--gamma", type=float, default=_DEFAULTS.weights.gamma, help="ranking loss weight")
    p.add_argument("--k", type=int, default=_DEFAULTS.k_neighbors, help="neighbours per anchor for the top-k loss")
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed)
    p.add_argument("--lr", type=float, default=_DEFAULTS.learning_rate)
    p.add_argument("--batch-size", type=int, default=_DEFAULTS.batch_size)
    p.add_argument("--corpus-batch-size", type=int, default=_DEFAULTS.corpus_batch_size)
    p.add_argument("--max-iters", type=int, default=_DEFAULTS.max_iters)
    p.add_argument("--patience", type=int, default=_DEFAULTS.patience)
    p.add_argument("--eval-every", type=int, default=_DEFAULTS.eval_every)
    p.add_argument("--hidden", type=int, default=None, help="hidden width (default: d)")
    p.add_argument("--val-fraction", type=float, default=_DEFAULTS.val_fraction)
    p.add_argument("--no-topk", action="store_true", help="disable the top-k similarity loss")
    p.add_argument("--no-pair", action="store_true", help="disable the pairwise similarity loss")
    p.add_argument("--no-rec", action="store_true", help="disable the reconstruction loss")
    p.add_argument("--no-rank", action="store_true", help="disable the ranking loss")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefix-adaptor", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="TOML file with default values for the chosen command")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and convert embeddings, or fetch them from a provider")
    p.add_argument("--in", dest="input", help="embedding file to convert")
    p.add_argument("--provider", choices=("file", "mock", "remote"), help="embed the lines of --items instead")
    p.add_argument("--items", help="text file with one item per line")
    p.add_argument("--dim", type=int)
    p.add_argument("--endpoint")
    p.add_argument("--source", help="embedding file looked up by the file provider")
    p.add_argument("--mock-seed", type=int, default=0)
    p.add_argument("--cache", help="cache directory for provider results")
    p.add_argument("--out")

    p = sub.add_parser("synth", help="write a planted-subspace fixture")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-corpus", type=int, default=2000)
    p.add_argument("--n-queries", type=int, default=200)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--signal-dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train an adaptor")
    stages = p.add_subparsers(dest="stage", required=True)
    for name, help_text in (("unsup", "corpus-only objective"), ("sup", "two-stage training with relevance labels")):
        sp = stages.add_parser(name, help=help_text)
        _train_flags(sp)
        sp.add_argument("--out", help="weight file to write")
        sp.add_argument("--log", help="TrainLog JSONL path (default: next to --out)")
        sp.add_argument("--manifest", help="RunManifest path (default: next to --out)")
        if name == "sup":
            sp.add_argument("--queries")
            sp.add_argument("--qrels")

    p = sub.add_parser("eval", help="nDCG@10 per method and prefix length")
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--qrels")
    p.add_argument("--dims")
    p.add_argument("--methods", default="baseline", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--weights", help="adaptor weights for the adaptor method")
    p.add_argument("--diagnostics", action="store_true", help="also fill the distance columns")
    p.add_argument("--k", type=int, default=_DEFAULTS.k_neighbors)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="CSV path; a JSON copy is written next to it")

    p = sub.add_parser("export", help="write adapted, truncated embeddings")
    p.add_argument("--weights")
    p.add_argument("--in", dest="input")
    p.add_argument("--m", type=int)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="loss-removal ablation over several seeds")
    _train_flags(p)
    p.add_argument("--queries")
    p.add_argument("--qrels")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--supervised", action="store_true")
    p.add_argument("--out", help="JSON file for the result tables")

    p = sub.add_parser("diagnose", help="label-free distance diagnostics on a held-out corpus")
    p.add_argument("--corpus")
    p.add_argument("--weights")
    p.add_argument("--dims")
    p.add_argument("--k", type=int, default=_DEFAULTS.k_neighbors)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON file (default: stdout)")
    return parser


def _leaf_parser(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.ArgumentParser:
    """The innermost sub-parser selected by ``argv``."""
    current = parser
    for token in argv:
        actions = [a for a in current._actions if isinstance(a, argparse._SubParsersAction)]
        if actions and token in actions[0].choices:
            current = actions[0].choices[token]
    return current


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            with open(known.config, "rb") as fh:
                values = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        leaf = _leaf_parser(parser, argv)
        dests = {a.dest for a in leaf._actions}
        unknown = sorted(set(values) - dests)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        leaf.set_defaults(**values)
    args = parser.parse_args(argv)
    if args.command == "train":
        args.command = f"train {args.stage}"
    return args


def _config(args) -> TrainConfig:
    toggles = LossToggles(topk=not args.no_topk, pair=not args.no_pair, rec=not args.no_rec, rank=not args.no_rank)
    try:
        return TrainConfig(
            learning_rate=args.lr,
            batch_size=args.batch_size,
            corpus_batch_size=args.corpus_batch_size,
            max_iters=args.max_iters,
            patience=args.patience,
            k_neighbors=args.k,
            dims=parse_dims(args.dims),
            weights=ObjectiveWeights(args.alpha, args.beta, args.gamma),
            seed=args.seed,
            loss_toggles=toggles,
            hidden_dim=args.hidden,
            val_fraction=args.val_fraction,
            eval_every=args.eval_every,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _sidecar(out: Path, explicit: str | None, suffix: str) -> Path:
    return Path(explicit) if explicit else out.with_name(out.stem + suffix)


def cmd_train(args) -> int:
    supervised = args.command == "train sup"
    _require(args, "corpus", "out", *(("queries", "qrels") if supervised else ()))
    cfg = _config(args)
    out = Path(args.out)
    inputs = {p: sha256_file(p) for p in ([args.corpus, args.queries, args.qrels] if supervised else [args.corpus])}
    manifest = RunManifest(args.command, cfg.to_dict(), inputs, cfg.seed)
    log_path = _sidecar(out, args.log, ".log.jsonl")
    manifest_path = _sidecar(out, args.manifest, ".manifest.json")
    manifest.write(manifest_path)

    corpus = load_embeddings(args.corpus)
    if supervised:
        queries = load_embeddings(args.queries)
        rels = load_qrels(args.qrels)
        split = split_train_val(queries, rels, cfg.val_fraction, cfg.seed, corpus=corpus)
        f, trace = train_supervised(corpus, queries, rels, split, cfg)
    else:
        f, trace = train_unsupervised(corpus, cfg)
    save_weights(f, out)
    trace.write_jsonl(log_path)
    manifest.outputs = {"weights": str(out), "log": str(log_path)}
    manifest.write(manifest_path)
    print(f"{args.command}: best iter {trace.best_iter} ({trace.stop_reason}), weights -> {out}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "corpus", "queries", "qrels")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise UsageError(f"unknown methods {unknown}; choose from {','.join(METHODS)}")
    if "adaptor" in methods and not args.weights:
        raise UsageError("the adaptor method needs --weights")
    corpus = load_embeddings(args.corpus)
    queries = load_embeddings(args.queries)
    rels = load_qrels(args.qrels)
    dims = parse_dims(args.dims)
    if dims is None:
        dims = default_dims(corpus.dim)
    adaptor = load_weights(args.weights, expected_dim=corpus.dim) if args.weights else None
    inputs = {p: sha256_file(p) for p in (args.corpus, args.queries, args.qrels, args.weights) if p}
    report = build_report(
        queries, corpus, rels, dims.check(corpus.dim), methods,
        adaptor=adaptor,
        diagnostics_corpus=corpus if args.diagnostics else None,
        k=args.k,
        seed=args.seed,
        metadata={"inputs": inputs, "version": __version__},
    )
    if args.report:
        report.to_csv(args.report)
        report.to_json(Path(args.report).with_suffix(".json"))
    print("method,dim,ndcg10")
    for r in report.rows:
        print(f"{r.method},{r.dim},{r.ndcg10:.4f}")
    return 0


def cmd_export(args) -> int:
    _require(args, "weights", "input", "m", "out")
    emb = load_embeddings(args.input)
    f = load_weights(args.weights, expected_dim=emb.dim)
    if not 1 <= args.m <= emb.dim:
        raise PrefixOutOfRange(f"--m must lie in [1, {emb.dim}], got {args.m}")
    adapted = adapt(f, np.asarray(emb.data, dtype=np.float64))[:, : args.m]
    save_embeddings(EmbeddingMatrix(emb.ids, adapted.astype(np.float32)), args.out)
    print(f"export: {len(emb)} rows, dim {args.m} -> {args.out}")
    return 0


def cmd_ingest(args) -> int:
    _require(args, "out")
    if args.input and args.provider:
        raise UsageError("ingest takes either --in or --provider, not both")
    if args.input:
        emb = load_embeddings(args.input, dim=args.dim)
    elif args.provider:
        _require(args, "items", "dim")
        items = [line.rstrip("\n") for line in open(args.items, encoding="utf-8") if line.strip()]
        spec = ProviderSpec(args.provider, args.dim, endpoint=args.endpoint, config=args.source, mock_seed=args.mock_seed)
        emb = cache_embeddings(spec, items, args.cache) if args.cache else embed_texts(spec, items)
    else:
        raise UsageError("ingest needs --in or --provider")
    save_embeddings(emb, args.out)
    print(f"ingest: {len(emb)} rows of dim {emb.dim} -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fx = planted_subspace(args.n_corpus, args.n_queries, args.d, args.signal_dim, seed=args.seed)
    save_embeddings(fx.corpus, out / "corpus.bin")
    save_embeddings(fx.queries, out / "queries.bin")
    save_qrels(fx.rels, out / "qrels.txt")
    print(f"synth: corpus.bin, queries.bin, qrels.txt -> {out}")
    return 0


def cmd_ablate(args) -> int:
    _require(args, "corpus", "queries", "qrels")
    cfg = _config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds expects integers, got {args.seeds!r}") from exc
    corpus, queries, rels = load_embeddings(args.corpus), load_embeddings(args.queries), load_qrels(args.qrels)
    tables, smallest = {}, {}
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        split = split_train_val(queries, rels, cfg.val_fraction, seed, corpus=corpus) if args.supervised else None
        results = run_ablation(corpus, queries, rels, run_cfg, split=split, supervised=args.supervised)
        tables[str(seed)] = ablation_table(results)
        for label, rep in results.items():
            by_dim = rep.ndcg("adaptor")
            smallest.setdefault(label, []).append(by_dim[min(by_dim)])
    summary = {label: float(np.mean(v)) for label, v in smallest.items()}
    doc = {"seeds": seeds, "tables": tables, "mean_ndcg10_smallest_dim": summary, "config": cfg.to_dict()}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    for label, v in summary.items():
        print(f"{label}: {v:.4f}")
    return 0


def cmd_diagnose(args) -> int:
    _require(args, "corpus")
    corpus = load_embeddings(args.corpus)
    dims = parse_dims(args.dims)
    if dims is None:
        dims = default_dims(corpus.dim)
    dims = dims.check(corpus.dim)
    doc = {"identity": distance_diagnostics(corpus, None, dims, args.k, seed=args.seed)}
    if args.weights:
        f = load_weights(args.weights, expected_dim=corpus.dim)
        doc["adaptor"] = distance_diagnostics(corpus, f, dims, args.k, seed=args.seed)
    text = json.dumps(_jsonable(doc), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train unsup": cmd_train,
    "train sup": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"prefix-adaptor {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AdaptorError, OSError, ValueError, KeyError, IndexError, RuntimeError) as exc:
        print(f"prefix-adaptor {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
