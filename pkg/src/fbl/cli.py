"""Command-line entry point.

Subcommands: ingest, train-projection, index, query, evaluate, bench.
Exit codes: 0 success, 1 usage error, 2 data error (bad input files or
session state), 3 internal error. Errors go to stderr as one JSON object.
The FBL_SESSION environment variable supplies the default session
directory for query/bench.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import _kernels, corpus, evaluation, retrieve, store
from .corpus import Granularity, load_bugs, load_changesets, load_links
from .embed import (
    LinearProjection,
    TripletTrainConfig,
    train_projection,
)
from .encode import Strategy, Vocabulary, encode_query
from .errors import DataError, FblError
from .pipeline import (
    BENCH_CSV_HEADER,
    Config,
    bench_row_csv,
    build_session,
    embed_query_text,
    encode_documents,
    make_embedder,
    run_query,
    sweep_latency,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(EXIT_USAGE, f"usage: {message}")


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": message, "kind": kind}) + "\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--granularity", choices=[g.value for g in Granularity], default="hunk")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="arcl")
    p.add_argument("--partitions", type=int, default=320)
    p.add_argument("--subspaces", type=int, default=16)
    p.add_argument("--codewords", type=int, default=256)
    p.add_argument("--nprobe", type=int, default=16)
    p.add_argument("--candidates", default="1000", help="candidate embeddings, or 'all'")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--d-in", type=int, default=768)
    p.add_argument("--d-out", type=int, default=128)
    p.add_argument("--embedder", default="hash", help="'hash' or 'file:<path>'")
    p.add_argument("--query-limit", type=int, default=256)
    p.add_argument("--hunk-limit", type=int, default=256)
    p.add_argument("--file-limit", type=int, default=512)
    p.add_argument("--changeset-limit", type=int, default=512)


def _config_from_args(args) -> Config:
    embedder_kind, embedder_path = "hash", None
    if args.embedder != "hash":
        if not args.embedder.startswith("file:"):
            raise UsageError(EXIT_USAGE, f"bad --embedder {args.embedder!r}")
        embedder_kind, embedder_path = "file", args.embedder[5:]
    candidates = None if args.candidates == "all" else int(args.candidates)
    return Config(
        granularity=Granularity(args.granularity),
        strategy=Strategy(args.strategy),
        query_limit=args.query_limit,
        hunk_limit=args.hunk_limit,
        file_limit=args.file_limit,
        changeset_limit=args.changeset_limit,
        n_partitions=args.partitions,
        candidates=candidates,
        nprobe=args.nprobe,
        n_subspaces=args.subspaces,
        n_codewords=args.codewords,
        seed=args.seed,
        d_in=args.d_in,
        d_out=args.d_out,
        embedder_kind=embedder_kind,
        embedder_path=embedder_path,
    )


def _corpus_paths(corpus_dir: Path) -> tuple[Path, Path, Path]:
    return (
        corpus_dir / "changesets.jsonl",
        corpus_dir / "bugs.jsonl",
        corpus_dir / "links.jsonl",
    )


def _corpus_hash(corpus_dir: Path) -> str:
    parts = []
    for p in _corpus_paths(corpus_dir):
        parts.append(store.sha256_file(p) if p.exists() else "absent")
    return store.sha256_bytes("\n".join(parts).encode())


def cmd_ingest(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    changesets = load_changesets(args.changesets)
    bugs = load_bugs(args.bugs) if args.bugs else []
    links = load_links(args.links) if args.links else []
    bug_ids = {b.bug_id for b in bugs}
    cs_ids = {c.changeset_id for c in changesets}
    for link in links:
        if link.bug_id not in bug_ids:
            raise DataError(f"link references unknown bug {link.bug_id!r}")
        if link.changeset_id not in cs_ids:
            raise DataError(f"link references unknown changeset {link.changeset_id!r}")
    for name, src in (
        ("changesets.jsonl", args.changesets),
        ("bugs.jsonl", args.bugs),
        ("links.jsonl", args.links),
    ):
        if src:
            (out_dir / name).write_bytes(Path(src).read_bytes())
    n_hunks = sum(len(fd.hunks) for cs in changesets for fd in cs.files)
    print(
        f"ingested {len(changesets)} changesets "
        f"({n_hunks} hunks), {len(bugs)} bugs, {len(links)} links -> {out_dir}"
    )
    return EXIT_OK


def _load_corpus_dir(corpus_dir: Path):
    cs_path, bugs_path, links_path = _corpus_paths(corpus_dir)
    changesets = load_changesets(cs_path)
    bugs = load_bugs(bugs_path) if bugs_path.exists() else []
    links = load_links(links_path) if links_path.exists() else []
    return changesets, bugs, links


def cmd_train_projection(args) -> int:
    config = _config_from_args(args)
    corpus_dir = Path(args.corpus)
    changesets, bugs, links = _load_corpus_dir(corpus_dir)
    if not links:
        raise DataError("training needs links.jsonl in the corpus directory")
    vocab = Vocabulary.from_file(args.vocab)
    bug_map = {b.bug_id: b for b in bugs}
    train_links, _ = corpus.split_train_test(links, bug_map)
    docs = corpus.explode_corpus(changesets, config.granularity)
    triplets = corpus.build_triplets(train_links, docs, seed=config.seed)
    doc_seqs = encode_documents(docs, config.strategy, vocab, config.doc_limit())
    query_seqs = {
        b.bug_id: encode_query(b, vocab, config.query_limit) for b in bugs
    }
    embedder = make_embedder(config)
    cfg = TripletTrainConfig(
        margin=args.margin,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=config.seed,
    )
    result = train_projection(
        triplets, query_seqs, doc_seqs, embedder, cfg, d_out=config.d_out
    )
    result.projection.save(args.out)
    trace = ", ".join(f"{x:.4f}" for x in result.epoch_losses)
    print(f"trained on {len(triplets)} triplets; mean loss per epoch: {trace}")
    print(f"projection -> {args.out}")
    return EXIT_OK


def cmd_index(args) -> int:
    config = _config_from_args(args)
    corpus_dir = Path(args.corpus)
    changesets, _, _ = _load_corpus_dir(corpus_dir)
    vocab = Vocabulary.from_file(args.vocab)
    projection = LinearProjection.load(args.projection) if args.projection else None
    built = build_session(
        changesets,
        vocab,
        config,
        projection=projection,
        corpus_hash=_corpus_hash(corpus_dir),
        vocab_hash=store.sha256_file(args.vocab),
    )
    session_dir = Path(args.session or os.environ.get("FBL_SESSION", "session"))
    store.save_session(
        session_dir,
        built.manifest,
        built.index,
        built.projection,
        built.doc_matrices,
        vocab_text=Path(args.vocab).read_text(encoding="utf-8"),
        embedder_matrix_path=config.embedder_path,
    )
    print(
        f"indexed {len(built.doc_matrices)} documents "
        f"({built.index.n_embeddings} embeddings, P={built.index.n_partitions}) -> {session_dir}"
    )
    return EXIT_OK


def _open_session(args):
    raw = args.session or os.environ.get("FBL_SESSION", "")
    if not raw:
        raise UsageError(EXIT_USAGE, "no session: pass --session or set FBL_SESSION")
    session_dir = Path(raw)
    artifacts = store.load_session(session_dir)
    vocab = Vocabulary.from_file(session_dir / store.VOCAB_NAME)
    m = artifacts.manifest
    config = Config(
        granularity=Granularity(m.granularity),
        strategy=Strategy(m.strategy),
        n_partitions=m.n_partitions,
        n_subspaces=m.n_subspaces,
        n_codewords=m.n_codewords,
        seed=m.seed,
        d_in=m.d_in,
        d_out=m.d_out,
        embedder_kind=m.embedder_kind,
        embedder_path=(
            str(session_dir / store.EMBEDDER_NAME) if m.embedder_kind == "file" else None
        ),
    )
    return artifacts, vocab, config


def cmd_query(args) -> int:
    artifacts, vocab, config = _open_session(args)
    if args.nprobe is not None:
        config.nprobe = args.nprobe
    if args.candidates is not None:
        config.candidates = None if args.candidates == "all" else int(args.candidates)
    embedder = make_embedder(config)

    if args.text is not None:
        reports = [
            corpus.BugReport(
                bug_id="adhoc",
                summary=args.text,
                description="",
                opened_at=datetime.now(timezone.utc),
            )
        ]
    elif args.bug_file:
        reports = load_bugs(args.bug_file)
    else:
        raise UsageError(EXIT_USAGE, "query needs --text or --bug-file")

    pack = retrieve.PackedCorpus.from_matrices(artifacts.doc_matrices)
    out_fh = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for report in reports:
            q = embed_query_text(report, vocab, config, embedder, artifacts.projection)
            result = run_query(
                q,
                artifacts.index,
                pack,
                config,
                k=args.topk,
                exact=args.exact,
                bug_id=report.bug_id,
            )
            if args.aggregate:
                result = retrieve.aggregate_to_changeset(result)
                result.entries = result.entries[: args.topk]
            if args.format == "trec":
                retrieve.write_trec(result, out_fh)
            else:
                retrieve.write_jsonl(result, out_fh)
    finally:
        if args.out:
            out_fh.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = evaluation.read_run(args.run)
    links = load_links(args.qrels)
    qrels = evaluation.qrels_from_links(links)
    # aggregate document entries to changeset level before scoring
    results: dict[str, list[str]] = {}
    for bug_id, entries in run.items():
        ranked = retrieve.aggregate_to_changeset(
            retrieve.RankedResult(bug_id=bug_id, entries=list(entries), mode=retrieve.RankMode.EXACT)
        )
        results[bug_id] = [cs for cs, _ in ranked.entries]
    categories = None
    if args.bugs and args.changesets:
        bugs = load_bugs(args.bugs)
        changesets = {c.changeset_id: c for c in load_changesets(args.changesets)}
        names = evaluation.gold_class_names(links, changesets)
        categories = {
            b.bug_id: evaluation.categorize(b, names[b.bug_id])
            for b in bugs
            if names.get(b.bug_id)
        }
    report = evaluation.metrics_report(results, qrels, categories)
    payload = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    return EXIT_OK


def cmd_bench(args) -> int:
    artifacts, _, config = _open_session(args)
    if args.nprobe is not None:
        config.nprobe = args.nprobe
    if args.candidates is not None:
        config.candidates = None if args.candidates == "all" else int(args.candidates)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    rows = sweep_latency(
        artifacts.doc_matrices, sizes, config, n_queries=args.queries, k=args.topk
    )
    lines = [BENCH_CSV_HEADER] + [bench_row_csv(r) for r in rows]
    payload = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    sys.stderr.write(f"kernel backend: {_kernels.BACKEND}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fbl", description="Changeset-based bug localization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and stage corpus JSONL files")
    p.add_argument("--changesets", required=True)
    p.add_argument("--bugs")
    p.add_argument("--links")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-projection", help="train the embedding projection on triplets")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_projection)

    p = sub.add_parser("index", help="encode, embed, and index a corpus into a session")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--session", default=None)
    p.add_argument("--projection", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank documents for bug reports")
    p.add_argument("--session", default=None)
    p.add_argument("--bug-file")
    p.add_argument("--text")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--candidates", default=None, help="candidate embeddings, or 'all'")
    p.add_argument("--exact", action="store_true", help="brute-force oracle ranking")
    p.add_argument("--aggregate", action="store_true", help="collapse to changeset level")
    p.add_argument("--format", choices=["jsonl", "trec"], default="jsonl")
    p.add_argument("--out")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True, help="links.jsonl")
    p.add_argument("--bugs", help="bugs.jsonl for NL/PL/FL categorization")
    p.add_argument("--changesets", help="changesets.jsonl for gold class names")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="latency sweep: exact vs two-stage")
    p.add_argument("--session", default=None)
    p.add_argument("--sizes", required=True, help="comma-separated embedding counts")
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--candidates", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return exc.code
    except FileNotFoundError as exc:
        _emit_error("data", f"file not found: {exc.filename}")
        return EXIT_DATA
    except DataError as exc:
        _emit_error("data", str(exc))
        return EXIT_DATA
    except FblError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - safety net
        _emit_error("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
