"""``hierag`` command line: index, query, eval, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .baseline_indexer import chunk_tree
from .config import EMBED_BACKENDS, LLM_BACKENDS, METHODS, RunConfig, read_config_file, resolve
from .distiller import KnowledgeStore, distill_tree, load_templates
from .embed_store import HashEmbedder, Method, RemoteEmbedder, VectorIndex, backend_from_config, build_index
from .errors import ConfigError, HieragError, IndexNotFound, PathNotFound
from .evalkit import MetricReport, evaluate, format_reduction, load_dataset, render_report, write_report
from .llm_backend import RemoteBackend, RunLog, ScriptedBackend
from .rag_answerer import answer
from .repo_tree import read_ignore_file, scan

log = logging.getLogger("hierag")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"E_ARG: {message}\n")


def _llm_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("language model")
    g.add_argument("--llm-backend", dest="llm_backend", choices=LLM_BACKENDS)
    g.add_argument("--llm-rules", dest="llm_rules", metavar="FILE", help="rule table for the scripted backend")
    g.add_argument("--head-tokens", dest="head_tokens", type=int, metavar="K",
                   help="context tokens echoed by the scripted backend")
    g.add_argument("--endpoint-url", dest="endpoint_url", help="chat-completions URL (remote backend)")
    g.add_argument("--model-name", dest="model_name")
    g.add_argument("--max-retries", dest="max_retries", type=int)
    g.add_argument("--max-inflight", dest="max_inflight", type=int)
    g.add_argument("--context-budget", dest="context_budget_tokens", type=int, metavar="TOKENS")
    g.add_argument("--max-output-tokens", dest="max_output_tokens", type=int)
    g.add_argument("--temperature", type=float)
    return p


def _embed_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("embeddings")
    g.add_argument("--embed-backend", dest="embed_backend", choices=EMBED_BACKENDS)
    g.add_argument("--dim", type=int, help="hash embedding dimension")
    g.add_argument("--embed-seed", dest="embed_seed", type=int)
    g.add_argument("--embed-endpoint-url", dest="embed_endpoint_url")
    g.add_argument("--embed-model", dest="embed_model")
    return p


def _common_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", help="key = value config file")
    p.add_argument("-v", "--verbose", action="store_true", help="log resolved settings and progress")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hierag", description="Distil file trees into implicit-knowledge docs and query them.")
    parser.add_argument("--version", action="version", version=f"hierag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common, llm, emb = _common_options(), _llm_options(), _embed_options()

    p = sub.add_parser("index", parents=[common, llm, emb], help="build the knowledge base and vector indexes")
    p.add_argument("repo_path", metavar="REPO")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--out", help="output directory (default: ./hierag-out)")
    p.add_argument("--ignore", action="append", metavar="GLOB", help="skip matching paths (repeatable)")
    p.add_argument("--ignore-file", dest="ignore_file", metavar="FILE", help="file with one glob per line")
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--chunk-overlap", dest="chunk_overlap", type=int)
    p.add_argument("--leaf-template", dest="leaf_template", metavar="FILE")
    p.add_argument("--parent-template", dest="parent_template", metavar="FILE")
    p.add_argument("--workers", type=int, help="concurrent generations per tree level")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", parents=[common, llm], help="answer one question from an index")
    p.add_argument("question")
    p.add_argument("--index", required=True, metavar="DIR")
    p.add_argument("--k", type=int)
    p.add_argument("--show-sources", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common, llm], help="answer a QA dataset and score it")
    p.add_argument("--dataset", required=True, metavar="FILE")
    p.add_argument("--index-baseline", metavar="DIR")
    p.add_argument("--index-implicit", metavar="DIR")
    p.add_argument("--out", help="report directory (default: ./hierag-out)")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="render text tables from a report JSON")
    p.add_argument("report_json", metavar="REPORT", help="report.json, or a directory holding one")
    p.add_argument("--out", help="also write report.txt / doc_counts.txt here")
    p.set_defaults(func=cmd_report)
    return parser


_CONFIG_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def _config(args) -> RunConfig:
    cli = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS}
    file_values = read_config_file(args.config) if args.config else {}
    return resolve(cli, file_values)


def make_llm(cfg: RunConfig):
    if cfg.llm_backend == "remote":
        return RemoteBackend(cfg.endpoint_url, cfg.model_name, max_retries=cfg.max_retries,
                             backoff_base=cfg.backoff_base, max_inflight=cfg.max_inflight,
                             context_budget_tokens=cfg.context_budget_tokens)
    kw = dict(head_tokens=cfg.head_tokens, context_budget_tokens=cfg.context_budget_tokens)
    if cfg.llm_rules:
        return ScriptedBackend.from_file(cfg.llm_rules, **kw)
    return ScriptedBackend(**kw)


def make_embedder(cfg: RunConfig):
    if cfg.embed_backend == "remote":
        return RemoteEmbedder(cfg.embed_endpoint_url, cfg.embed_model, max_retries=cfg.max_retries,
                              backoff_base=cfg.backoff_base)
    return HashEmbedder(dim=cfg.dim, seed=cfg.embed_seed)


def _is_within(path: Path, parent: Path) -> bool:
    try:
        path.relative_to(parent)
        return True
    except ValueError:
        return False


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_index(args) -> int:
    cfg = _config(args)
    repo = Path(cfg.repo_path)
    if not repo.exists():
        raise PathNotFound(f"repository path not found: {repo}")
    out = Path(cfg.out)
    if _is_within(out, repo):
        raise ConfigError(f"--out {out} lies inside the scanned repository")
    ignores = list(cfg.ignore) + (read_ignore_file(cfg.ignore_file) if cfg.ignore_file else [])
    tree = scan(repo, ignores)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", dataclasses.asdict(cfg))
    embedder = make_embedder(cfg)
    run_log = RunLog()
    counts = {}
    try:
        if cfg.method in ("implicit", "both"):
            templates = load_templates(cfg.leaf_template, cfg.parent_template)
            kb = distill_tree(tree, templates, make_llm(cfg), workers=cfg.workers, run_log=run_log,
                              store=KnowledgeStore(out / "kb"), max_output_tokens=cfg.max_output_tokens)
            docs = [(d.path, d.markdown, {"path": d.path, "level": d.level.value}) for d in kb.ordered()]
            index = build_index(docs, embedder, Method.IMPLICIT)
            index.save(out / "implicit")
            counts[Method.IMPLICIT.value] = len(index)
        if cfg.method in ("baseline", "both"):
            chunks = chunk_tree(tree, cfg.chunk_size, cfg.chunk_overlap)
            docs = [(c.doc_id, c.indexed_text(), {**c.metadata, "seq": c.seq}) for c in chunks]
            index = build_index(docs, embedder, Method.BASELINE)
            index.save(out / "baseline")
            counts[Method.BASELINE.value] = len(index)
    finally:
        run_log.write_jsonl(out / "run_log.jsonl")
    _write_json(out / "counts.json", counts)
    parts = [f"{m.lower()}={n}" for m, n in sorted(counts.items())]
    red = format_reduction(counts)
    if red is not None:
        base, impl = counts[Method.BASELINE.value], counts[Method.IMPLICIT.value]
        parts.append(f"reduction={(1 - impl / base) * 100:.1f}%")
    print(" ".join(parts))
    return 0


def _load_index(path) -> VectorIndex:
    if path is None:
        raise IndexNotFound("no index given")
    return VectorIndex.load(path)


def cmd_query(args) -> int:
    cfg = _config(args)
    index = _load_index(args.index)
    embedder = backend_from_config(index.embed_config, max_retries=cfg.max_retries, backoff_base=cfg.backoff_base)
    result = answer(args.question, index, cfg.k, make_llm(cfg), embedder, max_output_tokens=cfg.max_output_tokens)
    print(result.answer_text.rstrip("\n"))
    if args.show_sources:
        print()
        print("Sources:")
        for doc_id, score in result.retrieved:
            print(f"  {score:+.4f}  {doc_id}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(args.dataset)
    paths = {Method.BASELINE: args.index_baseline, Method.IMPLICIT: args.index_implicit}
    paths = {m: p for m, p in paths.items() if p}
    if not paths:
        raise IndexNotFound("pass --index-baseline and/or --index-implicit")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    llm = make_llm(cfg)
    run_log = RunLog()
    answers, counts = [], {}
    for method, path in paths.items():
        index = _load_index(path)
        embedder = backend_from_config(index.embed_config, max_retries=cfg.max_retries,
                                       backoff_base=cfg.backoff_base)
        counts[method.value] = len(index)
        for item in dataset:
            ans = answer(item.question, index, cfg.k, llm, embedder, run_log=run_log,
                         max_output_tokens=cfg.max_output_tokens)
            # an index written without a method tag still answers for the flag it came from
            answers.append(dataclasses.replace(ans, method=method))
    report = evaluate(answers, dataset, counts)
    write_report(report, out)
    with open(out / "answers.jsonl", "w", encoding="utf-8") as fh:
        for ans in answers:
            fh.write(json.dumps(ans.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    run_log.write_jsonl(out / "run_log.jsonl")
    sys.stdout.write(render_report(report))
    return 0


def cmd_report(args) -> int:
    src = Path(args.report_json)
    if src.is_dir():
        src = src / "report.json"
    try:
        report = MetricReport.from_dict(json.loads(src.read_text(encoding="utf-8")))
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"cannot read report {src}: {exc}") from exc
    if args.out:
        write_report(report, args.out)
    sys.stdout.write(render_report(report))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except HieragError as exc:
        msg = " ".join(str(exc).split())
        print(f"{exc.code}: {msg}", file=sys.stderr)
        return exc.exit_status


if __name__ == "__main__":
    sys.exit(main())
