"""Bottom-up knowledge distillation over a :class:`RepoTree`.

Leaves are summarised from their raw content, then every folder (root
included) from the summaries of its children, one depth level at a time.
"""

from __future__ import annotations

import enum
import json
import logging
import os
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .clock import timestamp
from .errors import MissingChildDoc, TemplateError
from .llm_backend import CONTEXT_PLACEHOLDER, GenRequest, LlmBackend, RunLog, render_prompt
from .repo_tree import RepoTree, TreeNode, levels_bottom_up

log = logging.getLogger(__name__)

EMPTY_FILE_CONTEXT = "(this file is empty)"
EMPTY_FOLDER_CONTEXT = "This folder is empty."
CHILD_SEPARATOR = "\n\n---\n\n"
MANIFEST = "manifest.json"
RESUME_MARKER = ".resume.json"
FOLDER_DOC = "__folder__.md"


class TemplateKind(str, enum.Enum):
    LEAF = "LeafTemplate"
    PARENT = "ParentTemplate"


class DocLevel(str, enum.Enum):
    FILE = "FileLevel"
    FOLDER = "FolderLevel"


@dataclass(frozen=True)
class PromptTemplate:
    name: TemplateKind
    body: str

    def __post_init__(self):
        n = self.body.count(CONTEXT_PLACEHOLDER)
        if n != 1:
            raise TemplateError(f"{self.name.value} must contain exactly one {CONTEXT_PLACEHOLDER} placeholder, found {n}")


def _asset(name: str) -> str:
    return resources.files("hierag").joinpath("assets", name).read_text(encoding="utf-8")


def system_prompt(kind: str) -> str:
    return json.loads(_asset("system_prompts.json"))[kind]


def default_templates() -> dict[TemplateKind, PromptTemplate]:
    return {
        TemplateKind.LEAF: PromptTemplate(TemplateKind.LEAF, _asset("leaf_template.md")),
        TemplateKind.PARENT: PromptTemplate(TemplateKind.PARENT, _asset("parent_template.md")),
    }


def load_templates(leaf: str | os.PathLike | None = None, parent: str | os.PathLike | None = None):
    """Default templates, with either one replaced by a file's contents."""
    templates = default_templates()
    if leaf is not None:
        templates[TemplateKind.LEAF] = PromptTemplate(TemplateKind.LEAF, Path(leaf).read_text(encoding="utf-8"))
    if parent is not None:
        templates[TemplateKind.PARENT] = PromptTemplate(TemplateKind.PARENT, Path(parent).read_text(encoding="utf-8"))
    return templates


@dataclass(frozen=True)
class GenMeta:
    backend_id: str
    timestamp: str
    truncated: bool = False


@dataclass(frozen=True)
class KnowledgeDoc:
    node_id: str
    path: str
    level: DocLevel
    markdown: str
    source_children: tuple[str, ...] = ()
    gen_meta: GenMeta = field(default_factory=lambda: GenMeta("", ""))
    seq: int = -1

    def with_seq(self, seq: int) -> "KnowledgeDoc":
        return KnowledgeDoc(self.node_id, self.path, self.level, self.markdown, self.source_children, self.gen_meta, seq)

    def manifest_entry(self) -> dict:
        return {
            "node_id": self.node_id,
            "path": self.path,
            "level": self.level.value,
            "seq": self.seq,
            "source_children": list(self.source_children),
            "file": doc_filename(self),
            "gen_meta": {
                "backend_id": self.gen_meta.backend_id,
                "timestamp": self.gen_meta.timestamp,
                "truncated": self.gen_meta.truncated,
            },
        }


@dataclass(frozen=True)
class KnowledgeBase:
    docs: Mapping[str, KnowledgeDoc]
    tree_fingerprint: str

    def __len__(self) -> int:
        return len(self.docs)

    def ordered(self) -> list[KnowledgeDoc]:
        return sorted(self.docs.values(), key=lambda d: d.seq)

    def save(self, directory: str | os.PathLike) -> None:
        store = KnowledgeStore(directory)
        for doc in self.ordered():
            store.write_doc(doc)
        store.finalize(self)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "KnowledgeBase":
        directory = Path(directory)
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
        docs = {e["node_id"]: _doc_from_entry(directory, e) for e in manifest["docs"]}
        return cls(docs=docs, tree_fingerprint=manifest["tree_fingerprint"])


def doc_filename(doc: KnowledgeDoc) -> str:
    """KB-relative file for ``doc``; the layout mirrors the repository."""
    if doc.level is DocLevel.FILE:
        return f"{doc.path}.md"
    return FOLDER_DOC if doc.path == "." else f"{doc.path}/{FOLDER_DOC}"


def _doc_from_entry(directory: Path, entry: dict) -> KnowledgeDoc:
    meta = entry["gen_meta"]
    return KnowledgeDoc(
        node_id=entry["node_id"],
        path=entry["path"],
        level=DocLevel(entry["level"]),
        markdown=(directory / entry["file"]).read_text(encoding="utf-8"),
        source_children=tuple(entry["source_children"]),
        gen_meta=GenMeta(meta["backend_id"], meta["timestamp"], meta["truncated"]),
        seq=entry["seq"],
    )


def _dump(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


class KnowledgeStore:
    """Incremental on-disk KB writer with a resume marker.

    Docs are written as soon as they are produced. The marker names the
    tree fingerprint and the completed docs; it is removed by
    :meth:`finalize`, which also writes the manifest.
    """

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def write_doc(self, doc: KnowledgeDoc) -> None:
        target = self.directory / doc_filename(doc)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(doc.markdown, encoding="utf-8")

    def mark(self, fingerprint: str, docs: Iterable[KnowledgeDoc]) -> None:
        entries = sorted((d.manifest_entry() for d in docs), key=lambda e: e["seq"])
        _dump(self.directory / RESUME_MARKER, {"tree_fingerprint": fingerprint, "completed": entries})

    def resume(self, fingerprint: str) -> dict[str, KnowledgeDoc]:
        """Docs completed by an earlier aborted run over the same tree."""
        marker = self.directory / RESUME_MARKER
        if not marker.exists():
            return {}
        state = json.loads(marker.read_text(encoding="utf-8"))
        if state.get("tree_fingerprint") != fingerprint:
            log.warning("resume marker in %s belongs to a different tree; starting over", self.directory)
            return {}
        docs = {e["node_id"]: _doc_from_entry(self.directory, e) for e in state["completed"]}
        log.info("resuming: %d docs already complete", len(docs))
        return docs

    def finalize(self, kb: KnowledgeBase) -> None:
        manifest = {"tree_fingerprint": kb.tree_fingerprint, "docs": [d.manifest_entry() for d in kb.ordered()]}
        _dump(self.directory / MANIFEST, manifest)
        (self.directory / RESUME_MARKER).unlink(missing_ok=True)


def leaf_context(node: TreeNode) -> tuple[str, str]:
    """(protected metadata header, raw content) for a leaf prompt."""
    header = f"path: {node.path}\nfile_name: {node.name}\n\n"
    content = node.read_text()
    return header, (content if content.strip() else EMPTY_FILE_CONTEXT)


def parent_context(node: TreeNode, child_docs: list[KnowledgeDoc]) -> tuple[str, str]:
    names = [d.path.rsplit("/", 1)[-1] for d in child_docs]
    header = f"path: {node.path}\nfolder_name: {node.name}\nitems: {', '.join(names) or '(none)'}\n\n"
    if not child_docs:
        return header, EMPTY_FOLDER_CONTEXT
    body = CHILD_SEPARATOR.join(f"## {d.path}\n\n{d.markdown}" for d in child_docs)
    return header, body


def _generate(node, kind, template, header, context, backend, run_log, clock, max_output_tokens, extra):
    prompt, truncated = render_prompt(
        template.body, context, backend.context_budget_tokens, protected=header, run_log=run_log, target=node.path
    )
    meta = {"kind": kind, "name": node.name, "path": node.path, "context": header + context, **extra}
    req = GenRequest(system_prompt(kind), prompt, max_output_tokens=max_output_tokens, meta=meta)
    resp = backend.generate(req)
    return resp.text, GenMeta(resp.backend_id, clock(), truncated)


def distill_leaf(
    node: TreeNode,
    template: PromptTemplate,
    backend: LlmBackend,
    *,
    run_log: RunLog | None = None,
    clock: Callable[[], str] = timestamp,
    max_output_tokens: int = 1024,
) -> KnowledgeDoc:
    if not node.is_leaf:
        raise ValueError(f"{node.path} is not a leaf")
    if template.name is not TemplateKind.LEAF:
        raise TemplateError("distill_leaf needs the leaf template")
    header, context = leaf_context(node)
    text, meta = _generate(node, "leaf", template, header, context, backend, run_log, clock, max_output_tokens, {})
    return KnowledgeDoc(node.id, node.path, DocLevel.FILE, text, (), meta)


def distill_parent(
    node: TreeNode,
    child_docs: list[KnowledgeDoc],
    template: PromptTemplate,
    backend: LlmBackend,
    *,
    run_log: RunLog | None = None,
    clock: Callable[[], str] = timestamp,
    max_output_tokens: int = 1024,
) -> KnowledgeDoc:
    if node.is_leaf:
        raise ValueError(f"{node.path} is not a folder")
    if template.name is not TemplateKind.PARENT:
        raise TemplateError("distill_parent needs the parent template")
    given = {d.node_id: d for d in child_docs}
    for child in node.children:
        if child not in given:
            raise MissingChildDoc(child)
    ordered = [given[c] for c in node.children]
    header, context = parent_context(node, ordered)
    extra = {"children": [d.path.rsplit("/", 1)[-1] for d in ordered]}
    text, meta = _generate(node, "parent", template, header, context, backend, run_log, clock, max_output_tokens, extra)
    return KnowledgeDoc(node.id, node.path, DocLevel.FOLDER, text, tuple(node.children), meta)


def distill_tree(
    tree: RepoTree,
    templates: Mapping[TemplateKind, PromptTemplate],
    backend: LlmBackend,
    *,
    workers: int = 1,
    run_log: RunLog | None = None,
    clock: Callable[[], str] = timestamp,
    store: KnowledgeStore | None = None,
    max_output_tokens: int = 1024,
) -> KnowledgeBase:
    """Produce one knowledge doc per node, deepest level first.

    Nodes of one level run concurrently on ``workers`` threads; a level
    starts only after the previous one finished. With a ``store`` every doc
    is persisted as it completes, and a failed run can be resumed by
    calling again with the same store.
    """
    fingerprint = tree.fingerprint()
    levels = levels_bottom_up(tree)
    seq_of = {nid: i for i, nid in enumerate(nid for level in levels for nid in level)}
    docs: dict[str, KnowledgeDoc] = store.resume(fingerprint) if store else {}

    def work(node_id: str) -> KnowledgeDoc:
        node = tree[node_id]
        kw = dict(run_log=run_log, clock=clock, max_output_tokens=max_output_tokens)
        if node.is_leaf:
            return distill_leaf(node, templates[TemplateKind.LEAF], backend, **kw)
        return distill_parent(node, [docs[c] for c in node.children if c in docs],
                              templates[TemplateKind.PARENT], backend, **kw)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for depth_index, level in enumerate(levels):
            pending = [nid for nid in level if nid not in docs]
            if not pending:
                continue
            log.info("level %d/%d: %d nodes", depth_index + 1, len(levels), len(pending))
            futures = {pool.submit(work, nid): nid for nid in pending}
            done, not_done = wait(futures, return_when=FIRST_EXCEPTION)
            for fut in not_done:
                fut.cancel()
            wait(not_done)
            failure = None
            for fut, nid in futures.items():
                if fut.cancelled():
                    continue
                exc = fut.exception()
                if exc is not None:
                    failure = failure or exc
                    continue
                doc = fut.result().with_seq(seq_of[nid])
                docs[nid] = doc
                if store:
                    store.write_doc(doc)
            if store:
                store.mark(fingerprint, docs.values())
            if failure is not None:
                log.error("distillation aborted at level %d: %s", depth_index + 1, failure)
                raise failure

    kb = KnowledgeBase(docs=dict(sorted(docs.items(), key=lambda kv: kv[1].seq)), tree_fingerprint=fingerprint)
    if store:
        store.finalize(kb)
    return kb
