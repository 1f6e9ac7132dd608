"""Scan a directory into an immutable tree and walk it bottom-up."""

from __future__ import annotations

import enum
import fnmatch
import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from .errors import IoError, NotADirectory, PathNotFound
from .tokens import count_tokens

log = logging.getLogger(__name__)

DEFAULT_IGNORES = (".git", ".hg", ".svn")
ROOT_PATH = "."
_BINARY_SNIFF = 8192


class NodeKind(str, enum.Enum):
    LEAF = "Leaf"
    INTERNAL = "Internal"


def node_id_for(path: str) -> str:
    """Stable id derived from the repo-relative path."""
    return hashlib.sha1(path.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class TreeNode:
    id: str
    name: str
    kind: NodeKind
    path: str
    children: tuple[str, ...] = ()
    content_ref: Path | None = None
    token_count: int = 0
    size: int = 0
    binary: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.kind is NodeKind.LEAF

    def read_text(self) -> str:
        """Content used for prompting and chunking.

        Binary files are replaced by a short descriptor.
        """
        if not self.is_leaf:
            raise ValueError(f"{self.path} is a folder")
        if self.binary:
            return binary_descriptor(self.name, self.size)
        try:
            return self.content_ref.read_bytes().decode("utf-8")
        except OSError as exc:
            raise IoError(self.content_ref, exc) from exc


def binary_descriptor(name: str, size: int) -> str:
    ext = os.path.splitext(name)[1] or "(none)"
    return f"[binary file] name: {name} size: {size} bytes extension: {ext}"


@dataclass(frozen=True)
class RepoTree:
    root: str
    nodes: Mapping[str, TreeNode]
    source_root: Path

    def __getitem__(self, node_id: str) -> TreeNode:
        return self.nodes[node_id]

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root_node(self) -> TreeNode:
        return self.nodes[self.root]

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.walk() if n.is_leaf]

    def internal_nodes(self) -> list[TreeNode]:
        return [n for n in self.walk() if not n.is_leaf]

    def walk(self) -> Iterable[TreeNode]:
        """Pre-order depth-first traversal from the root."""
        stack = [self.root]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def parents(self) -> dict[str, str]:
        return {c: n.id for n in self.nodes.values() for c in n.children}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for node in self.walk():
            h.update(
                f"{node.id}\0{node.path}\0{node.kind.value}\0{','.join(node.children)}"
                f"\0{node.size}\0{node.token_count}\n".encode("utf-8")
            )
        return h.hexdigest()


def build_tree(source_root: Path, nodes: Iterable[TreeNode], root: str) -> RepoTree:
    return RepoTree(root=root, nodes=MappingProxyType({n.id: n for n in nodes}), source_root=source_root)


def _ignored(rel: str, name: str, rules: Iterable[str]) -> bool:
    for pattern in rules:
        if fnmatch.fnmatchcase(name, pattern) or fnmatch.fnmatchcase(rel, pattern):
            return True
        # "dir/" style patterns match the directory and everything below it
        if pattern.endswith("/") and (rel + "/").startswith(pattern):
            return True
    return False


def _looks_binary(path: Path) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(_BINARY_SNIFF)
    if b"\0" in head:
        return True
    try:
        path.read_bytes().decode("utf-8")
    except UnicodeDecodeError:
        return True
    return False


def read_ignore_file(path: str | os.PathLike) -> list[str]:
    """One glob per line; blank lines and ``#`` comments are skipped."""
    rules = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rules.append(line)
    return rules


def scan(path: str | os.PathLike, ignore_rules: Iterable[str] = ()) -> RepoTree:
    """Build a :class:`RepoTree` from the directory at ``path``.

    Symlinks are skipped and version-control directories are ignored in
    addition to ``ignore_rules``.
    """
    source = Path(path)
    if not source.exists() and not source.is_symlink():
        raise PathNotFound(f"path not found: {source}")
    if not source.is_dir():
        raise NotADirectory(f"not a directory: {source}")
    source = source.resolve()
    rules = tuple(DEFAULT_IGNORES) + tuple(ignore_rules)
    nodes: list[TreeNode] = []

    def visit(directory: Path, rel: str) -> str:
        try:
            entries = sorted(os.scandir(directory), key=lambda e: e.name)
        except OSError as exc:
            raise IoError(directory, exc) from exc
        child_ids = []
        for entry in entries:
            child_rel = entry.name if rel == ROOT_PATH else f"{rel}/{entry.name}"
            if entry.is_symlink():
                log.debug("skipping symlink %s", child_rel)
                continue
            if _ignored(child_rel, entry.name, rules):
                continue
            if entry.is_dir(follow_symlinks=False):
                child_ids.append(visit(Path(entry.path), child_rel))
            elif entry.is_file(follow_symlinks=False):
                child_ids.append(_leaf(Path(entry.path), child_rel, entry.name))
        name = source.name if rel == ROOT_PATH else directory.name
        node = TreeNode(id=node_id_for(rel), name=name, kind=NodeKind.INTERNAL, path=rel, children=tuple(child_ids))
        nodes.append(node)
        return node.id

    def _leaf(file: Path, rel: str, name: str) -> str:
        try:
            size = file.stat().st_size
            binary = _looks_binary(file)
            tokens = count_tokens(binary_descriptor(name, size) if binary else file.read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoError(file, exc) from exc
        node = TreeNode(
            id=node_id_for(rel),
            name=name,
            kind=NodeKind.LEAF,
            path=rel,
            content_ref=file,
            token_count=tokens,
            size=size,
            binary=binary,
        )
        nodes.append(node)
        return node.id

    root = visit(source, ROOT_PATH)
    return build_tree(source, nodes, root)


def depths(tree: RepoTree) -> dict[str, int]:
    out = {tree.root: 0}
    for node in tree.walk():
        for child in node.children:
            out[child] = out[node.id] + 1
    return out


def levels_bottom_up(tree: RepoTree) -> list[list[str]]:
    """Group node ids by decreasing depth; the last group is ``[root]``.

    Within a group ids keep pre-order (hence name) order.
    """
    depth = depths(tree)
    groups: dict[int, list[str]] = {}
    for node in tree.walk():
        groups.setdefault(depth[node.id], []).append(node.id)
    return [groups[d] for d in sorted(groups, reverse=True)]
