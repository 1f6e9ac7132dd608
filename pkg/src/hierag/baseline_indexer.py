"""Raw-content baseline: fixed-size token windows over every file."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .repo_tree import RepoTree, TreeNode
from .tokens import detokenize, whitespace_tokens

DEFAULT_CHUNK_SIZE = 1000
DEFAULT_OVERLAP = 0


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    node_id: str
    seq: int
    text: str
    token_count: int
    metadata: dict = field(default_factory=dict)

    def indexed_text(self) -> str:
        """Text handed to the embedder: a path header line, then the tokens."""
        return f"path: {self.metadata['path']}\n{self.text}"


def chunk_spans(n_tokens: int, size: int, overlap: int = 0) -> list[tuple[int, int]]:
    """Half-open token spans covering ``n_tokens`` tokens.

    >>> chunk_spans(10, 4, 1)
    [(0, 4), (3, 7), (6, 10)]
    """
    if size < 1:
        raise ValueError("chunk size must be positive")
    if not 0 <= overlap < size:
        raise ValueError("overlap must satisfy 0 <= overlap < chunk size")
    if n_tokens == 0:
        return [(0, 0)]
    stride = size - overlap
    spans = []
    start = 0
    while True:
        end = min(start + size, n_tokens)
        spans.append((start, end))
        if end == n_tokens:
            return spans
        start += stride


def chunk_file(
    node: TreeNode,
    chunk_size_limit: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
    tokenizer: Callable[[str], list] = whitespace_tokens,
) -> list[Chunk]:
    if not node.is_leaf:
        raise ValueError(f"{node.path} is not a file")
    tokens = tokenizer(node.read_text())
    metadata = {"path": node.path, "file_name": node.name}
    return [
        Chunk(
            doc_id=f"{node.path}#{seq}",
            node_id=node.id,
            seq=seq,
            text=detokenize(tokens[start:end]),
            token_count=end - start,
            metadata=dict(metadata),
        )
        for seq, (start, end) in enumerate(chunk_spans(len(tokens), chunk_size_limit, overlap))
    ]


def chunk_tree(
    tree: RepoTree,
    chunk_size_limit: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
    tokenizer: Callable[[str], list] = whitespace_tokens,
) -> list[Chunk]:
    chunks: list[Chunk] = []
    for leaf in tree.leaves():
        chunks.extend(chunk_file(leaf, chunk_size_limit, overlap, tokenizer))
    return chunks
