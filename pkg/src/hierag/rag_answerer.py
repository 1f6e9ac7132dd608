"""Retrieve, assemble a grounded prompt, generate."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Callable

from .clock import timestamp
from .distiller import GenMeta, system_prompt
from .embed_store import EmbedBackend, Method, VectorIndex, retrieve
from .llm_backend import GenRequest, LlmBackend, RunLog, render_prompt

NO_SOURCES = "No sources were retrieved."
NOT_FOUND = "not found in the repository"


@dataclass(frozen=True)
class RagAnswer:
    question: str
    answer_text: str
    retrieved: tuple[tuple[str, float], ...]
    method: Method | None
    gen_meta: GenMeta

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "answer_text": self.answer_text,
            "retrieved": [{"doc_id": d, "score": s} for d, s in self.retrieved],
            "method": self.method.value if self.method else None,
            "gen_meta": {"backend_id": self.gen_meta.backend_id, "timestamp": self.gen_meta.timestamp,
                         "truncated": self.gen_meta.truncated},
        }


def answer_template() -> str:
    return resources.files("hierag").joinpath("assets", "answer_template.md").read_text(encoding="utf-8")


def format_sources(hits) -> str:
    if not hits:
        return NO_SOURCES
    return "\n\n".join(f"### Source {doc.doc_id}\n{doc.text}" for doc, _ in hits)


def answer(
    question: str,
    index: VectorIndex,
    k: int,
    llm: LlmBackend,
    embed: EmbedBackend,
    *,
    run_log: RunLog | None = None,
    clock: Callable[[], str] = timestamp,
    max_output_tokens: int = 512,
) -> RagAnswer:
    hits = retrieve(index, question, k, embed)
    context = format_sources(hits)
    template = answer_template().replace("{question}", question)
    prompt, truncated = render_prompt(template, context, llm.context_budget_tokens, run_log=run_log,
                                      target=f"query:{question}")
    doc_ids = [doc.doc_id for doc, _ in hits]
    req = GenRequest(
        system_prompt("answer"),
        prompt,
        max_output_tokens=max_output_tokens,
        meta={"kind": "answer", "name": question, "question": question, "sources": doc_ids, "context": context},
    )
    resp = llm.generate(req)
    return RagAnswer(
        question=question,
        answer_text=resp.text,
        retrieved=tuple((doc.doc_id, score) for doc, score in hits),
        method=index.method,
        gen_meta=GenMeta(resp.backend_id, clock(), truncated),
    )
