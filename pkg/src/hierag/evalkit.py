"""Answer-quality metrics (BLEU-1, E-F1, token EM) and report tables."""

from __future__ import annotations

import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .distiller import DocLevel
from .embed_store import Method
from .errors import DatasetError, EmptyReference, MissingAnswer

# words, with "." or "_" kept only between word characters
_TOKEN = re.compile(r"[^\W_]+(?:[._][^\W_]+)*")

LEVEL_COLUMNS = ("File", "Folder", "Overall")
METRICS = ("bleu1", "ef1", "em")
METRIC_HEADERS = {"bleu1": "Bleu-1", "ef1": "E-F1", "em": "EM"}
_LEVEL_KEY = {DocLevel.FILE: "File", DocLevel.FOLDER: "Folder"}


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[str, ...]

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def normalize(text: str) -> TokenSeq:
    """Lower-case and split on anything that is not part of a word.

    ``.`` and ``_`` survive when they sit between word characters, so
    ``AeroMapCompare.m`` stays one token while a sentence-final period goes.
    """
    return TokenSeq(tuple(_TOKEN.findall(text.lower())))


def _seq(x) -> tuple[str, ...]:
    return x.tokens if isinstance(x, TokenSeq) else tuple(x)


@dataclass(frozen=True)
class Bleu1Breakdown:
    p1: float
    c: int
    r: int
    bp: float
    score: float


@dataclass(frozen=True)
class EF1Breakdown:
    precision: float
    recall: float
    f1: float
    overlap: int


def clipped_overlap(a, b) -> int:
    return sum((Counter(_seq(a)) & Counter(_seq(b))).values())


def bleu1(candidate, reference) -> Bleu1Breakdown:
    cand, ref = _seq(candidate), _seq(reference)
    if not ref:
        raise EmptyReference("BLEU-1 needs a non-empty reference")
    c, r = len(cand), len(ref)
    if c == 0:
        # brevity penalty tends to 0 as the candidate shrinks to nothing
        return Bleu1Breakdown(p1=0.0, c=0, r=r, bp=0.0, score=0.0)
    p1 = clipped_overlap(cand, ref) / c
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    # with a single unit weight, exp(w1 * log p1) is p1 itself
    score = bp * p1 if p1 > 0 else 0.0
    return Bleu1Breakdown(p1=p1, c=c, r=r, bp=bp, score=score)


def ef1(prediction, reference) -> EF1Breakdown:
    pred, ref = _seq(prediction), _seq(reference)
    overlap = clipped_overlap(pred, ref)
    precision = overlap / len(pred) if pred else 0.0
    recall = overlap / len(ref) if ref else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EF1Breakdown(precision=precision, recall=recall, f1=f1, overlap=overlap)


def em_token(prediction, reference) -> float:
    """Share of reference tokens found in the prediction, multiset-clipped."""
    ref = _seq(reference)
    if not ref:
        raise EmptyReference("token EM needs a non-empty reference")
    return clipped_overlap(prediction, ref) / len(ref)


# --- dataset ------------------------------------------------------------------


@dataclass(frozen=True)
class QAItem:
    id: str
    question: str
    ground_truth: str
    level: DocLevel


def parse_dataset(raw) -> list[QAItem]:
    if not isinstance(raw, list):
        raise DatasetError("dataset must be a JSON array")
    items, seen = [], set()
    for pos, entry in enumerate(raw):
        ident = entry.get("id", f"#{pos}") if isinstance(entry, dict) else f"#{pos}"
        if not isinstance(entry, dict):
            raise DatasetError(f"item {ident}: not an object")
        for key in ("id", "question", "ground_truth", "level"):
            if key not in entry:
                raise DatasetError(f"item {ident}: missing field '{key}'")
            if not isinstance(entry[key], str) or not entry[key].strip():
                raise DatasetError(f"item {ident}: field '{key}' must be a non-empty string")
        try:
            level = DocLevel(entry["level"])
        except ValueError:
            raise DatasetError(f"item {ident}: level must be FileLevel or FolderLevel") from None
        if not normalize(entry["ground_truth"]).tokens:
            raise DatasetError(f"item {ident}: ground_truth has no tokens")
        if ident in seen:
            raise DatasetError(f"item {ident}: duplicate id")
        seen.add(ident)
        items.append(QAItem(entry["id"], entry["question"], entry["ground_truth"], level))
    return items


def load_dataset(path: str | os.PathLike) -> list[QAItem]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    return parse_dataset(raw)


# --- report -------------------------------------------------------------------


@dataclass(frozen=True)
class QuestionScore:
    id: str
    level: str
    method: str
    bleu1: float
    ef1: float
    em: float


@dataclass
class MetricReport:
    per_question: list[QuestionScore] = field(default_factory=list)
    # method -> level column -> metric -> mean (None when the level is empty)
    aggregates: dict = field(default_factory=dict)
    doc_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_question": [vars(q) for q in self.per_question],
            "aggregates": self.aggregates,
            "doc_counts": self.doc_counts,
            "reduction": reduction(self.doc_counts),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        return cls(
            per_question=[QuestionScore(**q) for q in data.get("per_question", [])],
            aggregates={m: {lvl: dict(v) if v is not None else None for lvl, v in cols.items()}
                        for m, cols in data.get("aggregates", {}).items()},
            doc_counts=dict(data.get("doc_counts", {})),
        )

    def methods(self) -> list[str]:
        order = [m.value for m in Method]
        names = set(self.aggregates) | set(self.doc_counts)
        return sorted(names, key=lambda m: (order.index(m) if m in order else len(order), m))


def _mean(values: Sequence[float]):
    return sum(values) / len(values) if values else None


def score_answer(answer_text: str, ground_truth: str) -> tuple[float, float, float]:
    pred, ref = normalize(answer_text), normalize(ground_truth)
    return bleu1(pred, ref).score, ef1(pred, ref).f1, em_token(pred, ref)


def evaluate(answers: Iterable, dataset: Sequence[QAItem], doc_counts: Mapping[str, int]) -> MetricReport:
    """Score every (question, method) answer and average per level.

    ``Overall`` is the mean over all questions pooled, not the mean of the
    two level means.
    """
    by_key = {}
    methods = []
    for a in answers:
        method = a.method.value if isinstance(a.method, Method) else str(a.method)
        by_key[(a.question, method)] = a
        if method not in methods:
            methods.append(method)
    rows = []
    for method in methods:
        for item in dataset:
            ans = by_key.get((item.question, method))
            if ans is None:
                raise MissingAnswer(item.id, method)
            b, f, e = score_answer(ans.answer_text, item.ground_truth)
            rows.append(QuestionScore(item.id, item.level.value, method, b, f, e))
    aggregates = {}
    for method in methods:
        mine = [r for r in rows if r.method == method]
        cols = {}
        for col in LEVEL_COLUMNS:
            pool = mine if col == "Overall" else [r for r in mine if _LEVEL_KEY[DocLevel(r.level)] == col]
            cols[col] = None if not pool else {m: _mean([getattr(r, m) for r in pool]) for m in METRICS}
        aggregates[method] = cols
    return MetricReport(per_question=rows, aggregates=aggregates, doc_counts=dict(doc_counts))


def reduction(doc_counts: Mapping[str, int]):
    """Fractional document saving of the implicit index over the baseline."""
    base = doc_counts.get(Method.BASELINE.value)
    impl = doc_counts.get(Method.IMPLICIT.value)
    if not base or impl is None:
        return None
    return 1.0 - impl / base


def format_reduction(doc_counts: Mapping[str, int]) -> str | None:
    red = reduction(doc_counts)
    if red is None:
        return None
    base = doc_counts[Method.BASELINE.value]
    impl = doc_counts[Method.IMPLICIT.value]
    ratio = f"{base / impl:.2f}x" if impl else "inf"
    return f"reduction: {red * 100:.1f}% fewer documents ({base} -> {impl}, {ratio} fewer)"


def _cell(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def render_quality_table(report: MetricReport) -> str:
    """Aligned text table: methods by (File | Folder | Overall) x metrics."""
    methods = [m for m in report.methods() if m in report.aggregates]
    label_w = max([len("Method")] + [len(m) for m in methods])
    cell_w = 6
    group_w = len(METRICS) * cell_w + (len(METRICS) - 1)

    def row(label, groups):
        return " | ".join([label.ljust(label_w)] + groups)

    lines = [
        row("", [c.center(group_w) for c in LEVEL_COLUMNS]),
        row("Method", [" ".join(METRIC_HEADERS[m].rjust(cell_w) for m in METRICS)] * len(LEVEL_COLUMNS)),
        "-+-".join(["-" * label_w] + ["-" * group_w] * len(LEVEL_COLUMNS)),
    ]
    for method in methods:
        groups = []
        for col in LEVEL_COLUMNS:
            vals = report.aggregates[method].get(col) or {}
            groups.append(" ".join(_cell(vals.get(m)).rjust(cell_w) for m in METRICS))
        lines.append(row(method, groups))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def render_counts_table(report: MetricReport) -> str:
    header = "# of documents generated"
    methods = [m for m in report.methods() if m in report.doc_counts]
    label_w = max([len("Method")] + [len(m) for m in methods])
    lines = [f"{'Method'.ljust(label_w)} | {header}", f"{'-' * label_w}-+-{'-' * len(header)}"]
    lines += [f"{m.ljust(label_w)} | {report.doc_counts[m]}" for m in methods]
    red = format_reduction(report.doc_counts)
    if red:
        lines += ["", red]
    return "\n".join(lines) + "\n"


def render_report(report: MetricReport) -> str:
    parts = []
    if report.aggregates:
        parts.append("Answer quality (mean scores)\n\n" + render_quality_table(report))
    if report.doc_counts:
        parts.append("Vector database size\n\n" + render_counts_table(report))
    return "\n".join(parts)


def write_report(report: MetricReport, out_dir: str | os.PathLike) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "text": out / "report.txt", "counts": out / "doc_counts.txt"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["text"].write_text(render_report(report), encoding="utf-8")
    paths["counts"].write_text(render_counts_table(report), encoding="utf-8")
    return paths
