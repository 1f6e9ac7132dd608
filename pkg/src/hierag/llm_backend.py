"""Text generation backends: an OpenAI-compatible HTTP client and a
deterministic rule-driven stub for offline runs."""

from __future__ import annotations

import fnmatch
import json
import logging
import os
import re
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import httpx

from ._http import post_json
from .errors import AuthError, BackendError, MalformedResponse
from .tokens import count_tokens, truncate_to_tokens, whitespace_tokens

log = logging.getLogger(__name__)

API_KEY_ENV = "HIERAG_API_KEY"
CONTEXT_PLACEHOLDER = "{context}"
DEFAULT_CONTEXT_BUDGET = 8192


@dataclass(frozen=True)
class GenRequest:
    """One generation call.

    ``meta`` carries structured hints (node name, child names, question...)
    that the scripted backend renders; it is never sent over the wire.
    """

    system_prompt: str
    user_prompt: str
    max_output_tokens: int = 1024
    temperature: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be non-empty")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")


@dataclass(frozen=True)
class GenResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    backend_id: str


@dataclass(frozen=True)
class TruncationEvent:
    target: str
    original_tokens: int
    kept_tokens: int
    budget: int
    kind: str = "truncation"


class RunLog:
    """Thread-safe, append-only list of run events."""

    def __init__(self):
        self._events: list = []
        self._lock = threading.Lock()

    def record(self, event) -> None:
        with self._lock:
            self._events.append(event)
        log.warning("context for %s truncated: %d -> %d tokens", event.target, event.original_tokens, event.kept_tokens)

    @property
    def events(self) -> list:
        with self._lock:
            return list(self._events)

    def truncations(self, target: str | None = None) -> list[TruncationEvent]:
        return [e for e in self.events if isinstance(e, TruncationEvent) and (target is None or e.target == target)]

    def write_jsonl(self, path: str | os.PathLike) -> None:
        # sorted so concurrent dispatch does not change the file
        lines = sorted(json.dumps(asdict(e), sort_keys=True) for e in self.events)
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def render_prompt(
    template: str,
    context: str,
    budget_tokens: int,
    *,
    protected: str = "",
    run_log: RunLog | None = None,
    target: str = "",
) -> tuple[str, bool]:
    """Substitute ``protected + context`` into the ``{context}`` slot.

    When the whole prompt would exceed ``budget_tokens`` the tail of
    ``context`` is cut; the template instructions and ``protected`` are kept
    intact. Returns the prompt and whether truncation happened.
    """
    fixed = count_tokens(template.replace(CONTEXT_PLACEHOLDER, " ")) + count_tokens(protected)
    available = max(0, budget_tokens - fixed)
    n = count_tokens(context)
    truncated = n > available
    if truncated:
        context = truncate_to_tokens(context, available)
        if run_log is not None:
            run_log.record(TruncationEvent(target=target, original_tokens=n, kept_tokens=available, budget=budget_tokens))
    return template.replace(CONTEXT_PLACEHOLDER, protected + context, 1), truncated


class LlmBackend:
    backend_id = "abstract"
    context_budget_tokens = DEFAULT_CONTEXT_BUDGET

    def generate(self, req: GenRequest) -> GenResponse:
        raise NotImplementedError


# --- scripted -----------------------------------------------------------------

DEFAULT_RULES = {
    "leaf:*": "# {name}\n\n- path: {path}\n- kind: file\n\n## Excerpt\n\n{head}\n",
    "parent:*": "# {name}\n\n- path: {path}\n- kind: folder\n\n## Items\n\n{children}\n\n## Excerpt\n\n{head}\n",
    "answer:*": "{head}",
}
ERROR_DIRECTIVE = "!error"
_FIELD = re.compile(r"\{(\w+)\}")
_ESCAPES = {"n": "\n", "t": "\t", "\\": "\\"}


def _unescape(value: str) -> str:
    return re.sub(r"\\(.)", lambda m: _ESCAPES.get(m.group(1), m.group(0)), value)


def load_rules(path: str | os.PathLike) -> dict[str, str]:
    """Parse a rule table: ``<kind>:<name glob> = <template>`` per line.

    ``\\n`` and ``\\t`` escapes are expanded in templates. Lines starting
    with ``#`` are comments. Key order is kept; it is the match order.
    """
    rules: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        sep = " = " if " = " in line else "="
        if sep not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split(sep, 1)
        rules[key.strip()] = _unescape(value.strip())
    return rules


class ScriptedBackend(LlmBackend):
    """Pure-function backend: output depends only on the request.

    The request's ``meta['kind']`` and ``meta['name']`` form a lookup key
    ``kind:name``. An exact key wins; otherwise the first glob rule that
    matches is used. Templates may reference ``{name}``, ``{path}``,
    ``{kind}``, ``{children}``, ``{question}``, ``{sources}`` and ``{head}``
    (the first ``head_tokens`` tokens of the context). A template starting
    with ``!error`` makes the call fail, which is handy for abort tests.
    """

    def __init__(self, rules: dict[str, str] | None = None, *, head_tokens: int = 32,
                 context_budget_tokens: int = DEFAULT_CONTEXT_BUDGET):
        self.rules = dict(DEFAULT_RULES if rules is None else rules)
        self.head_tokens = head_tokens
        self.context_budget_tokens = context_budget_tokens
        self.backend_id = f"scripted:k{head_tokens}"

    @classmethod
    def from_file(cls, path, **kw) -> "ScriptedBackend":
        # file rules are matched before the built-in fallbacks
        file_rules = load_rules(path)
        rules = {**file_rules, **{k: v for k, v in DEFAULT_RULES.items() if k not in file_rules}}
        return cls(rules, **kw)

    def _lookup(self, key: str) -> str:
        if key in self.rules:
            return self.rules[key]
        for pattern, template in self.rules.items():
            if fnmatch.fnmatchcase(key, pattern):
                return template
        raise BackendError(f"scripted backend has no rule for {key!r}")

    def generate(self, req: GenRequest) -> GenResponse:
        meta = req.meta
        key = f"{meta.get('kind', 'raw')}:{meta.get('name', '')}"
        template = self._lookup(key)
        if template.startswith(ERROR_DIRECTIVE):
            raise BackendError(template[len(ERROR_DIRECTIVE):].strip() or f"scripted failure for {key}")
        source = meta.get("context", req.user_prompt)
        fields = {
            "name": meta.get("name", ""),
            "path": meta.get("path", ""),
            "kind": meta.get("kind", ""),
            "question": meta.get("question", ""),
            "children": "\n".join(f"- {c}" for c in meta.get("children", ())) or "- (none)",
            "sources": ", ".join(meta.get("sources", ())) or "(none)",
            "head": " ".join(whitespace_tokens(source)[: self.head_tokens]),
        }
        text = _FIELD.sub(lambda m: fields.get(m.group(1), m.group(0)), template)
        return GenResponse(
            text=text,
            prompt_tokens=count_tokens(req.system_prompt) + count_tokens(req.user_prompt),
            completion_tokens=count_tokens(text),
            backend_id=self.backend_id,
        )


# --- remote -------------------------------------------------------------------


class RemoteBackend(LlmBackend):
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        endpoint_url: str,
        model_name: str,
        *,
        api_key: str | None = None,
        api_key_env: str = API_KEY_ENV,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        max_inflight: int = 4,
        timeout: float = 120.0,
        context_budget_tokens: int = DEFAULT_CONTEXT_BUDGET,
        client: httpx.Client | None = None,
    ):
        self.endpoint_url = endpoint_url
        self.model_name = model_name
        self._api_key = api_key if api_key is not None else os.environ.get(api_key_env)
        self._api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.context_budget_tokens = context_budget_tokens
        self._slots = threading.BoundedSemaphore(max_inflight)
        self._client = client or httpx.Client(timeout=timeout)
        self.backend_id = f"remote:{model_name}"

    def __repr__(self):
        return f"RemoteBackend(endpoint_url={self.endpoint_url!r}, model_name={self.model_name!r})"

    def generate(self, req: GenRequest) -> GenResponse:
        if not self._api_key:
            raise AuthError(f"credential missing: set {self._api_key_env}")
        payload = {
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
        }
        with self._slots:
            body = post_json(self._client, self.endpoint_url, payload, self._api_key,
                             max_retries=self.max_retries, backoff_base=self.backoff_base)
        try:
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage") or {}
            prompt_tokens = int(usage.get("prompt_tokens", 0))
            completion_tokens = int(usage.get("completion_tokens", 0))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"unexpected completion payload: {exc!r}") from exc
        if not isinstance(text, str):
            raise MalformedResponse("completion content is not a string")
        return GenResponse(text=text, prompt_tokens=max(0, prompt_tokens),
                           completion_tokens=max(0, completion_tokens), backend_id=self.backend_id)
