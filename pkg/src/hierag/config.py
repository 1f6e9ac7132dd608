"""Run configuration: CLI flag > config file > built-in default."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .baseline_indexer import DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP
from .embed_store import DEFAULT_DIM, DEFAULT_K
from .errors import ConfigError
from .llm_backend import DEFAULT_CONTEXT_BUDGET

log = logging.getLogger(__name__)

METHODS = ("baseline", "implicit", "both")
LLM_BACKENDS = ("scripted", "remote")
EMBED_BACKENDS = ("hash", "remote")
_PATH_KEYS = ("repo_path", "out", "llm_rules", "leaf_template", "parent_template", "ignore_file")


@dataclass
class RunConfig:
    repo_path: str | None = None
    method: str = "both"
    out: str = "hierag-out"
    ignore: list = field(default_factory=list)
    ignore_file: str | None = None
    # llm
    llm_backend: str = "scripted"
    llm_rules: str | None = None
    head_tokens: int = 32
    endpoint_url: str | None = None
    model_name: str | None = None
    max_retries: int = 3
    backoff_base: float = 0.5
    max_inflight: int = 4
    context_budget_tokens: int = DEFAULT_CONTEXT_BUDGET
    max_output_tokens: int = 1024
    temperature: float = 0.0
    # embeddings
    embed_backend: str = "hash"
    dim: int = DEFAULT_DIM
    embed_seed: int = 0
    embed_endpoint_url: str | None = None
    embed_model: str | None = None
    # chunking / retrieval
    chunk_size: int = DEFAULT_CHUNK_SIZE
    chunk_overlap: int = DEFAULT_OVERLAP
    k: int = DEFAULT_K
    leaf_template: str | None = None
    parent_template: str | None = None
    workers: int = 1

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}")
        if self.llm_backend not in LLM_BACKENDS:
            raise ConfigError(f"llm_backend must be one of {', '.join(LLM_BACKENDS)}")
        if self.embed_backend not in EMBED_BACKENDS:
            raise ConfigError(f"embed_backend must be one of {', '.join(EMBED_BACKENDS)}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if not 0 <= self.chunk_overlap < self.chunk_size:
            raise ConfigError("chunk_overlap must satisfy 0 <= overlap < chunk_size")
        for name in ("dim", "max_inflight", "context_budget_tokens", "max_output_tokens", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_retries < 0 or self.head_tokens < 0:
            raise ConfigError("max_retries and head_tokens must be >= 0")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("temperature must lie in [0, 2]")
        if self.llm_backend == "remote" and not (self.endpoint_url and self.model_name):
            raise ConfigError("remote llm backend needs endpoint_url and model_name")
        if self.embed_backend == "remote" and not (self.embed_endpoint_url and self.embed_model):
            raise ConfigError("remote embed backend needs embed_endpoint_url and embed_model")
        for name in _PATH_KEYS:
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, str(Path(value).expanduser().resolve()))
        return self


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment line."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _coerce(name: str, raw: str, default):
    f = {fl.name: fl for fl in dataclasses.fields(RunConfig)}[name]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        if kind.startswith("list"):
            return [s.strip() for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"config key {name}: cannot parse {raw!r}") from None
    return raw


def resolve(cli: Mapping[str, object], file_values: Mapping[str, str] | None = None) -> RunConfig:
    """Merge sources and log where every value came from."""
    file_values = dict(file_values or {})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(file_values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = RunConfig()
    for name in sorted(known):
        value = cli.get(name)
        if value is not None and value != []:
            setattr(cfg, name, value)
            source = "flag"
        elif name in file_values:
            setattr(cfg, name, _coerce(name, file_values[name], getattr(cfg, name)))
            source = "config file"
        else:
            source = "default"
        log.info("config %s = %r (%s)", name, getattr(cfg, name), source)
    return cfg.validate()
