"""Exception hierarchy shared by all hierag modules.

Every exception carries a machine-parsable ``code`` used by the CLI when it
reports a failure on stderr.
"""

from __future__ import annotations


class HieragError(Exception):
    code = "E_INTERNAL"
    exit_status = 1


# repo_tree
class PathNotFound(HieragError):
    code = "E_PATH"
    exit_status = 2


class NotADirectory(HieragError):
    code = "E_PATH"
    exit_status = 2


class IoError(HieragError):
    code = "E_IO"

    def __init__(self, path, cause):
        super().__init__(f"{path}: {cause}")
        self.path = path
        self.cause = cause


# llm / embedding backends
class BackendError(HieragError):
    code = "E_BACKEND"


class AuthError(BackendError):
    code = "E_AUTH"


class RateLimited(BackendError):
    pass


class BackendUnreachable(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class DimensionMismatch(BackendError):
    pass


# distiller
class MissingChildDoc(HieragError):
    def __init__(self, child_id):
        super().__init__(f"no knowledge doc for child {child_id}")
        self.child_id = child_id


class TemplateError(HieragError):
    code = "E_TEMPLATE"


# embed_store
class DuplicateDocId(HieragError):
    code = "E_INDEX"

    def __init__(self, doc_id):
        super().__init__(f"duplicate doc id {doc_id!r}")
        self.doc_id = doc_id


class IndexNotFound(HieragError):
    code = "E_NOINDEX"


# evalkit
class EmptyReference(HieragError):
    code = "E_DATASET"


class DatasetError(HieragError):
    code = "E_DATASET"


class MissingAnswer(HieragError):
    code = "E_DATASET"

    def __init__(self, question_id, method):
        super().__init__(f"no {method} answer for question {question_id!r}")
        self.question_id = question_id
        self.method = method


# cli
class ConfigError(HieragError):
    code = "E_ARG"
    exit_status = 2
