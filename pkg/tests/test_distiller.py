import json
import random
import threading

import pytest

from conftest import random_tree_spec, write_tree
from hierag.distiller import (
    EMPTY_FOLDER_CONTEXT,
    DocLevel,
    KnowledgeBase,
    KnowledgeStore,
    PromptTemplate,
    TemplateKind,
    default_templates,
    distill_leaf,
    distill_parent,
    distill_tree,
    load_templates,
)
from hierag.errors import BackendError, MissingChildDoc, TemplateError
from hierag.llm_backend import RunLog, ScriptedBackend
from hierag.repo_tree import node_id_for, scan

TEMPLATES = default_templates()
LEAF, PARENT = TEMPLATES[TemplateKind.LEAF], TEMPLATES[TemplateKind.PARENT]


class Recorder(ScriptedBackend):
    """Scripted backend that remembers the order of generate calls."""

    def __init__(self, *a, fail_after=None, **kw):
        super().__init__(*a, **kw)
        self.calls = []
        self.prompts = {}
        self.fail_after = fail_after
        self._lock = threading.Lock()

    def generate(self, req):
        with self._lock:
            if self.fail_after is not None and len(self.calls) >= self.fail_after:
                raise BackendError("injected failure")
            self.calls.append(req.meta["path"])
            self.prompts[req.meta["path"]] = req.user_prompt
        return super().generate(req)


def test_default_templates_carry_one_placeholder():
    assert LEAF.body.startswith("## Task Overview\nYou task is to generate a .md file from a single file")
    assert "maturity level" in LEAF.body
    assert "merging several .md files" in PARENT.body
    assert LEAF.body.count("{context}") == PARENT.body.count("{context}") == 1


def test_template_validation(tmp_path):
    with pytest.raises(TemplateError):
        PromptTemplate(TemplateKind.LEAF, "no slot")
    with pytest.raises(TemplateError):
        PromptTemplate(TemplateKind.LEAF, "{context} {context}")
    custom = tmp_path / "leaf.md"
    custom.write_text("Summarise:\n{context}\n")
    templates = load_templates(leaf=custom)
    assert templates[TemplateKind.LEAF].body == "Summarise:\n{context}\n"
    assert templates[TemplateKind.PARENT] == PARENT


def test_distill_leaf_echoes_name(fixture_repo):
    tree = scan(fixture_repo)
    node = tree[node_id_for("aero/AeroMapCompare.m")]
    backend = Recorder()
    doc = distill_leaf(node, LEAF, backend)
    assert "AeroMapCompare.m" in doc.markdown
    assert doc.level is DocLevel.FILE and doc.source_children == ()
    assert doc.gen_meta == type(doc.gen_meta)("scripted:k32", "2023-11-14T22:13:20+00:00", False)
    prompt = backend.prompts["aero/AeroMapCompare.m"]
    assert "path: aero/AeroMapCompare.m\nfile_name: AeroMapCompare.m\n\n% AeroMapCompare.m" in prompt
    assert prompt.startswith("## Task Overview")
    with pytest.raises(TemplateError):
        distill_leaf(node, PARENT, backend)


def test_distill_empty_leaf(tmp_path):
    tree = scan(write_tree(tmp_path, {"empty.m": ""}))
    backend = Recorder()
    doc = distill_leaf(tree[node_id_for("empty.m")], LEAF, backend)
    assert not doc.gen_meta.truncated
    assert "(this file is empty)" in backend.prompts["empty.m"]


def test_oversized_leaf_is_truncated_once(tmp_path):
    tree = scan(write_tree(tmp_path, {"big.m": " ".join(f"tok{i}" for i in range(5000))}))
    log = RunLog()
    backend = Recorder(context_budget_tokens=800)
    doc = distill_leaf(tree[node_id_for("big.m")], LEAF, backend, run_log=log)
    assert doc.gen_meta.truncated
    [event] = log.truncations()
    assert event.target == "big.m" and event.original_tokens == 5000
    assert len(backend.prompts["big.m"].split()) <= 800
    # the metadata header survives truncation
    assert "path: big.m\nfile_name: big.m" in backend.prompts["big.m"]


def test_distill_parent_lists_children_in_order(tmp_path):
    tree = scan(write_tree(tmp_path, {"pkg": {"zeta.m": "z", "alpha.m": "a"}}))
    folder = tree[node_id_for("pkg")]
    backend = Recorder()
    kids = [distill_leaf(tree[c], LEAF, backend) for c in folder.children]
    doc = distill_parent(folder, list(reversed(kids)), PARENT, backend)
    assert doc.level is DocLevel.FOLDER
    assert doc.source_children == folder.children
    assert doc.markdown.index("alpha.m") < doc.markdown.index("zeta.m")
    prompt = backend.prompts["pkg"]
    assert "items: alpha.m, zeta.m" in prompt
    assert "## pkg/alpha.m\n\n# alpha.m" in prompt and "\n\n---\n\n## pkg/zeta.m" in prompt
    with pytest.raises(MissingChildDoc) as err:
        distill_parent(folder, kids[:1], PARENT, backend)
    assert err.value.child_id == folder.children[1]


def test_distill_empty_folder(tmp_path):
    tree = scan(write_tree(tmp_path, {"void": {}}))
    backend = Recorder()
    doc = distill_parent(tree[node_id_for("void")], [], PARENT, backend)
    assert doc.source_children == ()
    assert EMPTY_FOLDER_CONTEXT in backend.prompts["void"]


def test_oversized_children_keep_full_child_list(tmp_path):
    spec = {f"c{i}.m": " ".join(f"w{j}" for j in range(300)) for i in range(6)}
    tree = scan(write_tree(tmp_path, spec))
    log = RunLog()
    backend = Recorder(head_tokens=400, context_budget_tokens=900)
    kids = [distill_leaf(tree[c], LEAF, backend, run_log=log) for c in tree.root_node.children]
    root = distill_parent(tree.root_node, kids, PARENT, backend, run_log=log)
    assert root.gen_meta.truncated
    assert root.source_children == tree.root_node.children
    assert "items: c0.m, c1.m, c2.m, c3.m, c4.m, c5.m" in backend.prompts["."]
    assert [e.target for e in log.truncations(".")] == ["."]


def test_tree_of_eight_nodes(fixture_repo):
    tree = scan(fixture_repo)
    kb = distill_tree(tree, TEMPLATES, Recorder())
    assert len(tree) == len(kb) == 8
    assert set(kb.docs) == set(tree.nodes)
    for nid, doc in kb.docs.items():
        assert (doc.level is DocLevel.FILE) == tree[nid].is_leaf
        if not tree[nid].is_leaf:
            assert doc.source_children == tree[nid].children


def test_single_file_tree(tmp_path):
    tree = scan(write_tree(tmp_path, {"only.m": "x"}))
    kb = distill_tree(tree, TEMPLATES, Recorder())
    assert len(kb) == 2
    assert kb.docs[tree.root].source_children == (node_id_for("only.m"),)


def test_four_node_generation_order(tmp_path):
    tree = scan(write_tree(tmp_path, {"d": {"x.m": "x"}, "y.m": "y"}))
    backend = Recorder()
    kb = distill_tree(tree, TEMPLATES, backend)
    seq = {d.path: d.seq for d in kb.docs.values()}
    assert seq["d/x.m"] < seq["d"] and seq["d"] < seq["."] and seq["y.m"] < seq["."]
    calls = backend.calls
    assert calls.index("d/x.m") < calls.index("d") < calls.index(".")
    assert calls.index("y.m") < calls.index(".")


@pytest.mark.parametrize("workers", [1, 4])
def test_random_trees_bottom_up(tmp_path, workers):
    rng = random.Random(1234 + workers)
    for i in range(15):
        tree = scan(write_tree(tmp_path / f"t{i}", random_tree_spec(rng, 80)))
        backend = Recorder()
        kb = distill_tree(tree, TEMPLATES, backend, workers=workers)
        order = {p: n for n, p in enumerate(backend.calls)}
        assert set(kb.docs) == set(tree.nodes)
        for node in tree.nodes.values():
            for c in node.children:
                assert kb.docs[node.id].seq > kb.docs[c].seq
                assert order[node.path] > order[tree[c].path]


def test_rerun_is_identical_and_persisted(tmp_path, fixture_repo):
    tree = scan(fixture_repo)
    a = distill_tree(tree, TEMPLATES, ScriptedBackend(), workers=3, store=KnowledgeStore(tmp_path / "a"))
    b = distill_tree(tree, TEMPLATES, ScriptedBackend(), store=KnowledgeStore(tmp_path / "b"))
    assert a == b
    files = lambda root: {p.relative_to(root): p.read_bytes() for p in root.rglob("*") if p.is_file()}
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert KnowledgeBase.load(tmp_path / "a") == a
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [e["path"] for e in manifest["docs"]][-1] == "."
    assert {e["file"] for e in manifest["docs"]} >= {"aero/AeroMapCompare.m.md", "aero/__folder__.md", "__folder__.md"}
    assert not (tmp_path / "a" / ".resume.json").exists()


def test_abort_then_resume_matches_uninterrupted(tmp_path, fixture_repo):
    tree = scan(fixture_repo)
    clean = distill_tree(tree, TEMPLATES, ScriptedBackend(), store=KnowledgeStore(tmp_path / "clean"))

    store = KnowledgeStore(tmp_path / "resumed")
    with pytest.raises(BackendError):
        distill_tree(tree, TEMPLATES, Recorder(fail_after=6), store=store)
    marker = json.loads((tmp_path / "resumed" / ".resume.json").read_text())
    # 4 deepest files, then Read_TIR_2CompTire_Func.m and aero before the injected failure
    assert [e["path"] for e in marker["completed"]][4:] == ["Read_TIR_2CompTire_Func.m", "aero"]
    assert not (tmp_path / "resumed" / "manifest.json").exists()

    second = Recorder()
    resumed = distill_tree(tree, TEMPLATES, second, store=store)
    assert second.calls == ["thermal", "."]
    assert resumed == clean
    files = lambda root: {p.relative_to(root): p.read_bytes() for p in root.rglob("*") if p.is_file()}
    assert files(tmp_path / "resumed") == files(tmp_path / "clean")


def test_resume_marker_for_other_tree_is_ignored(tmp_path, fixture_repo):
    store = KnowledgeStore(tmp_path / "kb")
    (tmp_path / "kb" / ".resume.json").write_text(json.dumps({"tree_fingerprint": "other", "completed": []}))
    backend = Recorder()
    distill_tree(scan(fixture_repo), TEMPLATES, backend, store=store)
    assert len(backend.calls) == 8
