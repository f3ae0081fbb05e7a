import json
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphvqa import ingest
from graphvqa.ingest import IngestError, Manifest, ObjectNode, ParsedQuestion

MANIFEST = Manifest(("human", "animal"), ("boy", "dog", "tree"), ("happy", "plain"))


def obj(type_="dog", x=0.5, y=0.5, plane=0, category=None, expression="plain", pose=None):
    category = category or ("human" if type_ == "boy" else "animal")
    return {"category": category, "type": type_, "expression": expression, "x": x, "y": y,
            "plane": plane, "pose": pose if pose is not None else [0.0] * 10}


def write_scenes(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


QUESTION_TEXT = """\
# qid = q1 | answer_counts = {yes: 7, no: 3} | pair = p1 | choices = [yes, no] | scene = s1
1\tis\t0\troot
2\tthere\t1\texpl
3\tdog\t1\tnsubj

# qid = q2 | answer_counts = {Red : 10} | pair = - | choices = -
1\twhat\t0\troot
2\tcolor\t1\tnsubj
"""


# ---------------------------------------------------------------- scenes

def test_two_object_scene(tmp_path):
    p = write_scenes(tmp_path / "s.jsonl", [{"scene_id": "s1", "objects": [obj("dog"), obj("boy", 0.1)]}])
    (scene,) = ingest.load_scene_file(p, MANIFEST)
    assert scene.n_nodes == 2
    recv, send, feats = scene.edge_list()
    assert len(recv) == 2 and feats.shape == (2, ingest.EDGE_DIM)
    assert not np.any(recv == send)
    assert scene.node_features.shape == (2, MANIFEST.node_dim)


def test_empty_scene_rejected(tmp_path):
    p = write_scenes(tmp_path / "s.jsonl", [{"scene_id": "s0", "objects": []}])
    with pytest.raises(IngestError, match="empty scene"):
        ingest.load_scene_file(p, MANIFEST)


def test_unknown_type_names_record(tmp_path):
    p = write_scenes(tmp_path / "s.jsonl", [{"scene_id": "bad-one", "objects": [obj("unicorn")]}])
    with pytest.raises(IngestError, match="bad-one.*unicorn"):
        ingest.load_scene_file(p, MANIFEST)


def test_wrong_pose_count(tmp_path):
    p = write_scenes(tmp_path / "s.jsonl", [{"scene_id": "s", "objects": [obj(pose=[0.0] * 9)]}])
    with pytest.raises(IngestError, match="pose"):
        ingest.load_scene_file(p, MANIFEST)


def test_feature_layout_and_one_hot_blocks():
    o = ObjectNode("human", "boy", "happy", 0.1, 0.2, 1, tuple(float(k) for k in range(10)))
    f = ingest.object_features(o, MANIFEST)
    np.testing.assert_array_equal(f[:2], [1, 0])
    np.testing.assert_array_equal(f[2:5], [1, 0, 0])
    np.testing.assert_array_equal(f[5:7], [1, 0])
    np.testing.assert_array_equal(f[7:], np.arange(10.0))


def test_full_size_manifest_gives_159_dims(tmp_path):
    # 4 categories + 100 types + 45 expressions + 10 pose scalars = 159
    m = Manifest(("human", "animal", "small", "large"), tuple(f"t{k}" for k in range(100)),
                 tuple(f"e{k}" for k in range(45)))
    p = write_scenes(tmp_path / "s.jsonl", [{"scene_id": "s", "objects": [
        obj("t3", category="animal", expression="e7"), obj("t9", category="large", expression="e0")]}])
    (scene,) = ingest.load_scene_file(p, m)
    assert scene.node_features.shape == (2, 159)


def test_edge_features_example():
    i = ObjectNode("animal", "dog", "plain", 0.2, 0.5, 0)
    j = ObjectNode("animal", "dog", "plain", 0.6, 0.5, 1)
    e = ingest.build_scene_edges([i, j])
    np.testing.assert_allclose(e[0, 1], [0.4, 0.0, 2.5, 100.0, 1.0])
    # j sees i on a farther plane
    assert e[1, 0, 4] == -1.0


def test_edge_features_clamp_and_antisymmetry():
    rng = np.random.default_rng(0)
    objs = [ObjectNode("animal", "dog", "plain", float(x), float(y), int(p))
            for x, y, p in zip(rng.random(5), rng.random(5), rng.integers(0, 3, 5))]
    objs.append(ObjectNode("animal", "dog", "plain", objs[0].x, objs[0].y, objs[0].plane))
    e = ingest.build_scene_edges(objs)
    np.testing.assert_array_equal(e[:, :, :2], -np.transpose(e, (1, 0, 2))[:, :, :2])
    np.testing.assert_array_equal(e[0, 5], [0.0, 0.0, 100.0, 100.0, -1.0])
    assert np.all(e[:, :, 2:4] <= 100.0)


def test_scene_round_trip(tmp_path):
    recs = [{"scene_id": "a", "objects": [obj("dog", 0.25, 0.75, 2), obj("boy", 0.5, 0.125, 0,
                                                                   expression="happy", pose=[0.5] * 10)]},
            {"scene_id": "b", "objects": [obj("tree", 0.0, 1.0)]}]
    first = ingest.load_scene_file(write_scenes(tmp_path / "a.jsonl", recs), MANIFEST)
    ingest.write_scene_file(tmp_path / "b.jsonl", first)
    second = ingest.load_scene_file(tmp_path / "b.jsonl", MANIFEST)
    for s1, s2 in zip(first, second):
        assert s1.scene_id == s2.scene_id and s1.objects == s2.objects
        np.testing.assert_array_equal(s1.node_features, s2.node_features)
        np.testing.assert_array_equal(s1.edge_features, s2.edge_features)


def test_manifest_scaling(tmp_path):
    m = Manifest(MANIFEST.categories, MANIFEST.types, MANIFEST.expressions, width=500.0, height=400.0)
    p = write_scenes(tmp_path / "s.jsonl", [{"scene_id": "s", "objects": [obj(x=100, y=200), obj(x=300, y=200)]}])
    (scene,) = ingest.load_scene_file(p, m)
    assert scene.objects[0].x == pytest.approx(0.2)
    assert scene.edge_features[0, 1, 0] == pytest.approx(0.4)


# ---------------------------------------------------------------- questions

def test_read_question_file(tmp_path):
    p = tmp_path / "q.conllu"
    p.write_text(QUESTION_TEXT)
    q1, q2 = ingest.read_question_file(p)
    assert q1.qid == "q1" and q1.words == ["is", "there", "dog"]
    assert q1.answer_counts == {"yes": 7, "no": 3}
    assert q1.pair_id == "p1" and q1.choices == ["yes", "no"] and q1.scene_id == "s1"
    assert q2.answer_counts == {"red": 10} and q2.pair_id is None and q2.choices is None
    assert q1.dependency_edges() == [(0, 1, "expl"), (0, 2, "nsubj")]


def test_three_tokens_two_deps_symmetrized(tmp_path):
    p = tmp_path / "q.conllu"
    p.write_text(QUESTION_TEXT)
    parsed = ingest.read_question_file(p)
    vocab = ingest.VocabSet.build(parsed, answer_min_count=1)
    g = ingest.question_graph(parsed[0], vocab)
    assert g.n_nodes == 3 and len(g.edges) == 4
    pairs = {(i, j) for i, j, _ in g.edges}
    assert all((j, i) in pairs for i, j in pairs)
    assert not any(i == j for i, j, _ in g.edges)


def test_reverse_labels_are_distinct(tmp_path):
    p = tmp_path / "q.conllu"
    p.write_text(QUESTION_TEXT)
    vocab = ingest.VocabSet.build(ingest.read_question_file(p), 1)
    assert vocab.deps["nsubj"] != vocab.deps["nsubj" + ingest.REV_SUFFIX]
    g = ingest.question_graph(ingest.read_question_file(p)[0], vocab)
    by_pair = {(i, j): t for i, j, t in g.edges}
    for (i, j), t in by_pair.items():
        name = next(k for k, v in vocab.deps.items() if v == t)
        back = next(k for k, v in vocab.deps.items() if v == by_pair[(j, i)])
        assert back in (name + ingest.REV_SUFFIX, name[: -len(ingest.REV_SUFFIX)])


def test_unknown_word_maps_to_unk(tmp_path):
    p = tmp_path / "q.conllu"
    p.write_text(QUESTION_TEXT)
    vocab = ingest.VocabSet.build(ingest.read_question_file(p), 1)
    q = ParsedQuestion("x", ["is", "xyzzy"], [0, 1], ["root", "dep"])
    g = ingest.question_graph(q, vocab)
    assert g.tokens[1] == 0 and vocab.words[ingest.UNK] == 0
    assert g.edges[0, 2] == ingest.DEP_UNK_ID


@pytest.mark.parametrize("row, msg", [
    ("1\tis\tx\troot", "non-integer"),
    ("1\tis\t0", "4 tab-separated"),
])
def test_malformed_rows_report_line(tmp_path, row, msg):
    p = tmp_path / "q.conllu"
    p.write_text("# qid = a | answer_counts = {yes: 10}\n" + row + "\n")
    with pytest.raises(IngestError, match=rf"q.conllu:2: .*{msg}"):
        ingest.read_question_file(p)


def test_duplicate_qid_rejected(tmp_path):
    p = tmp_path / "q.conllu"
    p.write_text("# qid = a\n1\tis\t0\troot\n\n# qid = a\n1\tis\t0\troot\n")
    with pytest.raises(IngestError, match="duplicate"):
        ingest.read_question_file(p)


def test_question_round_trip(tmp_path):
    p = tmp_path / "q.conllu"
    p.write_text(QUESTION_TEXT)
    first = ingest.read_question_file(p)
    ingest.write_question_file(tmp_path / "r.conllu", first)
    second = ingest.read_question_file(tmp_path / "r.conllu")
    assert first == second
    vocab = ingest.VocabSet.build(first, 1)
    for a, b in zip(first, second):
        ga, gb = ingest.question_graph(a, vocab), ingest.question_graph(b, vocab)
        np.testing.assert_array_equal(ga.tokens, gb.tokens)
        np.testing.assert_array_equal(ga.edges, gb.edges)


def test_sequential_edges_chain():
    e = ingest.sequential_edges(4)
    assert len(e) == 6
    assert set(e[:, 2]) == {ingest.DEP_NEXT_ID, ingest.DEP_PREV_ID}
    assert ingest.sequential_edges(1).shape == (0, 3)


# ---------------------------------------------------------------- vocabularies

def test_answer_vocab_counting():
    vocab, cov = ingest.build_answer_vocab(["a"] * 6 + ["b"] * 5 + ["c"] * 4, 5)
    assert vocab == {"a": 0, "b": 1}
    assert cov == pytest.approx(11 / 15)
    _, cov1 = ingest.build_answer_vocab(["a"] * 6 + ["b"] * 5 + ["c"] * 4, 1)
    assert cov1 == 1.0


def test_modal_answer_ties_lexicographic():
    assert ingest.modal_answer({"b": 5, "a": 5}) == "a"
    assert ingest.modal_answer({"b": 6, "a": 4}) == "b"


def _random_questions(seed):
    rng = random.Random(seed)
    words = ["is", "there", "a", "dog", "cat", "red", "the"]
    labels = ["det", "nsubj", "amod", "expl"]
    out = []
    for k in range(12):
        n = rng.randint(1, 5)
        heads = [0] + [rng.randint(1, i) for i in range(1, n)]
        out.append(ParsedQuestion(f"q{k}", [rng.choice(words) for _ in range(n)], heads,
                                  ["root"] + [rng.choice(labels) for _ in range(n - 1)],
                                  {rng.choice(["yes", "no", "2"]): 10}))
    return out


@given(st.integers(0, 10_000), st.randoms())
@settings(max_examples=30, deadline=None)
def test_vocab_is_order_independent(seed, shuffler):
    qs = _random_questions(seed)
    shuffled = list(qs)
    shuffler.shuffle(shuffled)
    a, b = ingest.VocabSet.build(qs, 2), ingest.VocabSet.build(shuffled, 2)
    assert a.to_dict() == b.to_dict()
    assert a.hashes() == b.hashes()


# ---------------------------------------------------------------- embeddings

def test_pretrained_embeddings(tmp_path):
    words = {ingest.UNK: 0, "dog": 1, "cat": 2, "owl": 3}
    p = tmp_path / "emb.txt"
    p.write_text("dog 0.5 -1.0 2.0\nzebra 1 1 1\ncat 0.0 0.25 3.5\n")
    table, coverage = ingest.load_pretrained_embeddings(p, words, 3, np.random.default_rng(1))
    np.testing.assert_array_equal(table[1], [0.5, -1.0, 2.0])
    np.testing.assert_array_equal(table[2], [0.0, 0.25, 3.5])
    assert coverage == 2
    bound = ingest.glorot_bound((4, 3))
    assert np.all(np.abs(table[[0, 3]]) <= bound)


def test_embedding_dimension_mismatch(tmp_path):
    p = tmp_path / "emb.txt"
    p.write_text("dog 1 2 3\ncat 1 2\n")
    with pytest.raises(IngestError, match="emb.txt:2"):
        ingest.load_pretrained_embeddings(p, {ingest.UNK: 0, "dog": 1}, 3)


# ---------------------------------------------------------------- normalization

def _random_scenes(seed, n=6):
    rng = np.random.default_rng(seed)
    scenes = []
    for k in range(n):
        objs = tuple(ObjectNode("animal", str(rng.choice(["dog", "tree"])), "plain",
                                float(rng.random()), float(rng.random()), int(rng.integers(3)),
                                tuple(rng.normal(size=10).tolist()))
                     for _ in range(int(rng.integers(2, 5))))
        feats = np.stack([ingest.object_features(o, MANIFEST) for o in objs])
        scenes.append(ingest.SceneGraph(f"s{k}", objs, feats, ingest.build_scene_edges(objs)))
    return scenes


def test_normalized_training_features_have_zero_mean_unit_variance():
    scenes = _random_scenes(0)
    stats = ingest.fit_norm_stats(scenes)
    normed = [ingest.apply_norm(s, stats) for s in scenes]
    nodes = np.concatenate([s.node_features for s in normed])
    edges = np.concatenate([s.edge_list()[2] for s in normed])
    for block, raw_std in ((nodes, stats.node_std), (edges, stats.edge_std)):
        live = raw_std > ingest.STD_FLOOR
        np.testing.assert_allclose(block.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(block.var(axis=0)[live], 1.0, atol=1e-6)


def test_constant_dimension_is_clamped():
    scenes = _random_scenes(1)
    stats = ingest.fit_norm_stats(scenes)
    # the "human" one-hot column never fires
    assert stats.node_std[0] == ingest.STD_FLOOR
    normed = ingest.apply_norm(scenes[0], stats)
    np.testing.assert_array_equal(normed.node_features[:, 0], 0.0)


def test_single_scene_normalizes_to_zero():
    objs = (ObjectNode("animal", "dog", "plain", 0.1, 0.2, 0),)
    feats = ingest.object_features(objs[0], MANIFEST)[None]
    s = ingest.SceneGraph("s", objs, feats, ingest.build_scene_edges(objs))
    out = ingest.apply_norm(s, ingest.fit_norm_stats([s]))
    np.testing.assert_array_equal(out.node_features, 0.0)


def test_norm_is_invertible():
    scenes = _random_scenes(2)
    stats = ingest.fit_norm_stats(scenes)
    for s in scenes:
        back = ingest.invert_norm(ingest.apply_norm(s, stats), stats)
        np.testing.assert_allclose(back.node_features, s.node_features, atol=1e-9)
        np.testing.assert_allclose(back.edge_features, s.edge_features, atol=1e-9)


# ---------------------------------------------------------------- joining

def test_join_by_scene_id_and_position(tmp_path):
    scenes = ingest.load_scene_file(write_scenes(tmp_path / "s.jsonl", [
        {"scene_id": "s0", "objects": [obj("tree")]},
        {"scene_id": "s1", "objects": [obj("dog"), obj("boy")]}]), MANIFEST)
    p = tmp_path / "q.conllu"
    p.write_text(QUESTION_TEXT)
    parsed = ingest.read_question_file(p)
    insts = ingest.join_instances(scenes, parsed, ingest.VocabSet.build(parsed, 1))
    assert insts[0].scene.scene_id == "s1"   # explicit scene field
    assert insts[1].scene.scene_id == "s1"   # positional fallback
