"""Reading scenes, dependency-parsed questions and word embeddings.

File formats
------------
Scene file: JSON lines, one scene per line::

    {"scene_id": "s1", "objects": [{"category": "animal", "type": "dog",
      "expression": "plain", "x": 0.2, "y": 0.5, "plane": 0, "pose": [10 floats]}]}

Manifest: ``{"categories": [...], "types": [...], "expressions": [...]}``; the
list order fixes the one-hot order. Optional ``"width"``/``"height"`` rescale
positions into [0, 1].

Question file: a CoNLL-U subset. Each block starts with a comment::

    # qid = q1 | answer_counts = {yes: 10} | pair = p1 | choices = [yes, no] | scene = s1

followed by ``ID<TAB>FORM<TAB>HEAD<TAB>DEPREL`` rows. ``pair``/``choices``
may be ``-``; ``scene`` is optional and defaults to positional matching.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

N_POSE = 10
EDGE_DIM = 5
INV_DIST_CLAMP = 1e-2
STD_FLOOR = 1e-6

UNK = "<unk>"
DEP_UNK = "<unk>"
DEP_NEXT = "<next>"
REV_SUFFIX = "-rev"
# fixed dependency indices: unknown, sequential chain forward, chain backward
DEP_UNK_ID, DEP_NEXT_ID, DEP_PREV_ID = 0, 1, 2


class IngestError(ValueError):
    """Malformed input file or record."""


def normalize_answer(ans: str) -> str:
    return ans.strip().lower()


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class Manifest:
    categories: tuple[str, ...]
    types: tuple[str, ...]
    expressions: tuple[str, ...]
    width: float = 1.0
    height: float = 1.0

    @property
    def node_dim(self) -> int:
        return len(self.categories) + len(self.types) + len(self.expressions) + N_POSE

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        try:
            return cls(tuple(d["categories"]), tuple(d["types"]), tuple(d["expressions"]),
                       float(d.get("width", 1.0)), float(d.get("height", 1.0)))
        except KeyError as e:
            raise IngestError(f"manifest lacks {e.args[0]!r}") from None

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = {"categories": list(self.categories), "types": list(self.types),
             "expressions": list(self.expressions)}
        if self.width != 1.0 or self.height != 1.0:
            d.update(width=self.width, height=self.height)
        return d


@dataclass(frozen=True)
class ObjectNode:
    category: str
    type: str
    expression: str
    x: float
    y: float
    plane: int
    pose: tuple[float, ...] = (0.0,) * N_POSE

    def to_dict(self) -> dict:
        return {"category": self.category, "type": self.type, "expression": self.expression,
                "x": self.x, "y": self.y, "plane": self.plane, "pose": list(self.pose)}


@dataclass
class SceneGraph:
    """Fully connected scene graph.

    ``edge_features[i, j]`` describes object ``j`` as seen from ``i``; the
    diagonal is unused and kept at zero.
    """

    scene_id: str
    objects: tuple[ObjectNode, ...]
    node_features: np.ndarray
    edge_features: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_features)

    def edge_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(receivers, senders, features) over every ordered pair i != j."""
        n = self.n_nodes
        recv, send = np.nonzero(~np.eye(n, dtype=bool))
        return recv, send, self.edge_features[recv, send]

    def replace(self, node_features=None, edge_features=None) -> "SceneGraph":
        return SceneGraph(self.scene_id, self.objects,
                          self.node_features if node_features is None else node_features,
                          self.edge_features if edge_features is None else edge_features)


def object_features(obj: ObjectNode, manifest: Manifest, where: str = "") -> np.ndarray:
    """category | type | expression one-hots followed by the 10 pose scalars."""
    blocks = []
    for field_name, vocab in (("category", manifest.categories), ("type", manifest.types),
                              ("expression", manifest.expressions)):
        value = getattr(obj, field_name)
        try:
            k = vocab.index(value)
        except ValueError:
            raise IngestError(f"{where}: unknown {field_name} {value!r}") from None
        hot = np.zeros(len(vocab))
        hot[k] = 1.0
        blocks.append(hot)
    if len(obj.pose) != N_POSE:
        raise IngestError(f"{where}: expected {N_POSE} pose scalars, got {len(obj.pose)}")
    blocks.append(np.asarray(obj.pose, dtype=np.float64))
    return np.concatenate(blocks)


def build_scene_edges(objects: Sequence[ObjectNode], delta: float = INV_DIST_CLAMP) -> np.ndarray:
    """Dense (N, N, 5) spatial relation features.

    e_ij = [dx, dy, 1/max(|dx|, delta), 1/max(|dy|, delta), depth] with
    dx = x_j - x_i. depth is +1 when j sits on a closer (higher-numbered)
    plane than i, -1 otherwise.
    """
    n = len(objects)
    xs = np.array([o.x for o in objects], dtype=np.float64)
    ys = np.array([o.y for o in objects], dtype=np.float64)
    planes = np.array([o.plane for o in objects])
    dx = xs[None, :] - xs[:, None]
    dy = ys[None, :] - ys[:, None]
    e = np.stack([
        dx, dy,
        1.0 / np.maximum(np.abs(dx), delta),
        1.0 / np.maximum(np.abs(dy), delta),
        np.where(planes[None, :] > planes[:, None], 1.0, -1.0),
    ], axis=-1)
    e[np.arange(n), np.arange(n)] = 0.0
    return e


def parse_object(d: dict, manifest: Manifest, where: str) -> ObjectNode:
    try:
        pose = tuple(float(v) for v in d.get("pose", [0.0] * N_POSE))
        return ObjectNode(d["category"], d["type"], d["expression"],
                          float(d["x"]) / manifest.width, float(d["y"]) / manifest.height,
                          int(d["plane"]), pose)
    except KeyError as e:
        raise IngestError(f"{where}: object lacks {e.args[0]!r}") from None


def scene_from_record(rec: dict, manifest: Manifest, where: str = "") -> SceneGraph:
    sid = str(rec.get("scene_id", where))
    where = f"scene {sid!r}" + (f" ({where})" if where else "")
    objs = rec.get("objects") or []
    if not objs:
        raise IngestError(f"{where}: empty scene")
    objects = tuple(parse_object(o, manifest, where) for o in objs)
    feats = np.stack([object_features(o, manifest, where) for o in objects])
    return SceneGraph(sid, objects, feats, build_scene_edges(objects))


def load_scene_file(path, manifest: Manifest) -> list[SceneGraph]:
    scenes = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            scenes.append(scene_from_record(rec, manifest, f"{path}:{lineno}"))
    return scenes


def scene_to_record(scene: SceneGraph, manifest: Optional[Manifest] = None) -> dict:
    w, h = (manifest.width, manifest.height) if manifest else (1.0, 1.0)
    objs = []
    for o in scene.objects:
        d = o.to_dict()
        d["x"], d["y"] = o.x * w, o.y * h
        objs.append(d)
    return {"scene_id": scene.scene_id, "objects": objs}


def write_scene_file(path, scenes: Iterable, manifest: Optional[Manifest] = None) -> None:
    """Write SceneGraphs (or raw scene dicts) as JSON lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in scenes:
            rec = scene_to_record(s, manifest) if isinstance(s, SceneGraph) else s
            f.write(json.dumps(rec, separators=(", ", ": ")) + "\n")


# ---------------------------------------------------------------- questions

@dataclass
class ParsedQuestion:
    """One sentence block of a question file, before vocabulary mapping."""

    qid: str
    words: list[str]
    heads: list[int]
    labels: list[str]
    answer_counts: dict[str, int] = field(default_factory=dict)
    pair_id: Optional[str] = None
    choices: Optional[list[str]] = None
    scene_id: Optional[str] = None

    def dependency_edges(self) -> list[tuple[int, int, str]]:
        """Zero-based (head, dependent, label); the root row contributes none."""
        return [(h - 1, i, lab) for i, (h, lab) in enumerate(zip(self.heads, self.labels)) if h > 0]


@dataclass
class QuestionGraph:
    """Token ids plus symmetrized typed edges.

    Each edge row ``(i, j, t)`` means node ``i`` pools node ``j`` through
    dependency embedding ``t``.
    """

    qid: str
    tokens: np.ndarray
    edges: np.ndarray
    words: tuple[str, ...] = ()

    @property
    def n_nodes(self) -> int:
        return len(self.tokens)


def _parse_counts(text: str, where: str) -> dict[str, int]:
    text = text.strip()
    if not (text.startswith("{") and text.endswith("}")):
        raise IngestError(f"{where}: answer_counts must be {{...}}")
    counts: dict[str, int] = {}
    body = text[1:-1].strip()
    if not body:
        return counts
    for item in body.split(","):
        ans, sep, n = item.rpartition(":")
        if not sep:
            raise IngestError(f"{where}: bad answer count {item.strip()!r}")
        try:
            counts[normalize_answer(ans)] = counts.get(normalize_answer(ans), 0) + int(n)
        except ValueError:
            raise IngestError(f"{where}: bad answer count {item.strip()!r}") from None
    return counts


def _parse_header(line: str, where: str) -> dict:
    fields = {}
    for part in line.lstrip("#").split("|"):
        key, sep, value = part.partition("=")
        if sep:
            fields[key.strip()] = value.strip()
    if "qid" not in fields:
        raise IngestError(f"{where}: comment line lacks qid")
    out = {"qid": fields["qid"]}
    if "answer_counts" in fields:
        out["answer_counts"] = _parse_counts(fields["answer_counts"], where)
    pair = fields.get("pair", "-")
    out["pair_id"] = None if pair in ("", "-") else pair
    choices = fields.get("choices", "-")
    if choices not in ("", "-"):
        if not (choices.startswith("[") and choices.endswith("]")):
            raise IngestError(f"{where}: choices must be [...]")
        out["choices"] = [normalize_answer(c) for c in choices[1:-1].split(",") if c.strip()]
    scene = fields.get("scene", "-")
    out["scene_id"] = None if scene in ("", "-") else scene
    return out


def read_question_file(path) -> list[ParsedQuestion]:
    """Parse the CoNLL-U subset into raw ParsedQuestion blocks."""
    out: list[ParsedQuestion] = []
    seen: set[str] = set()
    cur: Optional[ParsedQuestion] = None

    def close(lineno):
        nonlocal cur
        if cur is not None:
            if not cur.words:
                raise IngestError(f"{path}:{lineno}: question {cur.qid!r} has no tokens")
            out.append(cur)
            cur = None

    with open(path, encoding="utf-8") as f:
        lineno = 0
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                close(lineno)
                continue
            where = f"{path}:{lineno}"
            if line.startswith("#"):
                if "qid" not in line:
                    continue
                close(lineno)
                meta = _parse_header(line, where)
                if meta["qid"] in seen:
                    raise IngestError(f"{where}: duplicate qid {meta['qid']!r}")
                seen.add(meta["qid"])
                cur = ParsedQuestion(words=[], heads=[], labels=[], **meta)
                continue
            if cur is None:
                raise IngestError(f"{where}: token row before any '# qid = ...' comment")
            cols = line.split("\t")
            if len(cols) < 4:
                raise IngestError(f"{where}: expected 4 tab-separated columns, got {len(cols)}")
            try:
                tok_id, head = int(cols[0]), int(cols[2])
            except ValueError:
                raise IngestError(f"{where}: non-integer ID or HEAD") from None
            if tok_id != len(cur.words) + 1:
                raise IngestError(f"{where}: token ID {tok_id} out of sequence")
            cur.words.append(cols[1])
            cur.heads.append(head)
            cur.labels.append(cols[3])
        close(lineno)
    for q in out:
        n = len(q.words)
        for k, h in enumerate(q.heads):
            if not 0 <= h <= n or h == k + 1:
                raise IngestError(f"{path}: question {q.qid!r} token {k + 1} has invalid HEAD {h}")
    return out


def _fmt_counts(counts: dict[str, int]) -> str:
    return "{" + ", ".join(f"{a}: {n}" for a, n in counts.items()) + "}"


def write_question_file(path, questions: Iterable[ParsedQuestion]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for q in questions:
            parts = [f"qid = {q.qid}", f"answer_counts = {_fmt_counts(q.answer_counts)}",
                     f"pair = {q.pair_id or '-'}",
                     "choices = " + ("[" + ", ".join(q.choices) + "]" if q.choices else "-")]
            if q.scene_id is not None:
                parts.append(f"scene = {q.scene_id}")
            f.write("# " + " | ".join(parts) + "\n")
            for k, (w, h, lab) in enumerate(zip(q.words, q.heads, q.labels), 1):
                f.write(f"{k}\t{w}\t{h}\t{lab}\n")
            f.write("\n")


# ---------------------------------------------------------------- vocabularies

def modal_answer(counts: dict[str, int]) -> Optional[str]:
    """Most frequent answer; ties go to the lexicographically smallest."""
    if not counts:
        return None
    return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def build_answer_vocab(answers: Iterable[str], min_count: int = 5) -> tuple[dict[str, int], float]:
    """Answers seen at least ``min_count`` times, sorted; plus coverage fraction."""
    answers = list(answers)
    counts = Counter(answers)
    kept = sorted(a for a, n in counts.items() if n >= min_count)
    vocab = {a: i for i, a in enumerate(kept)}
    covered = sum(counts[a] for a in kept)
    return vocab, (covered / len(answers) if answers else 0.0)


def _digest(mapping: dict[str, int]) -> str:
    items = sorted(mapping.items(), key=lambda kv: kv[1])
    return hashlib.sha256(json.dumps(items).encode("utf-8")).hexdigest()[:16]


@dataclass
class VocabSet:
    words: dict[str, int]
    deps: dict[str, int]
    answers: dict[str, int]
    answer_coverage: float = 1.0

    @classmethod
    def build(cls, questions: Sequence[ParsedQuestion], answer_min_count: int = 5) -> "VocabSet":
        """Word, dependency and answer vocabularies from training questions."""
        words = sorted({w for q in questions for w in q.words} - {UNK})
        labels = sorted({lab for q in questions for (_, _, lab) in q.dependency_edges()})
        reserved = [DEP_UNK, DEP_NEXT, DEP_NEXT + REV_SUFFIX]
        deps = reserved + sorted({n for lab in labels for n in (lab, lab + REV_SUFFIX)} - set(reserved))
        modal = [modal_answer(q.answer_counts) for q in questions]
        answers, coverage = build_answer_vocab([a for a in modal if a is not None], answer_min_count)
        return cls({UNK: 0, **{w: i + 1 for i, w in enumerate(words)}},
                   {d: i for i, d in enumerate(deps)}, answers, coverage)

    @property
    def answer_list(self) -> list[str]:
        return sorted(self.answers, key=self.answers.get)

    def hashes(self) -> dict[str, str]:
        return {"words": _digest(self.words), "deps": _digest(self.deps),
                "answers": _digest(self.answers)}

    def to_dict(self) -> dict:
        return {"words": self.words, "deps": self.deps, "answers": self.answers,
                "answer_coverage": self.answer_coverage}

    @classmethod
    def from_dict(cls, d: dict) -> "VocabSet":
        return cls(dict(d["words"]), dict(d["deps"]), dict(d["answers"]),
                   float(d.get("answer_coverage", 1.0)))


def question_graph(q: ParsedQuestion, vocab: VocabSet) -> QuestionGraph:
    """Map words through the vocabulary and add the reverse of every edge."""
    tokens = np.array([vocab.words.get(w, 0) for w in q.words], dtype=np.int64)
    rows = []
    for head, dep, lab in q.dependency_edges():
        rows.append((head, dep, vocab.deps.get(lab, DEP_UNK_ID)))
        rows.append((dep, head, vocab.deps.get(lab + REV_SUFFIX, DEP_UNK_ID)))
    edges = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return QuestionGraph(q.qid, tokens, edges, tuple(q.words))


def sequential_edges(n_tokens: int) -> np.ndarray:
    """Previous/next chain over consecutive tokens, with the two reserved labels."""
    rows = []
    for i in range(n_tokens - 1):
        rows.append((i, i + 1, DEP_NEXT_ID))
        rows.append((i + 1, i, DEP_PREV_ID))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def load_question_file(path, vocab: VocabSet) -> list[QuestionGraph]:
    return [question_graph(q, vocab) for q in read_question_file(path)]


# ---------------------------------------------------------------- embeddings

def glorot_bound(shape: Sequence[int]) -> float:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    return math.sqrt(6.0 / (fan_in + fan_out))


def load_pretrained_embeddings(path, words: dict[str, int], dim: int,
                               rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, int]:
    """Embedding matrix for ``words`` plus the number of words found in ``path``.

    Rows missing from the file (and the UNK row) are drawn uniformly from the
    Glorot range of a (|vocab|, dim) matrix.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    shape = (len(words), dim)
    bound = glorot_bound(shape)
    table = rng.uniform(-bound, bound, size=shape)
    found = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or not parts[0]:
                continue
            if len(parts) - 1 != dim:
                raise IngestError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            k = words.get(parts[0])
            if k is None or k == 0:
                continue
            try:
                table[k] = [float(v) for v in parts[1:]]
            except ValueError:
                raise IngestError(f"{path}:{lineno}: non-numeric embedding value") from None
            found.add(k)
    return table, len(found)


# ---------------------------------------------------------------- normalization

@dataclass
class NormStats:
    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray


def fit_norm_stats(scenes: Sequence[SceneGraph]) -> NormStats:
    """Per-dimension mean/std of node and off-diagonal edge features."""
    nodes = np.concatenate([s.node_features for s in scenes])
    edges = [s.edge_list()[2] for s in scenes]
    edges = np.concatenate(edges) if edges else np.zeros((0, EDGE_DIM))
    if len(edges) == 0:
        edge_mean, edge_std = np.zeros(EDGE_DIM), np.ones(EDGE_DIM)
    else:
        edge_mean, edge_std = edges.mean(axis=0), np.maximum(edges.std(axis=0), STD_FLOOR)
    return NormStats(nodes.mean(axis=0), np.maximum(nodes.std(axis=0), STD_FLOOR),
                     edge_mean, edge_std)


def apply_norm(scene: SceneGraph, stats: NormStats) -> SceneGraph:
    nodes = (scene.node_features - stats.node_mean) / stats.node_std
    edges = (scene.edge_features - stats.edge_mean) / stats.edge_std
    n = scene.n_nodes
    edges[np.arange(n), np.arange(n)] = 0.0
    return scene.replace(nodes, edges)


def invert_norm(scene: SceneGraph, stats: NormStats) -> SceneGraph:
    nodes = scene.node_features * stats.node_std + stats.node_mean
    edges = scene.edge_features * stats.edge_std + stats.edge_mean
    n = scene.n_nodes
    edges[np.arange(n), np.arange(n)] = 0.0
    return scene.replace(nodes, edges)


# ---------------------------------------------------------------- instances

@dataclass
class QaInstance:
    qid: str
    scene: SceneGraph
    question: QuestionGraph
    answer_counts: dict[str, int]
    pair_id: Optional[str] = None
    choices: Optional[list[str]] = None


def join_instances(scenes: Sequence[SceneGraph], parsed: Sequence[ParsedQuestion],
                   vocab: VocabSet) -> list[QaInstance]:
    """Attach each question to its scene by ``scene`` id, else by position."""
    by_id = {s.scene_id: s for s in scenes}
    out = []
    for k, q in enumerate(parsed):
        if q.scene_id is not None:
            scene = by_id.get(q.scene_id)
            if scene is None:
                raise IngestError(f"question {q.qid!r} refers to unknown scene {q.scene_id!r}")
        else:
            if k >= len(scenes):
                raise IngestError(f"question {q.qid!r} has no scene at position {k}")
            scene = scenes[k]
        out.append(QaInstance(q.qid, scene, question_graph(q, vocab), dict(q.answer_counts),
                              q.pair_id, q.choices))
    return out


def load_split(scenes_path, questions_path, manifest: Manifest, vocab: Optional[VocabSet] = None,
               answer_min_count: int = 5):
    """Read one split; builds the vocabulary from it when none is given.

    Returns ``(instances, vocab, parsed_questions)``.
    """
    scenes = load_scene_file(scenes_path, manifest)
    parsed = read_question_file(questions_path)
    if vocab is None:
        vocab = VocabSet.build(parsed, answer_min_count)
    return join_instances(scenes, parsed, vocab), vocab, parsed


def normalize_instances(instances: Sequence[QaInstance], stats: NormStats) -> list[QaInstance]:
    cache: dict[int, SceneGraph] = {}
    out = []
    for inst in instances:
        key = id(inst.scene)
        if key not in cache:
            cache[key] = apply_norm(inst.scene, stats)
        out.append(QaInstance(inst.qid, cache[key], inst.question, inst.answer_counts,
                              inst.pair_id, inst.choices))
    return out
