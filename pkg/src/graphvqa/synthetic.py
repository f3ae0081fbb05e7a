"""Seeded generator of balanced complementary scene pairs with template questions.

Each pair shares one yes/no question; the two scenes differ by a single
edit (an object removed, swapped for another type, or moved) so that the
rule-evaluated answers are opposite. Output uses the regular ingest formats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ingest import Manifest, ObjectNode, ParsedQuestion, N_POSE, write_question_file, write_scene_file

INVENTORY = {
    "human": ("boy", "girl", "man", "woman", "baby"),
    "animal": ("dog", "cat", "bird", "duck", "owl"),
    "small object": ("ball", "book", "bottle", "cup", "hat"),
    "large object": ("tree", "table", "bench", "couch", "slide"),
}
HUMAN_EXPRESSIONS = ("happy", "sad", "angry", "surprised")
OBJECT_EXPRESSIONS = ("plain", "variant-a", "variant-b", "variant-c")

MANIFEST = Manifest(
    categories=tuple(INVENTORY),
    types=tuple(t for ts in INVENTORY.values() for t in ts),
    expressions=HUMAN_EXPRESSIONS + OBJECT_EXPRESSIONS,
)
CATEGORY_OF = {t: c for c, ts in INVENTORY.items() for t in ts}

BINARY_TEMPLATES = ("presence", "left_of")
ALL_TEMPLATES = ("presence", "count", "left_of", "nearest")

MIN_OBJECTS, MAX_OBJECTS = 3, 5
MIN_GAP = 0.08  # horizontal separation for left/right questions


@dataclass(frozen=True)
class QuestionSpec:
    template: str
    args: tuple[str, ...]

    def words(self) -> list[str]:
        return _SKELETONS[self.template](*self.args)[0]

    def parse(self) -> tuple[list[str], list[int], list[str]]:
        return _SKELETONS[self.template](*self.args)


# (words, heads, labels) per template; HEAD is 1-based, 0 marks the root
_SKELETONS = {
    "presence": lambda t: (["is", "there", "a", t], [0, 1, 4, 1], ["root", "expl", "det", "nsubj"]),
    "count": lambda t: (["how", "many", t, "are", "there"], [2, 3, 4, 0, 4],
                        ["advmod", "amod", "nsubj", "root", "expl"]),
    "left_of": lambda a, b: (["is", "the", a, "left", "of", "the", b], [0, 3, 1, 1, 7, 7, 4],
                             ["root", "det", "nsubj", "advmod", "case", "det", "nmod"]),
    "nearest": lambda t: (["what", "is", "nearest", "to", "the", t], [2, 0, 2, 6, 6, 3],
                          ["nsubj", "root", "advmod", "case", "det", "nmod"]),
}


def answer_oracle(objects: Sequence[ObjectNode], spec: QuestionSpec) -> str:
    """Ground-truth answer by direct rule evaluation over the objects."""
    if spec.template == "presence":
        (t,) = spec.args
        return "yes" if any(o.type == t for o in objects) else "no"
    if spec.template == "count":
        (t,) = spec.args
        return str(sum(o.type == t for o in objects))
    if spec.template == "left_of":
        a, b = spec.args
        xa = [o.x for o in objects if o.type == a]
        xb = [o.x for o in objects if o.type == b]
        if not xa or not xb:
            return "no"
        # strict comparison: equal x-coordinates answer "no"
        return "yes" if xa[0] < xb[0] else "no"
    if spec.template == "nearest":
        (t,) = spec.args
        ref = next((o for o in objects if o.type == t), None)
        if ref is None:
            return "none"
        others = [o for o in objects if o is not ref]
        if not others:
            return "none"
        best = min(others, key=lambda o: math.hypot(o.x - ref.x, o.y - ref.y))
        return best.type
    raise ValueError(f"unknown question template {spec.template!r}")


@dataclass
class BalancedPair:
    pair_id: str
    scene_a: tuple[ObjectNode, ...]
    scene_b: tuple[ObjectNode, ...]
    question: QuestionSpec
    answer_a: str
    answer_b: str
    edit: str


def _coord(rng) -> float:
    return round(float(rng.uniform(0.05, 0.95)), 4)


def _appearances() -> dict[str, tuple[str, tuple[float, ...]]]:
    # one fixed look per type: per-object random poses only add noise to memorise
    rng = np.random.default_rng(20170101)
    out = {}
    for t in MANIFEST.types:
        if CATEGORY_OF[t] == "human":
            expr = HUMAN_EXPRESSIONS[rng.integers(len(HUMAN_EXPRESSIONS))]
            pose = tuple(round(float(v), 4) for v in rng.uniform(-1.0, 1.0, N_POSE))
        else:
            expr = OBJECT_EXPRESSIONS[rng.integers(len(OBJECT_EXPRESSIONS))]
            pose = (0.0,) * N_POSE
        out[t] = (expr, pose)
    return out


APPEARANCE = _appearances()


def _make_object(rng, type_: str, x: Optional[float] = None) -> ObjectNode:
    expr, pose = APPEARANCE[type_]
    return ObjectNode(CATEGORY_OF[type_], type_, expr, _coord(rng) if x is None else x, _coord(rng),
                      int(rng.integers(3)), pose)


def _base_scene(rng, n: int, must_have: Sequence[str] = (), exclude: Sequence[str] = ()) -> list[ObjectNode]:
    pool = [t for t in MANIFEST.types if t not in must_have and t not in exclude]
    extra = rng.choice(pool, size=n - len(must_have), replace=False).tolist()
    types = list(must_have) + extra
    rng.shuffle(types)
    return [_make_object(rng, t) for t in types]


def _presence_pair(rng):
    n = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    target = MANIFEST.types[rng.integers(len(MANIFEST.types))]
    with_t = _base_scene(rng, n, must_have=[target])
    k = next(i for i, o in enumerate(with_t) if o.type == target)
    if rng.random() < 0.5:
        without = with_t[:k] + with_t[k + 1:]
        edit = "remove"
    else:
        present = {o.type for o in with_t}
        repl = [t for t in MANIFEST.types if t not in present]
        t2 = repl[rng.integers(len(repl))]
        old = with_t[k]
        swapped = _make_object(rng, t2)
        swapped = ObjectNode(swapped.category, t2, swapped.expression, old.x, old.y, old.plane, swapped.pose)
        without = with_t[:k] + [swapped] + with_t[k + 1:]
        edit = "swap"
    return QuestionSpec("presence", (target,)), with_t, without, edit


def _left_of_pair(rng):
    n = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    a, b = rng.choice(MANIFEST.types, size=2, replace=False).tolist()
    objs = _base_scene(rng, n, must_have=[a, b])
    ia = next(i for i, o in enumerate(objs) if o.type == a)
    ib = next(i for i, o in enumerate(objs) if o.type == b)
    # b sits inside the frame with room on both sides, a to its left
    xb = round(float(rng.uniform(0.15 + MIN_GAP, 0.85 - MIN_GAP)), 4)
    xa_left = round(float(rng.uniform(0.05, xb - MIN_GAP)), 4)
    xa_right = round(float(rng.uniform(xb + MIN_GAP, 0.95)), 4)
    ob = objs[ib]
    objs[ib] = ObjectNode(ob.category, ob.type, ob.expression, xb, ob.y, ob.plane, ob.pose)
    oa = objs[ia]
    left = list(objs)
    left[ia] = ObjectNode(oa.category, oa.type, oa.expression, xa_left, oa.y, oa.plane, oa.pose)
    right = list(objs)
    right[ia] = ObjectNode(oa.category, oa.type, oa.expression, xa_right, oa.y, oa.plane, oa.pose)
    return QuestionSpec("left_of", (a, b)), left, right, "move"


_PAIR_MAKERS = {"presence": _presence_pair, "left_of": _left_of_pair}


def generate_pairs(seed: int, n_pairs: int, templates: Sequence[str] = BINARY_TEMPLATES,
                   prefix: str = "") -> list[BalancedPair]:
    """``n_pairs`` complementary pairs, one derived RNG per pair."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    for t in templates:
        if t not in _PAIR_MAKERS:
            raise ValueError(f"template {t!r} cannot produce balanced yes/no pairs")
    pairs = []
    for k in range(n_pairs):
        rng = np.random.default_rng([seed, k])
        # cycle templates so the mix is exact
        template = templates[k % len(templates)]
        spec, yes_scene, no_scene, edit = _PAIR_MAKERS[template](rng)
        if rng.random() < 0.5:
            sa, sb = yes_scene, no_scene
        else:
            sa, sb = no_scene, yes_scene
        sa, sb = tuple(sa), tuple(sb)
        pairs.append(BalancedPair(f"{prefix}p{k:05d}", sa, sb, spec,
                                  answer_oracle(sa, spec), answer_oracle(sb, spec), edit))
    return pairs


def annotator_counts(answer: str, rng, disagreement_rate: float = 0.0) -> dict[str, int]:
    """Ten simulated yes/no annotators, each flipping with probability ``disagreement_rate``."""
    other = "no" if answer == "yes" else "yes"
    flips = int((rng.random(10) < disagreement_rate).sum()) if disagreement_rate > 0 else 0
    counts = {answer: 10 - flips}
    if flips:
        counts[other] = flips
    return {a: n for a, n in counts.items() if n}


def generate_dataset(seed: int, n_pairs: int, out_dir, split: str = "train",
                     disagreement_rate: float = 0.0,
                     templates: Sequence[str] = BINARY_TEMPLATES) -> dict[str, Path]:
    """Write ``{split}_scenes.jsonl``, ``{split}_questions.conllu`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = generate_pairs(seed, n_pairs, templates, prefix=f"{split}-")
    scenes, questions = [], []
    for k, p in enumerate(pairs):
        rng = np.random.default_rng([seed, k, 1])
        words, heads, labels = p.question.parse()
        for tag, objs, ans in (("a", p.scene_a, p.answer_a), ("b", p.scene_b, p.answer_b)):
            sid = f"{p.pair_id}{tag}-s"
            scenes.append({"scene_id": sid, "objects": [o.to_dict() for o in objs]})
            questions.append(ParsedQuestion(
                f"{p.pair_id}{tag}", list(words), list(heads), list(labels),
                annotator_counts(ans, rng, disagreement_rate), p.pair_id, ["yes", "no"], sid))
    paths = {
        "manifest": out / "manifest.json",
        "scenes": out / f"{split}_scenes.jsonl",
        "questions": out / f"{split}_questions.conllu",
    }
    with open(paths["manifest"], "w", encoding="utf-8", newline="\n") as f:
        json.dump(MANIFEST.to_dict(), f, indent=1)
        f.write("\n")
    write_scene_file(paths["scenes"], scenes)
    write_question_file(paths["questions"], questions)
    return paths
