"""VQA metrics: soft ground-truth scores, accuracy, pairs accuracy, precision/recall."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .ingest import normalize_answer

N_ANNOTATORS = 10


def _check_counts(counts: Mapping[str, int]) -> None:
    total = sum(counts.values())
    if total != N_ANNOTATORS:
        raise ValueError(f"annotator counts sum to {total}, expected {N_ANNOTATORS}")


def vqa_score(counts: Mapping[str, int], answer: str) -> float:
    """Soft score of ``answer``: min(m/3, 1) averaged over the 10 leave-one-out subsets.

    Of the 10 subsets, ``m`` drop an annotator who gave ``answer`` (leaving
    m - 1) and ``10 - m`` keep all ``m``.
    """
    _check_counts(counts)
    m = counts.get(normalize_answer(answer), 0)
    return (m * min((m - 1) / 3.0, 1.0) + (N_ANNOTATORS - m) * min(m / 3.0, 1.0)) / N_ANNOTATORS if m else 0.0


def hard_score(counts: Mapping[str, int], answer: str) -> int:
    """1 when every leave-one-out subset keeps >= 3 votes for ``answer``, else 0."""
    return int(vqa_score(counts, answer) >= 1.0)


def is_ambiguous(counts: Mapping[str, int]) -> bool:
    return not any(hard_score(counts, a) for a in counts)


def target_scores(counts: Mapping[str, int], answers: Mapping[str, int]) -> np.ndarray:
    """Soft score for every answer in the vocabulary, by vocabulary index."""
    out = np.zeros(len(answers))
    for a, k in answers.items():
        out[k] = vqa_score(counts, a)
    return out


def predicted_answer(scores: np.ndarray, answer_list: Sequence[str],
                     choices: Optional[Sequence[str]] = None) -> tuple[str, float]:
    """Argmax answer (lowest index on ties); restricted to ``choices`` when given.

    Candidates outside the vocabulary score -inf.
    """
    if choices is None:
        k = int(np.argmax(scores))
        return answer_list[k], float(scores[k])
    index = {a: k for k, a in enumerate(answer_list)}
    best, best_key = None, None
    for c in choices:
        c = normalize_answer(c)
        k = index.get(c)
        s = float(scores[k]) if k is not None else -math.inf
        key = (-s, k if k is not None else math.inf)
        if best_key is None or key < best_key:
            best, best_key = (c, s), key
    if best is None:
        raise ValueError("empty multiple-choice candidate list")
    return best


def accuracy(predictions: Mapping[str, np.ndarray], ground_truths: Mapping[str, Mapping[str, int]],
             answer_list: Sequence[str], mode: str = "open-ended",
             choices: Optional[Mapping[str, Sequence[str]]] = None) -> float:
    """Mean ground-truth score of the top prediction per question."""
    if mode not in ("open-ended", "multiple-choice"):
        raise ValueError(f"unknown accuracy mode {mode!r}")
    if not predictions:
        return 0.0
    total = 0.0
    for qid, scores in predictions.items():
        if qid not in ground_truths:
            raise KeyError(f"question {qid!r} has no ground truth")
        cand = None
        if mode == "multiple-choice":
            cand = (choices or {}).get(qid)
            if not cand:
                raise KeyError(f"question {qid!r} has no multiple-choice candidates")
        ans, _ = predicted_answer(scores, answer_list, cand)
        total += vqa_score(ground_truths[qid], ans)
    return total / len(predictions)


@dataclass(frozen=True)
class PairVerdict:
    pair_id: str
    ambiguous: bool
    correct: bool


def pair_verdicts(predictions: Mapping[str, np.ndarray], ground_truths: Mapping[str, Mapping[str, int]],
                  pair_ids: Mapping[str, str], answer_list: Sequence[str]) -> list[PairVerdict]:
    groups: dict[str, list[str]] = {}
    for qid in predictions:
        pid = pair_ids.get(qid)
        if pid is None:
            raise KeyError(f"question {qid!r} carries no pair id")
        groups.setdefault(pid, []).append(qid)
    out = []
    for pid in sorted(groups):
        members = groups[pid]
        if len(members) != 2:
            raise ValueError(f"pair {pid!r} has {len(members)} member(s), expected 2")
        gts = [ground_truths[q] for q in members]
        ambiguous = any(is_ambiguous(g) for g in gts)
        correct = all(hard_score(g, predicted_answer(predictions[q], answer_list)[0])
                      for q, g in zip(members, gts))
        out.append(PairVerdict(pid, ambiguous, correct and not ambiguous))
    return out


def pairs_accuracy(predictions: Mapping[str, np.ndarray], ground_truths: Mapping[str, Mapping[str, int]],
                   pair_ids: Mapping[str, str], answer_list: Sequence[str]) -> float:
    """Fraction of non-ambiguous pairs whose two members both get a hard score of 1."""
    verdicts = [v for v in pair_verdicts(predictions, ground_truths, pair_ids, answer_list)
                if not v.ambiguous]
    if not verdicts:
        return 0.0
    return sum(v.correct for v in verdicts) / len(verdicts)


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def rows(self):
        return zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist())


def precision_recall(pred_scores: Sequence[float], gt_scores: Sequence[float],
                     thresholds: Optional[Sequence[float]] = None) -> PRCurve:
    """Precision/recall of selecting items with predicted score > t.

    p(t) = sum(s * [s_hat > t]) / sum([s_hat > t]) with p = 1 for an empty
    selection; r(t) = sum(s * [s_hat > t]) / sum(s). By default t runs over
    +inf, every distinct predicted score (descending) and -inf.
    """
    sh = np.asarray(pred_scores, dtype=np.float64)
    s = np.asarray(gt_scores, dtype=np.float64)
    if thresholds is None:
        thresholds = [math.inf, *sorted(set(sh.tolist()), reverse=True), -math.inf]
    ts = np.asarray(thresholds, dtype=np.float64)
    total = s.sum()
    prec, rec = [], []
    for t in ts:
        sel = sh > t
        k = sel.sum()
        hit = s[sel].sum()
        prec.append(hit / k if k else 1.0)
        rec.append(hit / total if total > 0 else 0.0)
    return PRCurve(ts, np.array(prec), np.array(rec))


def pr_from_predictions(predictions: Mapping[str, np.ndarray], ground_truths: Mapping[str, Mapping[str, int]],
                        answer_list: Sequence[str], mode: str = "top1") -> PRCurve:
    """PR over the top-1 answer per question, or over every (question, answer) pair."""
    ps, gs = [], []
    for qid, scores in predictions.items():
        gt = ground_truths[qid]
        if mode == "top1":
            ans, sc = predicted_answer(scores, answer_list)
            ps.append(sc)
            gs.append(vqa_score(gt, ans))
        elif mode == "all":
            for k, a in enumerate(answer_list):
                ps.append(float(scores[k]))
                gs.append(vqa_score(gt, a))
        else:
            raise ValueError(f"unknown PR mode {mode!r}")
    return precision_recall(ps, gs)


def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in curve.rows():
            w.writerow([repr(t), repr(p), repr(r)])


def export_attention(result, scene, question, path) -> np.ndarray:
    """Write the word-by-object matching matrix as CSV.

    Rows are question tokens, columns objects (``index:type``); a final
    ``relevance`` row holds the per-object sum over words. Returns the
    relevance vector.
    """
    a = np.asarray(result.attention)
    words = list(question.words) or [str(t) for t in question.tokens]
    if a.shape[0] != len(words):
        raise ValueError(f"attention has {a.shape[0]} rows for {len(words)} tokens")
    if a.shape[1] == len(scene.objects):
        cols = [f"{j}:{o.type}" for j, o in enumerate(scene.objects)]
    else:
        cols = [f"{j}" for j in range(a.shape[1])]
    relevance = a.sum(axis=0)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["token", *cols])
        for word, row in zip(words, a):
            w.writerow([word, *[repr(float(v)) for v in row]])
        w.writerow(["relevance", *[repr(float(v)) for v in relevance]])
    return relevance
