"""Experiment plumbing shared by the command line and the end-to-end tests.

A :class:`RunSpec` names the data files and every config override. Running
one loads and normalizes the splits, trains, and writes the checkpoint and
logs into the output directory.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, evaluation as ev, ingest
from .ingest import Manifest, QaInstance, VocabSet
from .model import Checkpoint, ModelConfig, forward, save_checkpoint
from .training import (TrainConfig, TrainResult, predict, subset_by_fraction, train, write_metrics_log,
                       write_timings)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.csv"
TIMINGS_NAME = "timings.csv"
RUN_FILE = "run.json"

# numbered ablations; each maps to ModelConfig overrides
ABLATIONS: tuple[tuple[int, str, dict], ...] = (
    (1, "Question: no parsing (graph with previous/next edges)", {"sequential_question_edges": True}),
    (2, "Question: word embedding not pretrained", {"no_pretrained_embeddings": True}),
    (3, "Scene: no edge features (e'=1)", {"unit_scene_edges": True}),
    (4, "Graph processing: disabled for question", {"disable_gru_question": True}),
    (5, "Graph processing: disabled for scene", {"disable_gru_scene": True}),
    (6, "Graph processing: disabled for question/scene", {"disable_gru_question": True, "disable_gru_scene": True}),
    (7, "Graph processing: only 1 iteration for question (T_Q=1)", {"t_q": 1}),
    (8, "Graph processing: only 1 iteration for scene (T_S=1)", {"t_s": 1}),
    (9, "Graph processing: only 1 iteration for question/scene", {"t_q": 1, "t_s": 1}),
    (10, "Uniform matching weights (a_ij=1)", {"uniform_attention": True}),
)

SWEEP_FRACTIONS = (0.125, 0.25, 0.5, 1.0)


@dataclass
class RunSpec:
    scenes: str
    questions: str
    val_scenes: Optional[str] = None
    val_questions: Optional[str] = None
    manifest: Optional[str] = None
    embeddings: Optional[str] = None
    out: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    answer_min_count: int = 5

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("scenes", "questions", "val_scenes", "val_questions",
                                           "manifest", "embeddings", "out", "answer_min_count")}
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        d = dict(d)
        model_cfg = ModelConfig.from_dict(d.pop("model", {}))
        train_cfg = TrainConfig(**d.pop("train", {}))
        return cls(model=model_cfg, train=train_cfg, **d)

    def with_model(self, **overrides) -> "RunSpec":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **overrides))

    def with_train(self, **overrides) -> "RunSpec":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **overrides))


@dataclass
class Data:
    train: list[QaInstance]
    val: list[QaInstance]
    vocab: VocabSet
    manifest: Manifest
    norm: ingest.NormStats
    embeddings: Optional[np.ndarray]


def default_manifest_path(scenes: str) -> Path:
    return Path(scenes).parent / "manifest.json"


def load_data(spec: RunSpec) -> Data:
    """Read, join and normalize both splits; statistics come from training data only."""
    manifest = Manifest.load(spec.manifest or default_manifest_path(spec.scenes))
    tr, vocab, _ = ingest.load_split(spec.scenes, spec.questions, manifest,
                                     answer_min_count=spec.answer_min_count)
    if spec.val_scenes and spec.val_questions:
        va, _, _ = ingest.load_split(spec.val_scenes, spec.val_questions, manifest, vocab)
    else:
        log.warning("no validation split given; selecting the best epoch on training data")
        va = tr
    norm = ingest.fit_norm_stats([i.scene for i in tr])
    tr, va = ingest.normalize_instances(tr, norm), ingest.normalize_instances(va, norm)
    emb = None
    if spec.embeddings and not spec.model.no_pretrained_embeddings:
        emb, found = ingest.load_pretrained_embeddings(
            spec.embeddings, vocab.words, spec.model.hidden, np.random.default_rng([spec.train.seed, 4]))
        log.info("pretrained vectors for %d of %d words", found, len(vocab.words))
    return Data(tr, va, vocab, manifest, norm, emb)


def train_run(spec: RunSpec, data: Optional[Data] = None) -> tuple[TrainResult, Checkpoint, Data]:
    """Train one configuration; writes checkpoint, logs and run.json when ``spec.out`` is set."""
    data = data if data is not None else load_data(spec)
    result = train(data.train, data.val, data.vocab, spec.model, spec.train, data.embeddings)
    ckpt = Checkpoint(spec.model, result.params, data.vocab, data.norm,
                      {"best_epoch": result.best_epoch, "best_metric": result.best_metric,
                       "metric": result.metric_name, "manifest": data.manifest.to_dict()})
    if spec.out:
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / CHECKPOINT_NAME, ckpt)
        write_metrics_log(out / METRICS_NAME, result.history)
        write_timings(out / TIMINGS_NAME, result.history)
        write_run_file(out, "train", spec.to_dict())
    return result, ckpt, data


def write_run_file(out_dir, subcommand: str, payload: dict) -> Path:
    path = Path(out_dir) / RUN_FILE
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"subcommand": subcommand, "version": __version__, **payload}, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------- evaluation

def load_eval_split(ckpt: Checkpoint, scenes, questions, manifest: Optional[str] = None) -> list[QaInstance]:
    """Instances ingested with the checkpoint's vocabulary and normalization."""
    if manifest:
        man = Manifest.load(manifest)
    elif "manifest" in ckpt.extra:
        man = Manifest.from_dict(ckpt.extra["manifest"])
    else:
        man = Manifest.load(default_manifest_path(scenes))
    insts, _, _ = ingest.load_split(scenes, questions, man, ckpt.vocab)
    return ingest.normalize_instances(insts, ckpt.norm) if ckpt.norm is not None else insts


def evaluate(ckpt: Checkpoint, instances: Sequence[QaInstance]) -> dict:
    """Scene-level scores, pairs accuracy (when paired) and both PR curves."""
    preds = predict(instances, ckpt.params, ckpt.config)
    gts = {i.qid: i.answer_counts for i in instances}
    answers = ckpt.vocab.answer_list
    report = {"n_questions": len(instances), "accuracy": ev.accuracy(preds, gts, answers)}
    choices = {i.qid: i.choices for i in instances if i.choices}
    if len(choices) == len(instances):
        report["multiple_choice_accuracy"] = ev.accuracy(preds, gts, answers, "multiple-choice", choices)
    pairs = {i.qid: i.pair_id for i in instances if i.pair_id is not None}
    if instances and len(pairs) == len(instances):
        report["pairs_accuracy"] = ev.pairs_accuracy(preds, gts, pairs, answers)
    report["pr_top1"] = ev.pr_from_predictions(preds, gts, answers, "top1")
    report["pr_all"] = ev.pr_from_predictions(preds, gts, answers, "all")
    return report


def predictions_table(ckpt: Checkpoint, instances: Sequence[QaInstance]) -> list[tuple[str, str, float]]:
    preds = predict(instances, ckpt.params, ckpt.config)
    rows = []
    for inst in instances:
        ans, score = ev.predicted_answer(preds[inst.qid], ckpt.vocab.answer_list)
        rows.append((inst.qid, ans, score))
    return rows


def attention_for(ckpt: Checkpoint, inst: QaInstance, path) -> np.ndarray:
    res = forward(inst.scene, inst.question, ckpt.params, ckpt.config)
    return ev.export_attention(res, inst.scene, inst.question, path)


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepRow:
    key: str
    label: str
    pairs_accuracy: float
    best_epoch: int
    n_train: int


def run_ablations(spec: RunSpec, rows: Sequence[int] = tuple(r for r, _, _ in ABLATIONS),
                  data: Optional[Data] = None) -> tuple[SweepRow, list[SweepRow]]:
    """Full-model reference plus each numbered ablation, same data and seed."""
    data = data if data is not None else load_data(spec)
    base = dataclasses.replace(spec, out=None)
    ref, _, _ = train_run(base, data)
    reference = SweepRow("full", "Full model", ref.best_metric, ref.best_epoch, len(data.train))
    table = []
    for number, label, overrides in ABLATIONS:
        if number not in rows:
            continue
        res, _, _ = train_run(base.with_model(**overrides), data)
        log.info("ablation %d: %.4f", number, res.best_metric)
        table.append(SweepRow(str(number), label, res.best_metric, res.best_epoch, len(data.train)))
    return reference, table


def run_size_sweep(spec: RunSpec, fractions: Sequence[float] = SWEEP_FRACTIONS,
                   data: Optional[Data] = None) -> list[SweepRow]:
    data = data if data is not None else load_data(spec)
    base = dataclasses.replace(spec, out=None)
    rows = []
    for frac in fractions:
        res, _, _ = train_run(base.with_train(train_fraction=frac), data)
        # same subset the training loop drew
        n = len(subset_by_fraction(data.train, frac, np.random.default_rng([spec.train.seed, 1])))
        rows.append(SweepRow(f"{frac:g}", f"fraction {frac:g}", res.best_metric, res.best_epoch, n))
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow], first_col: str = "row") -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([first_col, "label", "pairs_accuracy", "best_epoch", "n_train"])
        for r in rows:
            w.writerow([r.key, r.label, repr(r.pairs_accuracy), r.best_epoch, r.n_train])
