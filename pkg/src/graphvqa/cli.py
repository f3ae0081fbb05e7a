"""``graphvqa`` command line: data generation, training, evaluation and sweeps."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad, evaluation as ev, ingest, runs, synthetic
from .model import CheckpointError, ModelConfig, forward, load_checkpoint, param_shapes
from .training import TrainConfig, TrainingError, head_for_loss, instance_loss

log = logging.getLogger("graphvqa")

GRADCHECK_TOLERANCE = 1e-4

# flag name -> ModelConfig field
ABLATION_FLAGS = {
    "sequential-question-edges": "sequential_question_edges",
    "no-pretrained-embeddings": "no_pretrained_embeddings",
    "unit-scene-edges": "unit_scene_edges",
    "disable-gru-question": "disable_gru_question",
    "disable-gru-scene": "disable_gru_scene",
    "uniform-attention": "uniform_attention",
    "blind-scene": "blind_scene",
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------- argument groups

def _data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--scenes", required=required, help="scene file (JSON lines)")
    p.add_argument("--questions", required=required, help="question file (CoNLL-U)")
    p.add_argument("--manifest", help="category/type/expression manifest (default: next to --scenes)")


def _train_args(p: argparse.ArgumentParser) -> None:
    _data_args(p)
    p.add_argument("--val-scenes")
    p.add_argument("--val-questions")
    p.add_argument("--embeddings", help="pretrained word vectors, one 'word v1 .. vH' per line")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--loss", choices=("hard", "soft"), default="hard")
    p.add_argument("--head", choices=("softmax", "logistic"),
                   help="output nonlinearity (default: the one matching --loss)")
    p.add_argument("--h-dim", type=int, default=ModelConfig.hidden)
    p.add_argument("--t-q", type=int, default=ModelConfig.t_q)
    p.add_argument("--t-s", type=int, default=ModelConfig.t_s)
    p.add_argument("--dropout", type=float, default=ModelConfig.dropout)
    p.add_argument("--train-fraction", type=float, default=1.0)
    p.add_argument("--embedding-lr-scale", type=float, default=TrainConfig.embedding_lr_scale)
    p.add_argument("--answer-min-count", type=int, default=5)
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag}", action="store_true")


def _spec_from_args(a: argparse.Namespace) -> runs.RunSpec:
    head = a.head or head_for_loss(a.loss)
    if head != head_for_loss(a.loss):
        raise CliError(f"--loss {a.loss} needs --head {head_for_loss(a.loss)}, got --head {head}")
    flags = {field: getattr(a, flag.replace("-", "_")) for flag, field in ABLATION_FLAGS.items()}
    try:
        model_cfg = ModelConfig(hidden=a.h_dim, t_q=a.t_q, t_s=a.t_s, dropout=a.dropout, head=head, **flags)
        train_cfg = TrainConfig(batch_size=a.batch_size, epochs=a.epochs, loss=a.loss, seed=a.seed,
                                train_fraction=a.train_fraction, embedding_lr_scale=a.embedding_lr_scale)
    except ValueError as e:
        raise CliError(str(e)) from e
    return runs.RunSpec(a.scenes, a.questions, a.val_scenes, a.val_questions, a.manifest, a.embeddings,
                        a.out, model_cfg, train_cfg, a.answer_min_count)


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as e:
        raise CliError(f"checkpoint not found: {path}") from e


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(a) -> int:
    out = Path(a.out)
    templates = tuple(a.templates.split(","))
    splits = [("train", a.seed, a.pairs), ("val", a.seed + 1, a.val_pairs), ("test", a.seed + 2, a.test_pairs)]
    written = {}
    for split, seed, n in splits:
        if n:
            paths = synthetic.generate_dataset(seed, n, out, split, a.disagreement_rate, templates)
            written[split] = {k: str(v) for k, v in paths.items()}
            print(f"{split}: {2 * n} questions -> {paths['questions']}")
    runs.write_run_file(out, "gen-data", {"seed": a.seed, "pairs": a.pairs, "val_pairs": a.val_pairs,
                                          "test_pairs": a.test_pairs, "templates": list(templates),
                                          "disagreement_rate": a.disagreement_rate, "files": written})
    return 0


def cmd_train(a) -> int:
    spec = _spec_from_args(a)
    result, _, _ = runs.train_run(spec)
    print(f"best {result.metric_name} {result.best_metric:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {Path(spec.out) / runs.CHECKPOINT_NAME}")
    return 0


def cmd_eval(a) -> int:
    ckpt = _load_ckpt(a.checkpoint)
    insts = runs.load_eval_split(ckpt, a.scenes, a.questions, a.manifest)
    report = runs.evaluate(ckpt, insts)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_pr_csv(out / "pr_top1.csv", report.pop("pr_top1"))
    ev.write_pr_csv(out / "pr_all.csv", report.pop("pr_all"))
    with open(out / "metrics.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    runs.write_run_file(out, "eval", {"checkpoint": a.checkpoint, "scenes": a.scenes, "questions": a.questions})
    for k in sorted(report):
        print(f"{k}: {report[k]}")
    return 0


def cmd_predict(a) -> int:
    ckpt = _load_ckpt(a.checkpoint)
    insts = runs.load_eval_split(ckpt, a.scenes, a.questions, a.manifest)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["qid", "answer", "score"])
        for qid, ans, score in runs.predictions_table(ckpt, insts):
            w.writerow([qid, ans, repr(score)])
    runs.write_run_file(out, "predict", {"checkpoint": a.checkpoint, "scenes": a.scenes, "questions": a.questions})
    print(f"{len(insts)} predictions -> {out / 'predictions.csv'}")
    return 0


def gradcheck_instance(seed: int, hidden: int = 16, steps: int = 2, n_objects: int = 3, n_words: int = 4,
                       loss: str = "hard"):
    """A random scene/question pair with Glorot weights and small random biases."""
    rng = np.random.default_rng(seed)
    node_dim, n_vocab, n_deps, n_answers = 8, 10, 6, 3
    objs = tuple(ingest.ObjectNode("c", "t", "e", float(rng.random()), float(rng.random()), int(rng.integers(3)))
                 for _ in range(n_objects))
    scene = ingest.SceneGraph("s", objs, rng.normal(size=(n_objects, node_dim)), ingest.build_scene_edges(objs))
    edges = []
    for dep in range(1, n_words):
        head, label = int(rng.integers(dep)), int(rng.integers(3, n_deps))
        edges += [(head, dep, label), (dep, head, label)]
    question = ingest.QuestionGraph("q", rng.integers(0, n_vocab, n_words),
                                    np.array(edges, dtype=np.int64).reshape(-1, 3))
    cfg = ModelConfig(hidden=hidden, t_q=steps, t_s=steps, dropout=0.0, head=head_for_loss(loss))
    params = {}
    for name, shape in param_shapes(cfg, n_vocab, n_deps, node_dim, n_answers).items():
        if len(shape) == 1:
            params[name] = rng.normal(scale=0.1, size=shape)
        else:
            bound = ingest.glorot_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape)
    reserved = [ingest.DEP_UNK, ingest.DEP_NEXT, ingest.DEP_NEXT + ingest.REV_SUFFIX]
    deps = reserved + [f"d{k}" for k in range(len(reserved), n_deps)]
    vocab = ingest.VocabSet({ingest.UNK: 0, **{f"w{k}": k for k in range(1, n_vocab)}},
                            {d: k for k, d in enumerate(deps)}, {f"a{k}": k for k in range(n_answers)})
    counts = dict(zip(("a0", "a1", "a2"), (int(c) for c in rng.multinomial(10, [0.6, 0.3, 0.1]))))
    inst = ingest.QaInstance("q", scene, question, {k: v for k, v in counts.items() if v})
    return inst, params, cfg, vocab


def run_gradcheck(seed: int, hidden: int = 16, steps: int = 2, losses: Sequence[str] = ("hard", "soft")) -> dict:
    """Per-(loss, parameter) max relative error of the full model."""
    table = {}
    for loss in losses:
        inst, params, cfg, vocab = gradcheck_instance(seed, hidden, steps, loss=loss)

        def fn(tape, p, inst=inst, cfg=cfg, vocab=vocab, loss=loss):
            out = forward(inst.scene, inst.question, p, cfg, tape=tape).output
            return instance_loss(inst, out, vocab, loss)

        for name, err in ad.grad_check(fn, params).items():
            table[(loss, name)] = err
    return table


def cmd_gradcheck(a) -> int:
    table = run_gradcheck(a.seed, a.h_dim, a.t)
    worst = max(table.values())
    print(f"{'loss':<6} {'parameter':<12} max_rel_error")
    for (loss, name), err in table.items():
        mark = "" if err < GRADCHECK_TOLERANCE else "  FAIL"
        print(f"{loss:<6} {name:<12} {err:.3e}{mark}")
    print(f"worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def cmd_ablate(a) -> int:
    spec = _spec_from_args(a)
    rows = [int(r) for r in a.rows.split(",")] if a.rows else [r for r, _, _ in runs.ABLATIONS]
    reference, table = runs.run_ablations(spec, rows)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    runs.write_sweep_csv(out / "ablation.csv", table)
    runs.write_sweep_csv(out / "ablation_reference.csv", [reference])
    runs.write_run_file(out, "ablate", {**spec.to_dict(), "rows": rows})
    print(f"{'row':>4}  pairs_acc  label")
    print(f"{'full':>4}  {reference.pairs_accuracy:.4f}     {reference.label}")
    for r in table:
        print(f"{r.key:>4}  {r.pairs_accuracy:.4f}     {r.label}")
    return 0


def cmd_sweep_size(a) -> int:
    spec = _spec_from_args(a)
    rows = runs.run_size_sweep(spec)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    runs.write_sweep_csv(out / "sweep_size.csv", rows, first_col="fraction")
    runs.write_run_file(out, "sweep-size", {**spec.to_dict(), "fractions": list(runs.SWEEP_FRACTIONS)})
    for r in rows:
        print(f"fraction {r.key:<6} n_train {r.n_train:<6} pairs_acc {r.pairs_accuracy:.4f}")
    return 0


def cmd_export_attention(a) -> int:
    ckpt = _load_ckpt(a.checkpoint)
    insts = {i.qid: i for i in runs.load_eval_split(ckpt, a.scenes, a.questions, a.manifest)}
    qids = a.qids.split(",") if a.qids else sorted(insts)
    missing = [q for q in qids if q not in insts]
    if missing:
        raise CliError(f"unknown question id(s): {', '.join(missing)}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for qid in qids:
        runs.attention_for(ckpt, insts[qid], out / f"attention_{qid}.csv")
    runs.write_run_file(out, "export-attention", {"checkpoint": a.checkpoint, "qids": qids})
    print(f"{len(qids)} attention matrices -> {out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphvqa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic balanced dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=500, help="training pairs")
    p.add_argument("--val-pairs", type=int, default=0)
    p.add_argument("--test-pairs", type=int, default=0)
    p.add_argument("--disagreement-rate", type=float, default=0.0)
    p.add_argument("--templates", default=",".join(synthetic.BINARY_TEMPLATES),
                   help=f"comma-separated subset of {','.join(synthetic.BINARY_TEMPLATES)}")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and keep the best validation epoch")
    _train_args(p)
    p.set_defaults(fn=cmd_train)

    for name, fn, what in (("eval", cmd_eval, "metrics and PR curves"), ("predict", cmd_predict, "predictions CSV")):
        p = sub.add_parser(name, help=f"{what} for a checkpoint")
        p.add_argument("--checkpoint", required=True)
        _data_args(p)
        p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h-dim", type=int, default=16)
    p.add_argument("--t", type=int, default=2, help="GRU iterations on both graphs")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the full model and the ten numbered ablations")
    _train_args(p)
    p.add_argument("--rows", help="comma-separated subset of rows 1-10")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep-size", help="train on 1/8, 1/4, 1/2 and all of the training pairs")
    _train_args(p)
    p.set_defaults(fn=cmd_sweep_size)

    p = sub.add_parser("export-attention", help="write matching-weight matrices as CSV")
    p.add_argument("--checkpoint", required=True)
    _data_args(p)
    p.add_argument("--qids", help="comma-separated question ids (default: all)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_attention)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CliError, ingest.IngestError, CheckpointError, TrainingError, ad.DimensionError,
            ValueError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"graphvqa {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
