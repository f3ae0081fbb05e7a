"""Losses, Glorot initialization, Adadelta and the pair-preserving training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from .autodiff import Tape, Tensor
from .ingest import QaInstance, VocabSet, glorot_bound, modal_answer
from .model import ModelConfig, ModelParams, forward, param_shapes

log = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 20
    loss: str = "hard"  # "hard" (softmax head) or "soft" (logistic head)
    rho: float = 0.95
    eps: float = 1e-6
    embedding_lr_scale: float = 0.1
    seed: int = 0
    train_fraction: float = 1.0
    keep_pairs_together: bool = True

    def __post_init__(self):
        if self.loss not in ("hard", "soft"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.keep_pairs_together and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when keeping pairs together")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def glorot_init(shape: Sequence[int], seed: SeedLike = None) -> np.ndarray:
    """Uniform on +-sqrt(6 / (fan_in + fan_out)); rank-1 shapes are biases and start at 0."""
    shape = tuple(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    if len(shape) != 2:
        raise ValueError(f"glorot_init expects rank 1 or 2, got {shape}")
    bound = glorot_bound(shape)
    return _rng(seed).uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, vocab: VocabSet, node_dim: int, seed: SeedLike = 0,
                embeddings: Optional[np.ndarray] = None) -> ModelParams:
    """Fresh parameters; ``embeddings`` (if given) replaces the random W1."""
    rng = _rng(seed)
    shapes = param_shapes(config, len(vocab.words), len(vocab.deps), node_dim, len(vocab.answers))
    params = {name: glorot_init(shape, rng) for name, shape in shapes.items()}
    if embeddings is not None and not config.no_pretrained_embeddings:
        if embeddings.shape != shapes["W1"]:
            raise ValueError(f"embedding matrix {embeddings.shape} does not match {shapes['W1']}")
        params["W1"] = np.array(embeddings, dtype=np.float64)
    return params


# ---------------------------------------------------------------- losses

def hard_target(counts, answers: dict[str, int]) -> Optional[int]:
    """Vocabulary index of the highest-scoring answer (lowest index on ties), or None."""
    scores = ev.target_scores(counts, answers)
    if not scores.size or scores.max() <= 0.0:
        return None
    return int(np.argmax(scores))


def hard_softmax_loss(y: Tensor, target: int) -> Tensor:
    """Cross-entropy -log y[target] of a softmax output."""
    return ad.scale(ad.log(ad.index(y, target)), -1.0)


def soft_logistic_loss(y: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over answers of -[s log y + (1 - s) log(1 - y)], logs floored at 1e-12."""
    s = np.asarray(targets, dtype=np.float64)
    pos = ad.hadamard(ad.log(y), s)
    neg = ad.hadamard(ad.log(ad.shift(ad.scale(y, -1.0), 1.0)), 1.0 - s)
    return ad.scale(ad.reduce_mean(ad.add(pos, neg)), -1.0)


def instance_loss(inst: QaInstance, y: Tensor, vocab: VocabSet, loss: str) -> Optional[Tensor]:
    """Loss for one instance; None when its modal answer is outside the vocabulary."""
    modal = modal_answer(inst.answer_counts)
    if modal is None or modal not in vocab.answers:
        return None
    if loss == "hard":
        return hard_softmax_loss(y, hard_target(inst.answer_counts, vocab.answers))
    return soft_logistic_loss(y, ev.target_scores(inst.answer_counts, vocab.answers))


def head_for_loss(loss: str) -> str:
    return "softmax" if loss == "hard" else "logistic"


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_update: dict[str, np.ndarray] = field(default_factory=dict)


def adadelta_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
                  rho: float = 0.95, eps: float = 1e-6, lr_scale: Optional[dict[str, float]] = None) -> None:
    """One in-place Adadelta update.

    ``lr_scale`` multiplies the applied update of selected parameters; the
    accumulators always see the unscaled update.
    """
    lr_scale = lr_scale or {}
    for name in sorted(grads):
        g = grads[name]
        eg = state.sq_grad.get(name)
        ex = state.sq_update.get(name)
        if eg is None:
            eg = np.zeros_like(g)
            ex = np.zeros_like(g)
        eg = rho * eg + (1.0 - rho) * g * g
        delta = -np.sqrt(ex + eps) / np.sqrt(eg + eps) * g
        ex = rho * ex + (1.0 - rho) * delta * delta
        state.sq_grad[name], state.sq_update[name] = eg, ex
        k = lr_scale.get(name, 1.0)
        if k != 0.0:
            params[name] = params[name] + k * delta


# ---------------------------------------------------------------- batching

def pair_groups(instances: Sequence[QaInstance]) -> list[list[int]]:
    """Indices grouped by pair id, in first-appearance order; unpaired items are singletons."""
    groups: dict[object, list[int]] = {}
    for k, inst in enumerate(instances):
        key = inst.pair_id if inst.pair_id is not None else ("__single__", k)
        groups.setdefault(key, []).append(k)
    return list(groups.values())


def make_batches(instances: Sequence[QaInstance], batch_size: int, seed: SeedLike = 0,
                 keep_pairs_together: bool = True) -> list[list[int]]:
    """Shuffle (by pair group when requested) and pack into batches of <= batch_size."""
    rng = _rng(seed)
    if not keep_pairs_together:
        order = rng.permutation(len(instances)).tolist()
        return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    groups = pair_groups(instances)
    for g in groups:
        if len(g) > batch_size:
            raise ValueError(f"pair group of {len(g)} exceeds batch size {batch_size}")
    batches: list[list[int]] = []
    cur: list[int] = []
    for gi in rng.permutation(len(groups)):
        g = groups[gi]
        if len(cur) + len(g) > batch_size:
            batches.append(cur)
            cur = []
        cur.extend(g)
    if cur:
        batches.append(cur)
    return batches


def subset_by_fraction(instances: Sequence[QaInstance], fraction: float, seed: SeedLike = 0) -> list[QaInstance]:
    """The first ``fraction`` of pair groups after a seeded shuffle."""
    if fraction >= 1.0:
        return list(instances)
    groups = pair_groups(instances)
    order = _rng(seed).permutation(len(groups))
    n = max(1, math.floor(fraction * len(groups) + 0.5))
    keep = sorted(k for gi in order[:n] for k in groups[gi])
    return [instances[k] for k in keep]


# ---------------------------------------------------------------- prediction

def predict(instances: Sequence[QaInstance], params: ModelParams, config: ModelConfig) -> dict[str, np.ndarray]:
    return {inst.qid: forward(inst.scene, inst.question, params, config, "eval").scores
            for inst in instances}


def validation_metric(instances: Sequence[QaInstance], predictions: dict[str, np.ndarray],
                      vocab: VocabSet) -> tuple[str, float]:
    """Pairs accuracy when every instance is paired, otherwise VQA accuracy."""
    gts = {i.qid: i.answer_counts for i in instances}
    answers = vocab.answer_list
    if instances and all(i.pair_id is not None for i in instances):
        pairs = {i.qid: i.pair_id for i in instances}
        return "pairs_accuracy", ev.pairs_accuracy(predictions, gts, pairs, answers)
    return "vqa_score", ev.accuracy(predictions, gts, answers)


# ---------------------------------------------------------------- loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    seconds: float
    skipped: int


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_metric: float
    metric_name: str
    history: list[EpochRecord]


def train(train_set: Sequence[QaInstance], val_set: Sequence[QaInstance], vocab: VocabSet,
          model_config: ModelConfig, train_config: TrainConfig,
          embeddings: Optional[np.ndarray] = None, init: Optional[ModelParams] = None) -> TrainResult:
    """Adadelta over pair-preserving mini-batches, keeping the best validation epoch."""
    tc = train_config
    expected_head = head_for_loss(tc.loss)
    if model_config.head != expected_head:
        raise TrainingError(f"{tc.loss} loss requires the {expected_head} head, got {model_config.head}")
    if not train_set:
        raise TrainingError("empty training set")
    node_dim = train_set[0].scene.node_features.shape[1]
    params = dict(init) if init is not None else init_params(
        model_config, vocab, node_dim, np.random.default_rng([tc.seed, 0]), embeddings)

    data = subset_by_fraction(train_set, tc.train_fraction, np.random.default_rng([tc.seed, 1]))
    state = OptimizerState()
    scale = {"W1": tc.embedding_lr_scale}
    history: list[EpochRecord] = []
    best = (-math.inf, 0, {k: v.copy() for k, v in params.items()})
    metric_name = ""

    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        batches = make_batches(data, tc.batch_size, np.random.default_rng([tc.seed, 2, epoch]),
                               tc.keep_pairs_together)
        drop_rng = np.random.default_rng([tc.seed, 3, epoch])
        loss_sum, n_loss, skipped = 0.0, 0, 0
        for b, batch in enumerate(batches):
            grads: dict[str, np.ndarray] = {}
            batch_loss, used = 0.0, 0
            for k in batch:
                inst = data[k]
                tape = Tape()
                res = forward(inst.scene, inst.question, params, model_config, "train", tape, drop_rng)
                loss = instance_loss(inst, res.output, vocab, tc.loss)
                if loss is None:
                    skipped += 1
                    continue
                for name, g in tape.backward(loss).items():
                    grads[name] = grads[name] + g if name in grads else g
                batch_loss += loss.item()
                used += 1
            if not used:
                continue
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b} "
                                    f"(first qid {data[batch[0]].qid!r})")
            for name in grads:
                grads[name] = grads[name] / used
            adadelta_step(params, grads, state, tc.rho, tc.eps, scale)
            loss_sum += batch_loss
            n_loss += used
        metric_name, metric = validation_metric(val_set, predict(val_set, params, model_config), vocab)
        rec = EpochRecord(epoch, loss_sum / max(n_loss, 1), metric, time.perf_counter() - t0, skipped)
        history.append(rec)
        log.info("epoch %d loss %.6f %s %.4f skipped %d (%.1fs)", epoch, rec.train_loss,
                 metric_name, metric, skipped, rec.seconds)
        if metric > best[0]:
            best = (metric, epoch, {k: v.copy() for k, v in params.items()})
    return TrainResult(best[2], best[1], best[0], metric_name, history)


def write_metrics_log(path, history: Sequence[EpochRecord]) -> None:
    """Deterministic per-epoch log: epoch, train_loss, val_metric."""
    with open(path, "w", newline="\n") as f:
        f.write("epoch,train_loss,val_metric\n")
        for r in history:
            f.write(f"{r.epoch},{r.train_loss!r},{r.val_metric!r}\n")


def write_timings(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="\n") as f:
        f.write("epoch,seconds,skipped\n")
        for r in history:
            f.write(f"{r.epoch},{r.seconds:.3f},{r.skipped}\n")
