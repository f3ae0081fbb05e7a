"""Graph VQA network: embeddings, GRU graph propagation, matching attention, pooled head.

Parameters live in a plain ``dict[str, np.ndarray]`` keyed by name:

============  ==========================  =====================================
name          shape                       role
============  ==========================  =====================================
W1            (n_words, H)                word embedding
W2            (n_deps, H)                 dependency-type embedding
W3, b3        (H, C), (H,)                scene node projection
W4, b4        (H, D), (H,)                scene edge projection
gru_q.*       W_g (H, 2H), U_g (H, H),    question GRU, g in {z, r, h}
              b_g (H,)
gru_s.*       same                        scene GRU
W5, b5        (1, H), (1,)                matching weights
W6, b6        (H, 2H), (H,)               per-word hidden layer
W7, b7        (n_answers, H), (n_answers,)  answer classifier
============  ==========================  =====================================
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .ingest import EDGE_DIM, NormStats, QuestionGraph, SceneGraph, VocabSet, sequential_edges

ModelParams = dict  # name -> np.ndarray

GRU_GATES = ("z", "r", "h")


@dataclass
class ModelConfig:
    hidden: int = 300
    t_q: int = 4
    t_s: int = 4
    pool: str = "mean"
    dropout: float = 0.3
    head: str = "softmax"
    sequential_question_edges: bool = False
    no_pretrained_embeddings: bool = False
    unit_scene_edges: bool = False
    disable_gru_question: bool = False
    disable_gru_scene: bool = False
    uniform_attention: bool = False
    blind_scene: bool = False
    share_gru: bool = False

    def __post_init__(self):
        if self.t_q < 0 or self.t_s < 0:
            raise ValueError("iteration counts must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.head not in ("softmax", "logistic"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.pool not in ("mean", "sum", "max"):
            raise ValueError(f"unknown pool {self.pool!r}")

    @property
    def question_steps(self) -> int:
        return 0 if self.disable_gru_question else self.t_q

    @property
    def scene_steps(self) -> int:
        return 0 if self.disable_gru_scene else self.t_s

    @property
    def scene_gru(self) -> str:
        return "gru_q" if self.share_gru else "gru_s"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(config: ModelConfig, n_words: int, n_deps: int, node_dim: int,
                 n_answers: int, edge_dim: int = EDGE_DIM) -> dict[str, tuple[int, ...]]:
    h = config.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "W1": (n_words, h), "W2": (n_deps, h),
        "W3": (h, node_dim), "b3": (h,),
        "W4": (h, edge_dim), "b4": (h,),
    }
    for prefix in sorted({"gru_q", config.scene_gru}):
        for g in GRU_GATES:
            shapes[f"{prefix}.W_{g}"] = (h, 2 * h)
            shapes[f"{prefix}.U_{g}"] = (h, h)
            shapes[f"{prefix}.b_{g}"] = (h,)
    shapes.update({"W5": (1, h), "b5": (1,), "W6": (h, 2 * h), "b6": (h,),
                   "W7": (n_answers, h), "b7": (n_answers,)})
    return shapes


@dataclass
class ForwardResult:
    scores: np.ndarray
    attention: np.ndarray
    question_states: np.ndarray
    scene_states: np.ndarray
    output: Tensor = field(repr=False)


def embed_question(graph: QuestionGraph, tape: Tape, params: ModelParams,
                   edges: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """Lookup-table embeddings of tokens and dependency types."""
    edges = graph.edges if edges is None else edges
    x = ad.gather_rows(tape.param("W1", params["W1"]), graph.tokens)
    e = ad.gather_rows(tape.param("W2", params["W2"]), edges[:, 2])
    return x, e


def embed_scene(node_features: np.ndarray, edge_features: np.ndarray, tape: Tape,
                params: ModelParams) -> tuple[Tensor, Tensor]:
    """Affine projections of object features (N, C) and edge features (E, D)."""
    w3, w4 = params["W3"], params["W4"]
    if node_features.shape[1] != w3.shape[1]:
        raise ad.DimensionError(f"scene node features have dim {node_features.shape[1]}, "
                                f"model expects {w3.shape[1]}")
    if edge_features.shape[1] != w4.shape[1]:
        raise ad.DimensionError(f"scene edge features have dim {edge_features.shape[1]}, "
                                f"model expects {w4.shape[1]}")
    # entrywise-exact projection: feeds the attention, which must permute exactly
    proj = ad.pairwise_dot(Tensor(node_features), tape.param("W3", w3))
    x = ad.add(proj, ad.broadcast_to(tape.param("b3", params["b3"]), proj.shape))
    e = ad.linear(Tensor(edge_features), tape.param("W4", w4), tape.param("b4", params["b4"]))
    return x, e


def gru_sequence(h: Tensor, inputs: Tensor, tape: Tape, params: ModelParams, prefix: str,
                 steps: int) -> Tensor:
    """Run ``steps`` GRU updates with fixed per-node inputs.

    z = s(W_z u + U_z h + b_z), r = s(W_r u + U_r h + b_r),
    c = tanh(W_h u + U_h (r * h) + b_h), h <- z * h + (1 - z) * c.
    """
    p = {k: tape.param(f"{prefix}.{k}", params[f"{prefix}.{k}"])
         for g in GRU_GATES for k in (f"W_{g}", f"U_{g}", f"b_{g}")}
    xin = {g: ad.linear(inputs, p[f"W_{g}"], p[f"b_{g}"]) for g in GRU_GATES}
    ut = {g: ad.transpose(p[f"U_{g}"]) for g in GRU_GATES}
    for _ in range(steps):
        z = ad.sigmoid(ad.add(xin["z"], ad.matmul(h, ut["z"])))
        r = ad.sigmoid(ad.add(xin["r"], ad.matmul(h, ut["r"])))
        c = ad.tanh(ad.add(xin["h"], ad.matmul(ad.hadamard(r, h), ut["h"])))
        h = ad.add(c, ad.hadamard(z, ad.sub(h, c)))
    return h


def propagate(x: Tensor, e: Tensor, receivers: np.ndarray, senders: np.ndarray, tape: Tape,
              params: ModelParams, prefix: str, steps: int, pool: str = "mean") -> Tensor:
    """Final node states after ``steps`` GRU iterations; identity when ``steps == 0``.

    The neighbourhood context n_i pools e_ij * x_j over the senders j of
    receiver i, once, from the initial embeddings. Isolated nodes get n_i = 0.
    """
    if steps == 0:
        return x
    n_nodes = x.shape[0]
    msgs = ad.hadamard(e, ad.gather_rows(x, senders))
    context = ad.segment_pool(pool, msgs, receivers, n_nodes)
    inputs = ad.concat(x, context, axis=1)
    h0 = Tensor(np.zeros(x.shape))
    return gru_sequence(h0, inputs, tape, params, prefix, steps)


def matching_weights(xq: Tensor, xs: Tensor, tape: Tape, params: ModelParams) -> Tensor:
    """a_ij = sigmoid(W5 (xq_i/|xq_i| * xs_j/|xs_j|) + b5), from pre-GRU embeddings."""
    qn = ad.l2_normalize_rows(xq)
    sn = ad.l2_normalize_rows(xs)
    w5 = tape.param("W5", params["W5"])
    b5 = tape.param("b5", params["b5"])
    weighted = ad.hadamard(qn, ad.broadcast_to(w5, qn.shape))
    logits = ad.pairwise_dot(weighted, sn)
    return ad.sigmoid(ad.add(logits, ad.broadcast_to(b5, logits.shape)))


def classify(a: Tensor, hq: Tensor, hs: Tensor, tape: Tape, params: ModelParams, head: str,
             dropout: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Attention-weighted double sum over (word, object) pairs, then the answer head.

    Summing a_ij [hq_i ; hs_j] over j gives [(sum_j a_ij) hq_i ; (a hs)_i],
    which is what is computed here. Dropout is applied to the pooled
    vector when ``rng`` is given.
    """
    nq, ns = a.shape
    h = hq.shape[1]
    row_mass = ad.matmul(a, np.ones((ns, 1)))
    left = ad.hadamard(ad.broadcast_to(row_mass, (nq, h)), hq)
    right = ad.matmul(a, hs)
    pooled_scene = ad.concat(left, right, axis=1)
    word_hidden = ad.relu(ad.linear(pooled_scene, tape.param("W6", params["W6"]),
                                  tape.param("b6", params["b6"])))
    v = ad.reduce_sum(word_hidden, axis=0)
    if rng is not None and dropout > 0.0:
        keep = (rng.random(v.shape) >= dropout) / (1.0 - dropout)
        v = ad.hadamard(v, keep)
    logits = ad.add(ad.matmul(tape.param("W7", params["W7"]), v), tape.param("b7", params["b7"]))
    return ad.softmax(logits) if head == "softmax" else ad.sigmoid(logits)


def scene_inputs(scene: SceneGraph, config: ModelConfig):
    """Node features, edge list and edge features after scene-side ablations."""
    if config.blind_scene:
        c = scene.node_features.shape[1]
        empty = np.zeros(0, dtype=np.int64)
        return np.zeros((1, c)), empty, empty, np.zeros((0, scene.edge_features.shape[-1]))
    recv, send, feats = scene.edge_list()
    if config.unit_scene_edges:
        feats = np.ones_like(feats)
    return scene.node_features, recv, send, feats


def forward(scene: SceneGraph, question: QuestionGraph, params: ModelParams, config: ModelConfig,
            mode: str = "eval", tape: Optional[Tape] = None,
            rng: Optional[np.random.Generator] = None) -> ForwardResult:
    """Score every answer for one (scene, question) instance.

    In ``"train"`` mode dropout masks are drawn from ``rng``; ``"eval"`` is
    deterministic. Pass a recording tape to differentiate the output.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    tape = tape if tape is not None else Tape(record=False)

    qedges = sequential_edges(question.n_nodes) if config.sequential_question_edges else question.edges
    xq, eq = embed_question(question, tape, params, qedges)
    nodes, recv, send, efeats = scene_inputs(scene, config)
    xs, es = embed_scene(nodes, efeats, tape, params)

    hq = propagate(xq, eq, qedges[:, 0], qedges[:, 1], tape, params, "gru_q",
                   config.question_steps, config.pool)
    hs = propagate(xs, es, recv, send, tape, params, config.scene_gru,
                   config.scene_steps, config.pool)

    if config.uniform_attention:
        a = Tensor(np.ones((xq.shape[0], xs.shape[0])))
    else:
        a = matching_weights(xq, xs, tape, params)

    drop_rng = rng if mode == "train" else None
    y = classify(a, hq, hs, tape, params, config.head, config.dropout, drop_rng)
    return ForwardResult(y.data, a.data, hq.data, hs.data, y)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"GVQACKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    vocab: VocabSet
    norm: Optional[NormStats] = None
    extra: dict = field(default_factory=dict)


def _norm_tensors(norm: Optional[NormStats]) -> dict[str, np.ndarray]:
    if norm is None:
        return {}
    return {f"norm/{k}": getattr(norm, k) for k in ("node_mean", "node_std", "edge_mean", "edge_std")}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize deterministically: magic, header length, JSON header, tensors."""
    tensors = {**{k: ckpt.params[k] for k in sorted(ckpt.params)}, **_norm_tensors(ckpt.norm)}
    cfg = ckpt.config
    header = {
        "format_version": CHECKPOINT_VERSION,
        "H": cfg.hidden, "T_Q": cfg.t_q, "T_S": cfg.t_s,
        "vocab_hashes": ckpt.vocab.hashes(),
        "config": cfg.to_dict(),
        "vocab": ckpt.vocab.to_dict(),
        "extra": ckpt.extra,
        "tensors": list(tensors),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


def load_checkpoint(path, expected_vocab: Optional[VocabSet] = None) -> Checkpoint:
    """Read a checkpoint; rejects it when ``expected_vocab`` hashes differ."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    vocab = VocabSet.from_dict(header["vocab"])
    if vocab.hashes() != header["vocab_hashes"]:
        raise CheckpointError(f"{path}: stored vocabulary does not match its hashes")
    if expected_vocab is not None and expected_vocab.hashes() != header["vocab_hashes"]:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    tensors = {}
    for name in header["tensors"]:
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        got = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if got != name:
            raise CheckpointError(f"{path}: tensor order mismatch at {name!r}")
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    norm = None
    if "norm/node_mean" in tensors:
        norm = NormStats(*(tensors.pop(f"norm/{k}") for k in ("node_mean", "node_std", "edge_mean", "edge_std")))
    return Checkpoint(ModelConfig.from_dict(header["config"]), tensors, vocab, norm,
                      header.get("extra", {}))
