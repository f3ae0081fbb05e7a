import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphvqa import autodiff as ad, ingest, model, training
from graphvqa.autodiff import Tape, Tensor
from graphvqa.training import OptimizerState, TrainConfig

from factory import NODE_DIM, qa, random_instance, small_vocab


# ---------------------------------------------------------------- init

def test_glorot_bounds_and_mean():
    w = training.glorot_init((300, 200), 0)
    bound = math.sqrt(6 / 500)
    assert np.all(np.abs(w) <= bound)
    assert abs(w.mean()) < 0.01 * bound
    # uniform on [-b, b] has variance b^2 / 3
    assert w.var() == pytest.approx(bound ** 2 / 3, rel=0.02)
    np.testing.assert_array_equal(training.glorot_init((7,), 0), 0.0)


def test_init_params_is_seeded_and_takes_embeddings():
    cfg = model.ModelConfig(hidden=4, t_q=1, t_s=1)
    vocab = small_vocab()
    a = training.init_params(cfg, vocab, NODE_DIM, 3)
    b = training.init_params(cfg, vocab, NODE_DIM, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    emb = np.full((len(vocab.words), 4), 0.25)
    c = training.init_params(cfg, vocab, NODE_DIM, 3, emb)
    np.testing.assert_array_equal(c["W1"], 0.25)
    off = model.ModelConfig(hidden=4, no_pretrained_embeddings=True)
    assert not np.all(training.init_params(off, vocab, NODE_DIM, 3, emb)["W1"] == 0.25)
    with pytest.raises(ValueError):
        training.init_params(cfg, vocab, NODE_DIM, 3, np.zeros((2, 4)))


# ---------------------------------------------------------------- losses

def test_uniform_softmax_loss_is_log_n():
    y = Tensor(np.full(10, 0.1))
    assert training.hard_softmax_loss(y, 3).item() == pytest.approx(math.log(10), abs=1e-12)


def test_soft_loss_at_half_is_log_2():
    y = Tensor(np.full(4, 0.5))
    for s in (np.zeros(4), np.ones(4), np.array([0.3, 0.6, 0.9, 1.0])):
        assert training.soft_logistic_loss(y, s).item() == pytest.approx(math.log(2), abs=1e-12)


def test_soft_loss_minimised_at_target():
    # 1-D scan: -[s log y + (1-s) log(1-y)] is smallest at y = s
    ys = np.linspace(0.001, 0.999, 999)
    for s in (0.3, 0.6, 0.9):
        losses = [training.soft_logistic_loss(Tensor([y]), [s]).item() for y in ys]
        assert ys[int(np.argmin(losses))] == pytest.approx(s, abs=1e-3)


def test_soft_loss_floor_keeps_it_finite():
    v = training.soft_logistic_loss(Tensor([0.0, 1.0]), [1.0, 0.0]).item()
    assert math.isfinite(v) and v == pytest.approx(-math.log(1e-12))


def test_hard_target_ties_go_to_lowest_index():
    answers = {"a": 0, "b": 1, "c": 2}
    assert training.hard_target({"c": 5, "b": 5}, answers) == 1
    assert training.hard_target({"zzz": 10}, answers) is None


def test_instance_loss_skips_out_of_vocab():
    scene, q, params, cfg = random_instance(0)
    vocab = small_vocab()
    y = model.forward(scene, q, params, cfg).output
    assert training.instance_loss(qa(scene, q, {"zzz": 10}), y, vocab, "hard") is None
    assert training.instance_loss(qa(scene, q, {"a1": 10}), y, vocab, "hard").item() > 0


# ---------------------------------------------------------------- adadelta

def test_adadelta_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    training.adadelta_step(p, {"w": np.zeros(2)}, OptimizerState())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adadelta_three_steps_by_hand():
    rho, eps = 0.95, 1e-6
    p = {"w": np.array([0.5])}
    state = OptimizerState()
    eg = ex = 0.0
    w = 0.5
    for g in (0.4, -0.1, 0.3):
        training.adadelta_step(p, {"w": np.array([g])}, state, rho, eps)
        eg = rho * eg + (1 - rho) * g * g
        d = -math.sqrt(ex + eps) / math.sqrt(eg + eps) * g
        ex = rho * ex + (1 - rho) * d * d
        w += d
    assert p["w"][0] == pytest.approx(w, abs=1e-15)
    assert state.sq_grad["w"][0] == pytest.approx(eg) and state.sq_update["w"][0] == pytest.approx(ex)


def test_adadelta_descends_a_quadratic():
    p = {"w": np.array([3.0, -4.0])}
    state = OptimizerState()
    start = float((p["w"] ** 2).sum())
    for _ in range(2000):
        training.adadelta_step(p, {"w": 2 * p["w"]}, state)
    assert float((p["w"] ** 2).sum()) < 0.1 * start


def test_lr_scale_scales_update_not_accumulators():
    base, scaled = {"w": np.array([1.0])}, {"w": np.array([1.0])}
    s1, s2 = OptimizerState(), OptimizerState()
    for g in (0.5, 0.2):
        training.adadelta_step(base, {"w": np.array([g])}, s1)
        training.adadelta_step(scaled, {"w": np.array([g])}, s2, lr_scale={"w": 0.1})
    assert (scaled["w"][0] - 1.0) == pytest.approx(0.1 * (base["w"][0] - 1.0))
    np.testing.assert_array_equal(s1.sq_update["w"], s2.sq_update["w"])


def test_zero_lr_scale_freezes_parameter():
    p = {"W1": np.array([1.0]), "W2": np.array([1.0])}
    training.adadelta_step(p, {"W1": np.array([1.0]), "W2": np.array([1.0])}, OptimizerState(),
                           lr_scale={"W1": 0.0})
    assert p["W1"][0] == 1.0 and p["W2"][0] != 1.0


# ---------------------------------------------------------------- batching

def _paired(n_pairs, singles=0):
    scene, q, _, _ = random_instance(0)
    out = []
    for k in range(n_pairs):
        for tag in "ab":
            out.append(ingest.QaInstance(f"p{k}{tag}", scene, q, {"a0": 10}, f"p{k}"))
    out += [ingest.QaInstance(f"s{k}", scene, q, {"a0": 10}) for k in range(singles)]
    return out


def test_four_pairs_batch_four():
    batches = training.make_batches(_paired(4), 4, 0)
    assert len(batches) == 2 and all(len(b) == 4 for b in batches)


def test_unpaired_data_is_plainly_shuffled():
    insts = _paired(0, singles=10)
    batches = training.make_batches(insts, 3, 0)
    assert sorted(k for b in batches for k in b) == list(range(10))
    assert [len(b) for b in batches] == [3, 3, 3, 1]


def test_group_larger_than_batch_rejected():
    insts = _paired(1)
    with pytest.raises(ValueError, match="exceeds"):
        training.make_batches(insts + [ingest.QaInstance("x", insts[0].scene, insts[0].question,
                                                         {"a0": 10}, "p0")], 2, 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(0, 5), st.integers(2, 9))
@settings(max_examples=200, deadline=None)
def test_pairs_never_split(seed, n_pairs, singles, batch_size):
    insts = _paired(n_pairs, singles)
    batches = training.make_batches(insts, batch_size, seed)
    where = {k: b for b, ks in enumerate(batches) for k in ks}
    assert sorted(where) == list(range(len(insts)))
    for k in range(n_pairs):
        assert where[2 * k] == where[2 * k + 1]
    assert all(len(b) <= batch_size for b in batches)


def test_batching_is_deterministic():
    insts = _paired(20)
    assert training.make_batches(insts, 6, 5) == training.make_batches(insts, 6, 5)
    assert training.make_batches(insts, 6, 5) != training.make_batches(insts, 6, 6)


def test_subset_by_fraction_keeps_whole_pairs():
    insts = _paired(16)
    sub = training.subset_by_fraction(insts, 0.25, 0)
    assert len(sub) == 8
    ids = [i.pair_id for i in sub]
    assert all(ids.count(p) == 2 for p in ids)
    assert training.subset_by_fraction(insts, 1.0, 0) == insts


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(loss="l2")
    with pytest.raises(ValueError):
        TrainConfig(train_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    TrainConfig(batch_size=1, keep_pairs_together=False)


# ---------------------------------------------------------------- loop

def _toy_split(n_pairs, seed):
    rng = np.random.default_rng(seed)
    vocab = small_vocab(2)
    out = []
    for k in range(n_pairs):
        scene, q, _, _ = random_instance(int(rng.integers(1 << 30)), hidden=4)
        for tag, ans in (("a", "a0"), ("b", "a1")):
            node = scene.node_features.copy()
            node[:, 0] = 2.0 if ans == "a0" else -2.0
            out.append(ingest.QaInstance(f"{seed}-{k}{tag}", scene.replace(node_features=node), q,
                                         {ans: 10}, f"{seed}-{k}"))
    return out, vocab


def test_training_loss_decreases_and_is_deterministic(tmp_path):
    tr, vocab = _toy_split(12, 0)
    va, _ = _toy_split(4, 1)
    cfg = model.ModelConfig(hidden=8, t_q=1, t_s=1, dropout=0.3)
    tc = TrainConfig(batch_size=4, epochs=10, seed=3)
    r1 = training.train(tr, va, vocab, cfg, tc)
    r2 = training.train(tr, va, vocab, cfg, tc)
    assert r1.history[-1].train_loss < r1.history[0].train_loss
    assert r1.metric_name == "pairs_accuracy"
    training.write_metrics_log(tmp_path / "a.csv", r1.history)
    training.write_metrics_log(tmp_path / "b.csv", r2.history)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(np.array_equal(r1.params[k], r2.params[k]) for k in r1.params)
    best = max(r1.history, key=lambda r: r.val_metric)
    assert r1.best_metric == best.val_metric


def test_frozen_embeddings_stay_fixed():
    tr, vocab = _toy_split(4, 0)
    cfg = model.ModelConfig(hidden=4, t_q=1, t_s=1)
    init = training.init_params(cfg, vocab, NODE_DIM, 0)
    res = training.train(tr, tr, vocab, cfg, TrainConfig(batch_size=4, epochs=2, embedding_lr_scale=0.0),
                         init=init)
    np.testing.assert_array_equal(res.params["W1"], init["W1"])
    assert not np.array_equal(res.params["W6"], init["W6"])


def test_head_loss_mismatch_rejected():
    tr, vocab = _toy_split(2, 0)
    with pytest.raises(training.TrainingError, match="soft loss requires"):
        training.train(tr, tr, vocab, model.ModelConfig(hidden=4), TrainConfig(loss="soft", epochs=1))


def test_non_finite_loss_names_batch():
    tr, vocab = _toy_split(2, 0)
    cfg = model.ModelConfig(hidden=4, t_q=1, t_s=1)
    init = training.init_params(cfg, vocab, NODE_DIM, 0)
    init["b7"] = np.array([np.nan, 0.0])
    with pytest.raises(training.TrainingError, match="batch 0"):
        training.train(tr, tr, vocab, cfg, TrainConfig(batch_size=4, epochs=1), init=init)


def test_skipped_questions_are_counted():
    tr, vocab = _toy_split(2, 0)
    tr[0] = ingest.QaInstance(tr[0].qid, tr[0].scene, tr[0].question, {"zzz": 10}, tr[0].pair_id)
    cfg = model.ModelConfig(hidden=4, t_q=1, t_s=1)
    res = training.train(tr, tr[2:], vocab, cfg, TrainConfig(batch_size=4, epochs=1))
    assert res.history[0].skipped == 1
