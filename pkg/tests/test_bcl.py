import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saddle_cl.bcl import (Adam, TaskMemory, TrainerConfig, bcl_train_task, l2_penalty,
                           l2_penalty_grad, l2_train_task, naive_rehearsal_train_task,
                           retained_accuracy, sequential_train_task, task_accuracy, train_stream,
                           update_task_memory)
from saddle_cl.tasks import (Dataset, SyntheticSpec, make_split_tasks, make_synthetic_tasks)
from saddle_cl.tensor import MlpModel, init_mlp, predict

FAST = dict(learning_rate=0.1, batch_size=32, rho=1)


def stream_of(K=2, samples=200, dim=10, sep=6.0, seed=0, scenario="ICL"):
    return make_synthetic_tasks(SyntheticSpec(K=K, dim=dim, samples=samples, separation=sep,
                                              seed=seed, scenario=scenario))


def fresh(stream, seed=0, hidden=(16,)):
    return init_mlp([stream[0].train.images.shape[1], *hidden, stream.output_dim], seed=seed)


# ------------------------------------------------------------------ config


def test_config_rejects_zero_zeta():
    with pytest.raises(ValueError, match="zeta must be ≥ 1"):
        TrainerConfig(zeta=0)


@pytest.mark.parametrize("kw", [dict(beta=1.5), dict(beta=-0.1), dict(learning_rate=0.0),
                                dict(batch_size=0), dict(ascent_rule="sign"),
                                dict(h_grad_mode="exact"), dict(optimizer="rmsprop"),
                                dict(gamma="weird"), dict(buffer_capacity=-1)])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        TrainerConfig(**kw)


def test_inner_step_falls_back_to_learning_rate():
    assert TrainerConfig(inner_step=0.0, learning_rate=0.3).temp_step == 0.3
    assert TrainerConfig(inner_step=0.02).temp_step == 0.02
    assert TrainerConfig(batch_size=64).replay_size == 64


# ------------------------------------------------------------------ memory


def test_memory_after_first_task_fills_capacity():
    s = stream_of(K=2)
    mem = update_task_memory(TaskMemory(100, seed=0), s[0])
    assert len(mem) == 100 and mem.counts() == {0: 100}


def test_memory_holds_at_most_the_task_size():
    s = stream_of(K=1, samples=50)
    mem = update_task_memory(TaskMemory(100), s[0])
    assert len(mem) == len(s[0].train) == 40


def test_memory_splits_evenly_after_second_task():
    s = stream_of(K=2)
    mem = TaskMemory(100, seed=3)
    for t in s.tasks:
        mem = update_task_memory(mem, t)
    assert mem.counts() == {0: 50, 1: 50}


@settings(max_examples=15, deadline=None)
@given(capacity=st.integers(1, 120), K=st.integers(1, 6), seed=st.integers(0, 100))
def test_memory_stays_balanced_and_bounded(capacity, K, seed):
    s = stream_of(K=K, samples=150, dim=3, seed=seed)
    mem = TaskMemory(capacity, seed=seed)
    for t in s.tasks:
        mem = update_task_memory(mem, t)
        assert len(mem) <= capacity
        assert mem.task_ids.max() == t.id
        counts = list(mem.counts().values())
        if len(counts) == t.id + 1:
            assert max(counts) - min(counts) <= 1


def test_memory_refuses_current_or_future_task_samples():
    s = stream_of(K=3)
    mem = update_task_memory(update_task_memory(TaskMemory(60), s[0]), s[1])
    with pytest.raises(ValueError):
        update_task_memory(mem, s[1])
    with pytest.raises(ValueError):
        update_task_memory(mem, s[0])


def test_memory_entries_come_from_their_task():
    s = stream_of(K=2)
    mem = TaskMemory(40)
    for t in s.tasks:
        mem = update_task_memory(mem, t)
    for x, tid in zip(mem.images, mem.task_ids):
        assert any(np.array_equal(x, row) for row in s[tid].train.images)


def test_memory_update_is_seeded():
    s = stream_of(K=2)
    a = update_task_memory(update_task_memory(TaskMemory(30, seed=5), s[0]), s[1])
    b = update_task_memory(update_task_memory(TaskMemory(30, seed=5), s[0]), s[1])
    assert np.array_equal(a.images, b.images)


def test_empty_memory_sample_is_none():
    assert TaskMemory(10).sample(5, np.random.default_rng(0)) is None


# -------------------------------------------------------------- baselines


def test_rehearsal_with_empty_memory_is_sequential_bitwise():
    s = stream_of(K=1)
    cfg = TrainerConfig(**FAST, seed=4)
    m0 = fresh(s, 4)
    a, ta = sequential_train_task(m0, s[0], cfg)
    b, tb = naive_rehearsal_train_task(m0, s[0], TaskMemory(100, seed=4), cfg)
    assert a.flat().tobytes() == b.flat().tobytes()
    assert ta == tb


def test_l2_with_zero_lambda_is_sequential_bitwise():
    s = stream_of(K=2)
    cfg = TrainerConfig(**FAST, seed=1)
    m0, _ = sequential_train_task(fresh(s, 1), s[0], cfg)
    a, ta = sequential_train_task(m0, s[1], cfg)
    b, tb = l2_train_task(m0, s[1], m0, 0.0, cfg)
    assert a.flat().tobytes() == b.flat().tobytes()
    assert ta == tb


def test_stiff_anchor_barely_moves():
    s = stream_of(K=2)
    anchor = fresh(s, 2)
    out, _ = l2_train_task(anchor, s[1], anchor, 1e6, TrainerConfig(**FAST))
    assert np.max(np.abs(out.flat() - anchor.flat())) < 1e-3


def test_stiff_anchor_under_adam_stays_within_one_step():
    # Adam normalizes every step to about lr, so a stiff pull cannot pin the
    # parameters tighter than that
    s = stream_of(K=2)
    anchor = fresh(s, 2)
    out, _ = l2_train_task(anchor, s[1], anchor, 1e6, TrainerConfig(**FAST, optimizer="adam"))
    assert np.max(np.abs(out.flat() - anchor.flat())) <= FAST["learning_rate"]


def test_penalty_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    anchor = init_mlp([3, 4, 2], seed=0)
    model = anchor.with_params([p + rng.standard_normal(p.shape) for p in anchor.params()])
    lam, h = 0.7, 1e-6
    ana = np.concatenate([g.ravel() for g in l2_penalty_grad(model, anchor, lam)])
    vec = model.flat()
    num = np.empty_like(vec)
    for j in range(vec.size):
        e = np.zeros_like(vec)
        e[j] = h
        num[j] = (l2_penalty(model.from_flat(vec + e), anchor, lam)
                  - l2_penalty(model.from_flat(vec - e), anchor, lam)) / (2 * h)
    assert np.max(np.abs(num - ana)) < 1e-6


def test_negative_lambda_rejected():
    s = stream_of(K=1)
    with pytest.raises(ValueError):
        l2_train_task(fresh(s), s[0], fresh(s), -1.0, TrainerConfig(**FAST))


def test_rehearsal_beats_sequential_on_two_tasks():
    seq, reh = [], []
    for seed in range(10):
        s = stream_of(K=2, samples=300, seed=seed)
        cfg = TrainerConfig(learning_rate=0.1, batch_size=32, buffer_capacity=100, seed=seed)
        seq.append(train_stream("sequential", s, cfg, (16,))[1].ra)
        reh.append(train_stream("naive_rehearsal", s, cfg, (16,))[1].ra)
    assert np.mean(reh) >= np.mean(seq)


def test_rehearsal_trace_losses_finite_and_nonnegative():
    s = stream_of(K=2)
    cfg = TrainerConfig(**FAST)
    mem = update_task_memory(TaskMemory(50), s[0])
    _, trace = naive_rehearsal_train_task(fresh(s), s[1], mem, cfg)
    losses = [r.current_loss for r in trace]
    assert all(math.isfinite(v) and v >= 0 for v in losses)


def test_adam_state_persists_within_a_task():
    opt = Adam(0.1)
    model = MlpModel([np.array([[1.0]])], [np.array([0.0])], ["identity"])
    g = [np.array([[1.0]]), np.array([0.0])]
    m1 = opt.step(model, g)
    # bias-corrected first step moves by lr * sign(g)
    assert m1.weights[0][0, 0] == pytest.approx(0.9, abs=1e-6)
    opt.step(m1, g)
    assert opt.t == 2


# -------------------------------------------------------------------- BCL


def test_bcl_trace_length_is_epochs_times_batches():
    s = stream_of(K=1, samples=250)
    cfg = TrainerConfig(rho=3, batch_size=64, zeta=1, learning_rate=0.1)
    _, trace = bcl_train_task(fresh(s), s[0], TaskMemory(50), cfg)
    assert len(trace) == 3 * math.ceil(len(s[0].train) / 64)
    assert [r.i for r in trace] == list(range(len(trace)))


def test_bcl_single_inner_step_gives_finite_trace():
    s = stream_of(K=2)
    cfg = TrainerConfig(**FAST, zeta=1)
    mem = update_task_memory(TaskMemory(50), s[0])
    _, trace = bcl_train_task(fresh(s), s[1], mem, cfg)
    for r in trace:
        vals = [r.beta_term, r.forgetting_term, r.generalization_term, r.h_total]
        assert all(math.isfinite(v) for v in vals)
        assert r.h_total == pytest.approx(r.beta_term + r.forgetting_term + r.generalization_term,
                                          abs=1e-12)
        assert r.k == 1


def test_bcl_first_task_learns_separable_blobs():
    s = stream_of(K=1, samples=500, sep=10.0, scenario="IDL")
    cfg = TrainerConfig(learning_rate=0.1, batch_size=32, rho=2, ascent_step=0.05)
    model, _ = bcl_train_task(fresh(s), s[0], TaskMemory(100), cfg)
    t = s[0]
    acc = np.mean(predict(model, t.train.images, t.mask(len(t.train))) == t.targets(t.train.labels))
    assert acc >= 0.95


def test_bcl_does_not_touch_memory_or_inputs():
    s = stream_of(K=2)
    mem = update_task_memory(TaskMemory(50), s[0])
    before = (mem.images.copy(), s[1].train.images.copy())
    bcl_train_task(fresh(s), s[1], mem, TrainerConfig(**FAST))
    assert np.array_equal(mem.images, before[0]) and np.array_equal(s[1].train.images, before[1])


def test_bcl_current_batch_only_reduces_to_scaled_sequential():
    s = stream_of(K=1)
    m0 = fresh(s, 3)
    seq, _ = sequential_train_task(m0, s[0], TrainerConfig(**FAST, seed=3))
    cfg = TrainerConfig(batch_size=32, rho=1, learning_rate=0.2, beta=0.5,
                        h_grad_mode="current_batch_only", seed=3)
    bcl, _ = bcl_train_task(m0, s[0], TaskMemory(10, seed=3), cfg)
    np.testing.assert_allclose(bcl.flat(), seq.flat(), rtol=1e-9, atol=1e-12)


def test_bcl_wrong_head_size_rejected():
    s = stream_of(K=2)
    with pytest.raises(ValueError):
        bcl_train_task(init_mlp([10, 3], seed=0), s[0], TaskMemory(10), TrainerConfig(**FAST))


def test_bcl_is_deterministic():
    s = stream_of(K=2)
    cfg = TrainerConfig(**FAST, seed=9)
    a = train_stream("bcl", s, cfg, (8,))
    b = train_stream("bcl", s, cfg, (8,))
    assert a[0].flat().tobytes() == b[0].flat().tobytes()
    assert a[2] == b[2]


# -------------------------------------------------------------- evaluation


def one_hot_stream():
    eye = np.eye(10)
    labels = np.repeat(np.arange(10), 5)
    ds = Dataset(eye[labels], labels, 10)
    return make_split_tasks(ds, [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)], "ICL")


def test_perfect_classifier_scores_one():
    s = one_hot_stream()
    model = MlpModel([np.eye(10)], [np.zeros(10)], ["identity"])
    m = retained_accuracy(model, s)
    assert m.ra == 1.0 and m.per_task == [1.0] * 5


def test_random_guesser_scores_about_half():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, size=1250)
    ds = Dataset(rng.standard_normal((1250, 5)), labels, 2)
    s = make_split_tasks(ds, [(0, 1)], "IDL", seed=0)
    assert len(s[0].test) == 250
    test = Dataset(rng.standard_normal((1000, 5)), rng.integers(0, 2, size=1000), 2)
    s = make_split_tasks(ds, [(0, 1)], "IDL", test=test)
    ra = retained_accuracy(init_mlp([5, 2], seed=1), s).ra
    assert abs(ra - 0.5) <= 0.05


def test_ra_is_mean_of_reported_accuracies():
    s = stream_of(K=3)
    model, metrics, _ = train_stream("sequential", s, TrainerConfig(**FAST), (8,))
    assert metrics.ra == pytest.approx(float(np.mean(metrics.per_task)), abs=1e-12)
    assert metrics.accuracy_matrix[-1].tolist() == metrics.per_task
    assert np.isnan(metrics.accuracy_matrix[0, 1])
    assert 0.0 <= metrics.ra <= 1.0
    assert metrics.per_task == [task_accuracy(model, t) for t in s.tasks]


def test_itl_accuracy_uses_the_task_head():
    s = stream_of(K=2, scenario="ITL")
    model, metrics, _ = train_stream("sequential", s, TrainerConfig(**FAST), (8,))
    assert len(metrics.per_task) == 2


def test_scenario_mismatch_rejected():
    s = stream_of(K=2)
    with pytest.raises(ValueError):
        retained_accuracy(init_mlp([10, 3], seed=0), s)


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        train_stream("ewc", stream_of(K=1), TrainerConfig())
