import math

import numpy as np
import pytest

from taskgroup import clustering as C
from taskgroup import model as M
from taskgroup import trainer as T
from taskgroup.data import metadata_values
from taskgroup.synth import synth_generate

SPEC = M.ModelSpec(conv_blocks=((4,), (6,)), head_hidden_units=4)


@pytest.fixture(scope="module")
def tiny():
    return synth_generate(num_groups=3, tasks_per_group=2, seq_length=60, n_examples=400, n_validation=100,
                          n_test=100, motif_length=6, positive_rate=0.45, seed=3)


def cfg(**kw):
    base = dict(batch_size=16, max_steps=40, validate_every=10, patience=2, learning_rate=0.05, seed=1)
    return T.TrainingConfig(**{**base, **kw})


def same_params(a, b):
    return all(np.array_equal(p.values, q.values) for p, q in zip(a.parameters(), b.parameters()))


# ---------------------------------------------------------------- early stopping

def test_early_stop_examples():
    assert not any(T.early_stop_check([1.0 / (i + 1) for i in range(n)], 25) for n in range(1, 60))
    losses = [1.0] + [1.0] * 24
    assert not T.early_stop_check(losses, 25)
    assert T.early_stop_check(losses + [1.5], 25)        # round 26
    assert T.early_stop_check([0.5, 0.6], 1)
    with pytest.raises(ValueError):
        T.early_stop_check([], 3)


def test_config_invariants():
    for bad in ({"batch_size": 0}, {"patience": 0}, {"validate_every": 0}, {"learning_rate": 0.0}):
        with pytest.raises(ValueError):
            T.TrainingConfig(**bad)
    d = T.TrainingConfig()
    assert (d.batch_size, d.validate_every, d.patience, d.max_steps) == (64, 16_000, 25, 1_920_000)


def test_training_log_record_and_jsonl(tmp_path):
    log = T.TrainingLog()
    assert log.record(10, 2.0) and not log.record(20, 2.0) and log.record(30, 1.5)
    assert log.best_step == 30
    with pytest.raises(ValueError):
        log.record(30, 1.0)
    log.stop_reason = "max_steps"
    log.to_jsonl(tmp_path / "log.jsonl")
    back = T.TrainingLog.from_jsonl(tmp_path / "log.jsonl")
    assert back.entries == log.entries and back.best_step == 30 and back.stop_reason == "max_steps"


def test_derive_seed_order_independent():
    assert T.derive_seed(4, ["b", "a"]) == T.derive_seed(4, ["a", "b"])
    assert T.derive_seed(4, ["a"]) != T.derive_seed(5, ["a"])


# ---------------------------------------------------------------- train_joint

@pytest.mark.parametrize("patience,best_round", [(25, 3), (2, 1), (4, 6)])
def test_stops_exactly_patience_rounds_after_minimum(tiny, monkeypatch, patience, best_round):
    every = 3
    calls = []

    def scripted(model, x, y, batch_size=1024):
        calls.append(model.state())
        r = len(calls)
        return 10.0 - r if r <= best_round else 20.0 + r

    monkeypatch.setattr(T, "validation_loss", scripted)
    res = T.train_joint(tiny, [0, 1], cfg(validate_every=every, patience=patience, max_steps=10**6), SPEC)
    assert res.log.stop_reason == "patience_exhausted"
    assert res.log.best_step == best_round * every
    assert res.log.entries[-1][0] == res.log.best_step + patience * every
    assert [s for s, _ in res.log.entries] == list(range(every, (best_round + patience) * every + 1, every))
    # best-checkpoint contract: parameters are those seen at the best round
    for p, v in zip(res.model.parameters(), calls[best_round - 1]):
        np.testing.assert_array_equal(p.values, v)


def test_returned_model_has_min_logged_loss(tiny):
    res = T.train_joint(tiny, [0, 1, 2], cfg(max_steps=50, patience=10), SPEC)
    labels = tiny.labels[:, res.task_indices].astype(np.float32)
    val = tiny.split_indices(1)
    loss = T.validation_loss(res.model, tiny.onehot(val), labels[val])
    assert loss == pytest.approx(min(res.log.losses), rel=1e-6)
    assert res.log.losses[[s for s, _ in res.log.entries].index(res.log.best_step)] == res.log.best_loss


def test_max_steps_stop_and_final_validation(tiny):
    res = T.train_joint(tiny, [0], cfg(max_steps=25, validate_every=10, patience=50), SPEC)
    assert res.log.stop_reason == "max_steps"
    assert [s for s, _ in res.log.entries] == [10, 20, 25]


def test_reproducible(tiny):
    a = T.train_joint(tiny, ["g0_t0", "g1_t1"], cfg(), SPEC)
    b = T.train_joint(tiny, [3, 0], cfg(), SPEC)
    assert a.log.entries == b.log.entries and a.log.best_step == b.log.best_step
    assert same_params(a.model, b.model)
    assert a.task_indices == [0, 3] and a.model.task_ids == ["g0_t0", "g1_t1"]


def test_stl_default_rate_and_joint_requires_rate(tiny):
    res = T.train_joint(tiny, [2], cfg(learning_rate=None, max_steps=10), SPEC)
    assert res.log.learning_rate == T.SINGLE_TASK_LR == 0.01
    with pytest.raises(ValueError, match="learning rate"):
        T.train_joint(tiny, [0, 1], cfg(learning_rate=None), SPEC)
    with pytest.raises(ValueError, match="empty"):
        T.train_joint(tiny, [], cfg(), SPEC)


def test_non_finite_loss_aborts_with_step(tiny, monkeypatch):
    real_build = M.build

    def poisoned(*a, **k):
        m = real_build(*a, **k)
        m.out_bias.values[:] = np.nan
        return m

    monkeypatch.setattr(M, "build", poisoned)
    with pytest.raises(T.TrainingDivergedError, match="step 1"):
        T.train_joint(tiny, [0, 1], cfg(), SPEC)


# ---------------------------------------------------------------- lr search

def test_lr_search_single_task_skips_training():
    def never(lr):
        raise AssertionError("should not train")
    assert T.lr_search(never, "single_task") == 0.01


def test_lr_search_grids():
    trials = {}
    best = T.lr_search(lambda lr: (lr - 0.11) ** 2, "joint", trials)
    assert list(trials)[:7] == [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35]
    assert list(trials)[7:] == [0.075, 0.125]
    assert best == 0.10
    assert T.phase_two_grid(0.10) == [0.075, 0.125]
    assert T.phase_two_grid(0.35) == [0.325, 0.375]


def test_lr_search_ties_prefer_smaller_and_divergence_is_inf():
    assert T.lr_search(lambda lr: 1.0, "joint") == 0.025

    def diverge_big(lr):
        if lr > 0.2:
            raise T.TrainingDivergedError(3, math.nan)
        return -lr
    assert T.lr_search(diverge_big, "joint") == 0.2


def test_lr_search_all_diverged():
    with pytest.raises(T.LRSearchError, match="diverged"):
        T.lr_search(lambda lr: math.inf, "joint")


# ---------------------------------------------------------------- grouping modes

def test_all_in_one_is_smtl(tiny):
    res = T.run_grouping_mode(tiny, C.all_in_one(tiny.num_tasks), cfg(), SPEC)
    direct = T.train_joint(tiny, list(range(tiny.num_tasks)), cfg(), SPEC)
    assert len(res) == 1 and same_params(res[0].model, direct.model)


def test_singletons_reproduce_stl_bit_identically(tiny):
    c = cfg(learning_rate=None)
    res = T.run_grouping_mode(tiny, C.singletons(tiny.num_tasks), c, SPEC)
    for t, r in enumerate(res):
        direct = T.train_joint(tiny, [t], c, SPEC)
        assert r.task_indices == [t] and same_params(r.model, direct.model)
        assert r.log.entries == direct.log.entries


def test_metadata_grouping_three_modalities(tiny):
    for i, m in enumerate(tiny.task_metadata):
        m["modality"] = ["dnase", "histone", "tf"][i % 3]
    g = C.metadata_grouping(metadata_values(tiny, "modality"), tiny.task_ids, "modality")
    assert g.K == 3
    res = T.run_grouping_mode(tiny, g, cfg(max_steps=10), SPEC)
    assert [r.task_indices for r in res] == [[0, 3], [1, 4], [2, 5]]


def test_worker_pool_matches_sequential(tiny):
    groups = [[0, 1], [2, 3], [4, 5]]
    seq = T.run_grouping_mode(tiny, groups, cfg(max_steps=20), SPEC)
    par = T.run_grouping_mode(tiny, groups, cfg(max_steps=20), SPEC, workers=2)
    for a, b in zip(seq, par):
        assert same_params(a.model, b.model) and a.log.entries == b.log.entries


def test_grouping_must_partition(tiny):
    with pytest.raises(ValueError, match="partition"):
        T.run_grouping_mode(tiny, [[0, 1], [1, 2, 3, 4, 5]], cfg(), SPEC)


def test_predict_split_columns(tiny):
    res = T.train_joint(tiny, [4, 1], cfg(max_steps=10), SPEC)
    probs, labels = T.predict_split(res, tiny)
    test = tiny.split_indices(2)
    assert probs.shape == (len(test), 2)
    np.testing.assert_array_equal(labels, tiny.labels[test][:, [1, 4]])
