import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aresgaze.gazenet import build_gaze_net
from aresgaze.geometry import angular_error_deg
from aresgaze.tensor import Tape, Tensor
from aresgaze.training import (
    LoocvResult, FoldResult, NonFiniteError, OptimizerState, TrainConfig, evaluate, fold_seed, loocv, lr_at,
    records_from_predictions, sgd_step, smooth_l1, train, warmup_steps,
)

from helpers import random_arrays, tiny_config


# loss ----------------------------------------------------------------------------

def test_smooth_l1_branch_values():
    pred = np.array([[0.0, 0.5], [1.0, 2.0]])
    for value, expected in zip(pred.ravel(), [0.0, 0.125, 0.5, 1.5]):
        loss = smooth_l1(Tensor(np.full((1, 2), value)), np.zeros((1, 2)))
        assert float(loss.data) == expected
    assert float(smooth_l1(Tensor(pred), np.zeros((2, 2))).data) == (0 + 0.125 + 0.5 + 1.5) / 4


def test_smooth_l1_gradient_is_continuous_at_one():
    grads = []
    for d in (1 - 1e-12, 1.0):
        x = Tensor(np.array([[d, 0.0]]), requires_grad=True)
        with Tape() as tape:
            loss = smooth_l1(x, np.zeros((1, 2)))
        grads.append(tape.backward(loss, [x])[0][0, 0])
    assert abs(grads[0] - grads[1]) < 1e-11


grid_values = st.lists(st.integers(-320, 320).map(lambda v: v / 64), min_size=2, max_size=2)  # no d**2 underflow


@settings(max_examples=100)
@given(grid_values, grid_values)
def test_smooth_l1_nonnegative_and_zero_only_on_match(a, b):
    loss = float(smooth_l1(Tensor(np.array([a])), np.array([b])).data)
    assert loss >= 0
    assert (loss == 0) == (a == b)


# schedule ------------------------------------------------------------------------

def test_schedule_spot_values():
    cfg = TrainConfig()
    total = 2020  # W = 101, cosine phase 1919 steps
    W = warmup_steps(total, cfg)
    assert W == 101
    assert lr_at(W - 1, total, cfg) == 0.128
    assert lr_at(W, total, cfg) == 0.128
    total = 2 * 1000 + 105  # W = 105, cosine phase of even length 2000
    W = warmup_steps(total, cfg)
    assert abs(lr_at(W + 1000, total, cfg) - 0.064) <= 1e-12
    assert lr_at(total - 1, total, cfg) <= 1e-4 * cfg.lr_max
    assert lr_at(0, total, cfg) == pytest.approx(cfg.lr_max / W)


@settings(max_examples=50)
@given(st.integers(21, 5000))
def test_schedule_shape(total):
    cfg = TrainConfig()
    W = warmup_steps(total, cfg)
    lrs = np.array([lr_at(s, total, cfg) for s in range(total)])
    assert np.all(np.diff(lrs[:W]) > 0)
    assert np.all(np.diff(lrs[W - 1:]) <= 0)
    assert lrs[W - 1] == lrs[W] == cfg.lr_max
    # no jump larger than one warmup increment anywhere
    assert np.max(np.abs(np.diff(lrs))) <= cfg.lr_max / W + 1e-15


def test_schedule_rejects_out_of_range_step():
    with pytest.raises(ValueError):
        lr_at(10, 10, TrainConfig())


# optimizer -----------------------------------------------------------------------

def make_params(rng):
    return [Tensor(rng.standard_normal((3, 2)), requires_grad=True), Tensor(rng.standard_normal(4), requires_grad=True)]


def test_plain_sgd_step():
    rng = np.random.default_rng(0)
    params = make_params(rng)
    before = [p.data.copy() for p in params]
    grads = [rng.standard_normal(p.shape) for p in params]
    cfg = TrainConfig(momentum=0.0, weight_decay=0.0)
    sgd_step(params, grads, OptimizerState(params), 0.1, cfg)
    for p, b, g in zip(params, before, grads):
        np.testing.assert_allclose(p.data, b - 0.1 * g, rtol=0, atol=1e-15)


def test_two_momentum_steps_closed_form():
    rng = np.random.default_rng(1)
    params = make_params(rng)
    before = [p.data.copy() for p in params]
    grads = [rng.standard_normal(p.shape) for p in params]
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
    state = OptimizerState(params)
    for _ in range(2):
        sgd_step(params, grads, state, 0.05, cfg)
    for p, b, g in zip(params, before, grads):
        np.testing.assert_allclose(p.data - b, -0.05 * g * (2 + 0.9), rtol=0, atol=1e-14)


def test_weight_decay_alone_decays_geometrically():
    p = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    cfg = TrainConfig(momentum=0.0, weight_decay=0.1)
    state = OptimizerState([p])
    for k in range(1, 6):
        sgd_step([p], [np.zeros(2)], state, 0.5, cfg)
        np.testing.assert_allclose(p.data, np.array([2.0, -3.0]) * 0.95 ** k, rtol=1e-14)


def test_zero_lr_is_identity():
    rng = np.random.default_rng(2)
    params = make_params(rng)
    before = [p.data.copy() for p in params]
    sgd_step(params, [rng.standard_normal(p.shape) for p in params], OptimizerState(params), 0.0, TrainConfig())
    for p, b in zip(params, before):
        np.testing.assert_array_equal(p.data, b)


def test_velocity_mirrors_parameters():
    params = make_params(np.random.default_rng(0))
    state = OptimizerState(params)
    assert [v.shape for v in state.velocity] == [p.shape for p in params]
    assert all(np.all(v == 0) for v in state.velocity)


def test_non_finite_gradient_aborts_step():
    params = make_params(np.random.default_rng(0))
    before = [p.data.copy() for p in params]
    grads = [np.zeros((3, 2)), np.array([0.0, np.nan, 0.0, 0.0])]
    with pytest.raises(NonFiniteError):
        sgd_step(params, grads, OptimizerState(params), 0.1, TrainConfig())
    for p, b in zip(params, before):
        np.testing.assert_array_equal(p.data, b)


# training loop -------------------------------------------------------------------

def test_one_epoch_of_96_samples_is_two_steps():
    cfg = tiny_config(face=16, eye=16)
    data = random_arrays(cfg, 2, 48)
    model = build_gaze_net(cfg, rng=np.random.default_rng(0), dtype=np.float64)
    result = train(model, data, TrainConfig(epochs=1, batch_size=48, lr_max=0.01))
    assert result.steps == 2 and len(result.history) == 1


def test_training_is_deterministic():
    cfg = tiny_config(face=16, eye=16)
    data = random_arrays(cfg, 2, 10, dtype=np.float32)

    def run():
        model = build_gaze_net(cfg, rng=np.random.default_rng(5))
        hist = train(model, data, TrainConfig(epochs=2, batch_size=8, lr_max=0.05, seed=3)).history
        return hist, [p.data.copy() for p in model.parameters()]

    (h1, p1), (h2, p2) = run(), run()
    assert h1 == h2
    for a, b in zip(p1, p2):
        np.testing.assert_array_equal(a, b)


def test_empty_and_diverging_training():
    cfg = tiny_config(face=16, eye=16)
    data = random_arrays(cfg, 2, 4)
    model = build_gaze_net(cfg, rng=np.random.default_rng(0), dtype=np.float64)
    with pytest.raises(ValueError):
        train(model, data.subset([]), TrainConfig(epochs=1))
    data.gaze[:] = np.inf
    with pytest.raises(NonFiniteError) as info:
        train(model, data, TrainConfig(epochs=2, batch_size=4))
    assert info.value.history == []


# evaluation ----------------------------------------------------------------------

def test_constant_predictor_error():
    cfg = tiny_config(face=16, eye=16)
    data = random_arrays(cfg, 1, 4)
    data.gaze[:] = [[0.0, 0.1], [0.0, -0.1], [0.0, 0.1], [0.0, -0.1]]
    records, mean = records_from_predictions(np.zeros((4, 2)), data)
    assert abs(mean - math.degrees(0.1)) < 1e-9
    assert abs(mean - 5.7296) < 1e-4
    assert len(records) == 4
    _, perfect = records_from_predictions(data.gaze.copy(), data)
    assert perfect < 1e-5


def test_evaluate_record_errors_are_consistent():
    cfg = tiny_config(face=16, eye=16)
    data = random_arrays(cfg, 1, 6)
    model = build_gaze_net(cfg, rng=np.random.default_rng(0), dtype=np.float64)
    records, mean = evaluate(model, data, batch_size=4)
    assert len(records) == 6
    for r in records:
        assert r.error_deg == pytest.approx(angular_error_deg(r.pred, r.gt), abs=1e-12)
    assert mean == pytest.approx(np.mean([r.error_deg for r in records]), abs=1e-12)
    with pytest.raises(ValueError):
        evaluate(model, data.subset([]))


# leave-one-subject-out -----------------------------------------------------------

def test_loocv_partition_audit():
    cfg = tiny_config(face=16, eye=16)
    data = random_arrays(cfg, 3, 4, dtype=np.float32)
    result = loocv(data, cfg, TrainConfig(epochs=1, batch_size=4, lr_max=0.01))
    assert len(result.folds) == 3
    train_counts = {sid: 0 for sid in data.sample_ids}
    eval_counts = {sid: 0 for sid in data.sample_ids}
    for fold in result.folds:
        assert fold.subject not in fold.train_subjects
        assert all(not sid.startswith(fold.subject + "_") for sid in fold.train_sample_ids)
        assert {r.subject_id for r in fold.records} == {fold.subject}
        for sid in fold.train_sample_ids:
            train_counts[sid] += 1
        for r in fold.records:
            eval_counts[r.sample_id] += 1
    assert set(train_counts.values()) == {2} and set(eval_counts.values()) == {1}
    means = [np.mean([r.error_deg for r in f.records]) for f in result.folds]
    assert abs(result.overall - sum(means) / 3) <= 1e-12


def test_overall_weights_subjects_equally():
    def fold(subject, errors):
        return FoldResult(subject, [], [], float(np.mean(errors)), [], [])

    result = LoocvResult([fold("a", [2.0]), fold("b", [4.0, 4.0, 4.0]), fold("c", [6.0, 6.0])])
    assert result.overall == 4.0


def test_loocv_needs_two_subjects():
    cfg = tiny_config(face=16, eye=16)
    data = random_arrays(cfg, 1, 4)
    with pytest.raises(ValueError):
        loocv(data, cfg, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        loocv(random_arrays(cfg, 2, 2), cfg, TrainConfig(epochs=1), subjects=["nobody"])


def test_fold_seeds_are_distinct_and_stable():
    seeds = [fold_seed(0, k) for k in range(8)]
    assert len(set(seeds)) == 8
    assert seeds == [fold_seed(0, k) for k in range(8)]
    assert fold_seed(1, 0) != fold_seed(0, 0)
