import math

import numpy as np
import pytest

from laurel.data import gen_gaussian_mixture, gen_spirals
from laurel.model import ModelConfig, build
from laurel.tensor import Tensor, add, backward, mul, scale
from laurel.training import (
    SGD,
    DivergenceError,
    TrainConfig,
    accuracy,
    predict,
    run_trial,
    run_trials,
    train_model,
    train_step,
)

MC = ModelConfig(input_dim=2, width=8, num_blocks=2, num_classes=3, hidden_mult=2)
TRAIN = gen_spirals(3, 40, 0.05, 0)
EVAL = gen_spirals(3, 20, 0.05, 1, "eval")


def quadratic_run(momentum, steps, p0=3.0, c=1.0, k=2.0, lr=0.1):
    p = Tensor(p0, True)
    opt = SGD({"p": p}, momentum)
    out = []
    for _ in range(steps):
        d = add(p, Tensor(-c))
        opt.step(backward(scale(mul(d, d), k / 2)), lr)
        out.append(p.item())
    return out


def test_gradient_descent_iterates():
    # p <- p - 0.1 * 2 (p - 1) from p = 3
    assert quadratic_run(0.0, 3) == pytest.approx([2.6, 2.28, 2.024], abs=1e-12)


def test_momentum_recurrence():
    # v1 = -0.4, p1 = 2.6; v2 = 0.9*(-0.4) - 0.1*3.2 = -0.68, p2 = 1.92
    assert quadratic_run(0.9, 2) == pytest.approx([2.6, 1.92], abs=1e-12)


def test_zero_lr_leaves_parameters():
    m = build(MC.replace(variant="rw+lr+pa", rank=2))
    before = m.flat().copy()
    opt = SGD(m.parameters())
    x, y = TRAIN.features[:16], TRAIN.labels[:16]
    loss = train_step(m, (x, y), opt, 0.0)
    assert math.isfinite(loss)
    assert np.array_equal(m.flat(), before)


def test_train_step_reduces_loss():
    m = build(MC)
    opt = SGD(m.parameters(), 0.0)
    batch = (TRAIN.features, TRAIN.labels)
    first = train_step(m, batch, opt, 0.05)
    for _ in range(20):
        last = train_step(m, batch, opt, 0.05)
    assert last < first


def test_train_step_detects_divergence():
    m = build(MC)
    m.backbone["head.b"].data[0] = np.nan
    with pytest.raises(DivergenceError, match="non-finite"):
        train_step(m, (TRAIN.features[:4], TRAIN.labels[:4]), SGD(m.parameters()), 0.1)


def test_lr_schedule():
    tc = TrainConfig(steps=110, lr=1.0, warmup_steps=10)
    assert tc.lr_at(0) == pytest.approx(0.1)
    assert tc.lr_at(9) == pytest.approx(1.0)
    assert tc.lr_at(10) == pytest.approx(1.0)
    assert tc.lr_at(60) == pytest.approx(0.5)
    assert TrainConfig(steps=5, lr=0.3, cosine=False).lr_at(4) == 0.3


def test_train_config_validation():
    assert TrainConfig(steps=7).eval_every == 7
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(steps=10, eval_every=11)
    with pytest.raises(ValueError):
        TrainConfig(steps=10, lr=-1)


def test_untrained_accuracy_at_zero_lr():
    tc = TrainConfig(steps=5, lr=0.0, eval_every=5)
    result, records = run_trial(MC, tc, TRAIN, EVAL, seed=3)
    assert result.best_eval_accuracy_at_1 == accuracy(build(MC.replace(seed=3)), EVAL)
    assert [r.step for r in records] == [5]


def test_trial_is_deterministic():
    tc = TrainConfig(steps=30, lr=0.05, eval_every=10)
    mc = MC.replace(variant="rw+lr+pa", rank=2)
    a = run_trial(mc, tc, TRAIN, EVAL, seed=1)
    b = run_trial(mc, tc, TRAIN, EVAL, seed=1)
    assert a[0] == b[0]
    assert [r.to_dict() for r in a[1]] == [r.to_dict() for r in b[1]]


def test_evaluation_points():
    tc = TrainConfig(steps=25, lr=0.05, eval_every=10)
    result, records = run_trial(MC, tc, TRAIN, EVAL, seed=0)
    assert [r.step for r in records] == [10, 20, 25]
    best = max(records, key=lambda r: r.eval_accuracy)
    assert result.best_eval_accuracy_at_1 == best.eval_accuracy
    assert result.step_of_best == best.step


def test_divergence_is_recorded():
    tc = TrainConfig(steps=20, lr=1e6, momentum=0.0, eval_every=5)
    result, records = run_trial(MC, tc, TRAIN, EVAL, seed=0)
    assert result.failed and "non-finite" in result.error
    assert records[-1].eval_accuracy is None


def test_training_does_not_mutate_data():
    before = TRAIN.features.copy()
    run_trial(MC, TrainConfig(steps=5), TRAIN, EVAL, seed=0)
    assert np.array_equal(TRAIN.features, before)


def test_softmax_weights_stay_normalized():
    data = gen_gaussian_mixture(4, 8, 25, 0.3, 0)
    mc = ModelConfig(8, 8, 3, 4, 2, "rw+lr", 2)
    model, result, _ = train_model(mc, TrainConfig(steps=100, lr=0.05), data, data, 0)
    assert not result.failed
    for rw in model.residual.rw:
        a, b = rw.weights()
        assert abs(a.item() + b.item() - 1.0) < 1e-12
        assert rw.alpha_logit.item() != 0.0  # the scalars did move


def test_predict_tie_breaks_low():
    m = build(MC)
    for t in m.parameters().values():
        t.data[...] = 0.0
    assert not predict(m, TRAIN.features).any()


def test_run_trials_aggregation():
    tc = TrainConfig(steps=20, lr=0.05, eval_every=10)
    s = run_trials(MC, tc, TRAIN, EVAL, seeds=[0, 1, 2, 3, 4])
    accs = [r.best_eval_accuracy_at_1 for r in s.results]
    assert [r.seed for r in s.results] == [0, 1, 2, 3, 4]
    assert min(accs) <= s.mean <= max(accs)
    assert s.std == pytest.approx(np.std(accs, ddof=1), abs=1e-15)
    assert s.median == float(np.median(accs))
    assert s.failures == 0


def test_run_trials_single_and_repeated_seed():
    tc = TrainConfig(steps=10, lr=0.05)
    assert run_trials(MC, tc, TRAIN, EVAL, seeds=[2]).std == 0.0
    s = run_trials(MC, tc, TRAIN, EVAL, seeds=[2, 2])
    assert s.results[0] == s.results[1] and s.std == 0.0


def test_run_trials_counts_failures():
    tc = TrainConfig(steps=10, lr=1e6, momentum=0.0)
    s = run_trials(MC, tc, TRAIN, EVAL, seeds=[0, 1])
    assert s.failures == 2 and math.isnan(s.mean)


def test_parallel_matches_serial():
    tc = TrainConfig(steps=15, lr=0.05, eval_every=5)
    serial = run_trials(MC, tc, TRAIN, EVAL, seeds=[0, 1, 2])
    parallel = run_trials(MC, tc, TRAIN, EVAL, seeds=[0, 1, 2], workers=2)
    assert serial.results == parallel.results
    assert serial.mean == parallel.mean


def test_run_trials_needs_seed():
    with pytest.raises(ValueError):
        run_trials(MC, TrainConfig(steps=1), TRAIN, EVAL, seeds=[])
