import math

import numpy as np
import pytest

from msacnn import tensor as tc
from msacnn.dataset import generate_synthetic
from msacnn.errors import UsageError
from msacnn.model import build, make_config
from msacnn.trainer import AdamState, TrainConfig, adam_step, train


def test_first_step_is_sign_sized():
    theta = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    p = {"w": theta.copy()}
    adam_step(p, {"w": g}, AdamState(), lr=0.01)
    assert np.allclose(p["w"] - theta, -0.01 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_zero_gradient_leaves_parameters():
    p = {"w": np.array([1.5, -0.25])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert p["w"].tolist() == [1.5, -0.25]


def test_three_step_trajectory_matches_recurrence():
    lr, wd, b1, b2, eps = 0.05, 0.01, 0.9, 0.999, 1e-8
    grads = [0.7, -0.2, 0.4]
    theta, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        g = g + wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p, state = {"w": np.array([1.0])}, AdamState()
    for g in grads:
        adam_step(p, {"w": np.array([g])}, state, lr, wd)
    assert state.t == 3
    assert abs(p["w"][0] - theta) < 1e-12


def test_decoupled_decay_differs_from_coupled():
    a, b = {"w": np.array([2.0])}, {"w": np.array([2.0])}
    sa, sb = AdamState(), AdamState()
    for _ in range(3):
        adam_step(a, {"w": np.array([0.1])}, sa, 0.01, 0.1)
        adam_step(b, {"w": np.array([0.1])}, sb, 0.01, 0.1, decoupled=True)
    assert a["w"][0] != b["w"][0]
    # decoupled: the first step moves by lr * (sign + wd * theta)
    c = {"w": np.array([2.0])}
    adam_step(c, {"w": np.array([0.1])}, AdamState(), 0.01, 0.1, decoupled=True)
    assert c["w"][0] == pytest.approx(2.0 - 0.01 * (1.0 + 0.2), abs=1e-9)


def test_shape_mismatch_is_usage_error():
    with pytest.raises(UsageError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), 0.1)


def test_learning_rate_defaults():
    small = TrainConfig.for_model(make_config("small", "multivariate", 9))
    large = TrainConfig.for_model(make_config("large", "multivariate", 9))
    large_uni = TrainConfig.for_model(make_config("large", "univariate", 1))
    assert (small.base_lr, small.head_lr) == (1e-3, None)
    assert (large.base_lr, large.head_lr) == (1e-4, 1e-3)
    assert large_uni.head_lr is None
    assert (small.epochs, small.weight_decay, small.dropout) == (100, 1e-4, 0.1)


def test_config_kv_round_trip():
    cfg = TrainConfig(epochs=7, head_lr=2e-3, decoupled_weight_decay=True, dtype="float64")
    assert TrainConfig.from_kv(cfg.to_kv()) == cfg


@pytest.fixture(scope="module")
def tiny_set():
    return generate_synthetic(11, 2, 6, 2)


def test_group_learning_rates_apply_to_the_right_parameters(tiny_set):
    cfg = make_config("large", "multivariate", 2)
    model = build(cfg, seed=0)
    tcfg = TrainConfig.for_model(cfg, epochs=1, batch_size=len(tiny_set), weight_decay=0.0, dropout=0.0,
                                 dtype="float64")
    trained, _ = train(model, tiny_set, tcfg)
    step = {k: np.abs(trained.params[k].data - model.params[k].data).max() for k in model.params}
    assert step["msm.scale1.w"] == pytest.approx(1e-4, rel=1e-3)
    assert step["tcm.l0.qkv.w"] == pytest.approx(1e-3, rel=1e-3)
    assert step["head.w"] == pytest.approx(1e-3, rel=1e-3)


def test_zero_learning_rate_is_bit_identical(tiny_set):
    model = build(make_config("small", "multivariate", 2), seed=1, dtype=np.float32)
    trained, _ = train(model, tiny_set, TrainConfig(epochs=2, base_lr=0.0, batch_size=4))
    for k in model.params:
        assert np.array_equal(model.params[k].data.view(np.uint32), trained.params[k].data.view(np.uint32))


def test_training_is_deterministic(tiny_set, tmp_path):
    cfg = make_config("small", "multivariate", 2)
    tcfg = TrainConfig(epochs=2, batch_size=4, seed=3)
    a, ha = train(build(cfg, seed=2), tiny_set, tcfg)
    b, hb = train(build(cfg, seed=2), tiny_set, tcfg)
    assert a.param_hash() == b.param_hash()
    ha.to_csv(tmp_path / "a.csv")
    hb.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,mean_loss,train_accuracy"
    c, _ = train(build(cfg, seed=2), tiny_set, TrainConfig(epochs=2, batch_size=4, seed=4))
    assert c.param_hash() != a.param_hash()


def test_training_does_not_mutate_the_input_model(tiny_set):
    model = build(make_config("small", "multivariate", 2), seed=1)
    before = model.param_hash()
    train(model, tiny_set, TrainConfig(epochs=1, batch_size=4))
    assert model.param_hash() == before


def test_empty_set_is_usage_error(tiny_set):
    with pytest.raises(UsageError):
        train(build(make_config("small", "multivariate", 2)), tiny_set.subset(np.zeros(len(tiny_set), bool)),
              TrainConfig(epochs=1))


def test_initial_loss_is_near_chance():
    es = generate_synthetic(5, 4, 20, 4)
    model = build(make_config("small", "multivariate", 4), seed=0)
    with tc.no_grad():
        loss = float(tc.cross_entropy(model.logits(es.epochs.astype(np.float64)), es.labels).data)
    assert abs(loss - math.log(5)) < 0.2


@pytest.fixture(scope="module")
def learned():
    es = generate_synthetic(2, 2, 20, 4)
    cfg = make_config("small", "multivariate", 4)
    return train(build(cfg, seed=0), es, TrainConfig.for_model(cfg, epochs=60, batch_size=16, seed=0))


def test_train_accuracy_exceeds_ninety_five_percent(learned):
    _, hist = learned
    assert len(hist.epoch) == 60
    assert max(hist.train_accuracy) > 0.95


def test_smoothed_loss_mostly_non_increasing(learned):
    _, hist = learned
    loss = np.array(hist.mean_loss[:20])
    smooth = np.convolve(loss, np.ones(5) / 5, mode="valid")
    assert int((np.diff(smooth) > 0).sum()) <= 1
