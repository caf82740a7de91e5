import math

import numpy as np
import pytest

from eidetic import dataio as D
from eidetic.errors import ConfigError, ShapeError, TrainingError
from eidetic.model import ModelConfig, init_params, load_checkpoint
from eidetic.tensor import Tensor
from eidetic.train import (
    OptimState,
    TrainConfig,
    adamw_step,
    evaluate,
    log_to_csv,
    model_predictor,
    optimize,
    train,
)

TINY = ModelConfig(L=1, H=2, C=8, M=4, d_in=6, d_out=1, seed=1)


def scalar_adam_trace(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        theta -= lr * wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


def test_adamw_examples():
    p = Tensor([1.5, -2.0])
    state = OptimState.for_params([p], lr=0.1)
    adamw_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    state = OptimState.for_params([p], lr=0.1, weight_decay=0.01)
    adamw_step([p], [np.zeros(2)], state)
    np.testing.assert_allclose(p.data, np.array([1.5, -2.0]) * 0.999, rtol=0, atol=1e-15)
    q = Tensor([0.0])
    adamw_step([q], [np.ones(1)], OptimState.for_params([q], lr=1e-3))
    assert q.data[0] == pytest.approx(-9.99999990e-4, abs=1e-15)
    with pytest.raises(ShapeError):
        adamw_step([q], [np.ones(2)], OptimState.for_params([q]))


@pytest.mark.parametrize("wd", [0.0, 0.05])
def test_adamw_matches_scalar_trace(wd):
    grads = [1.0, -2.0, 0.5, 0.0, 3.0, -0.1, 0.7, -1.2, 2.2, 0.05]
    p = Tensor([0.8])
    state = OptimState.for_params([p], lr=0.01, weight_decay=wd)
    got = []
    for g in grads:
        adamw_step([p], [np.array([g])], state)
        got.append(p.data[0])
    np.testing.assert_allclose(got, scalar_adam_trace(0.8, grads, 0.01, wd), rtol=0, atol=1e-15)
    assert state.t == 10 and np.all(state.v[0] >= 0)


def test_train_config_validation_and_schedule():
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})
    cfg = TrainConfig(epochs=4, lr=1.0)
    assert [cfg.lr_at(e) for e in range(4)] == pytest.approx([1.0, 0.5 + 0.5 * math.cos(math.pi / 4), 0.5,
                                                               0.5 + 0.5 * math.cos(3 * math.pi / 4)])
    assert TrainConfig(schedule="constant", lr=0.3).lr_at(7) == 0.3


def test_convex_probe_descends_monotonically():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((64, 4))
    y = X @ np.array([[1.0], [-2.0], [0.5], [3.0]])
    w = Tensor(np.zeros((4, 1)), requires_grad=True)

    def loss(step):
        pred = Tensor(X) @ w
        return ((pred - y) ** 2).sum() ** 0.5 * (1.0 / np.linalg.norm(y)), {"pred": pred}

    log = optimize([("w", w)], [loss], TrainConfig(epochs=10, lr=0.05, weight_decay=0.0, schedule="constant"))
    losses = [r["loss"] for r in log]
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.fixture(scope="module")
def small_data():
    train_set = D.gen_sphere_dataset(3, 40, seed=0)
    return train_set, D.Normalizer.fit(train_set)


def test_one_epoch_smoke_and_outputs(tmp_path, small_data):
    samples, norm = small_data
    res = train(TINY, samples[:1], norm, TrainConfig(epochs=1), out_dir=tmp_path)
    assert math.isfinite(res.losses[0])
    lines = res.log_path.read_text().splitlines()
    assert lines[0] == "epoch,loss,lr,seconds" and len(lines) == 2
    params, cfg = load_checkpoint(res.checkpoint)
    assert cfg == TINY
    for (_, a), (_, b) in zip(params.named_parameters(), res.params.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_training_is_deterministic(small_data):
    samples, norm = small_data
    cfg = TrainConfig(epochs=3, seed=4, batch_size=2, timing=False)
    a, b = train(TINY, samples, norm, cfg), train(TINY, samples, norm, cfg)
    assert log_to_csv(a.log) == log_to_csv(b.log)
    c = train(TINY, samples, norm, TrainConfig(epochs=3, seed=5, batch_size=2, timing=False))
    assert a.losses != c.losses


@pytest.mark.parametrize("ranks", [2, 4])
def test_parallel_training_matches_serial(small_data, ranks):
    samples, norm = small_data
    serial = train(TINY, samples, norm, TrainConfig(epochs=3, seed=2))
    par = train(TINY, samples, norm, TrainConfig(epochs=3, seed=2, ranks=ranks))
    for s, p in zip(serial.losses, par.losses):
        assert abs(s - p) / abs(s) <= 1e-6


def test_non_finite_loss_names_tensor(small_data):
    samples, norm = small_data
    params = init_params(TINY)
    bad = params.layers[0].ff1_b
    bad.data = np.full(bad.shape, np.nan)
    with pytest.raises(TrainingError, match="layers0.ff1_b"):
        train(TINY, samples, norm, TrainConfig(epochs=1), params=params)


def test_width_mismatch_rejected(small_data):
    samples, norm = small_data
    with pytest.raises(ShapeError):
        train(ModelConfig(L=1, H=2, C=8, M=4, d_in=3), samples, norm, TrainConfig(epochs=1))


def test_evaluate_truth_stub_and_determinism(small_data):
    samples, norm = small_data
    report = evaluate(lambda s: s.targets, samples)
    assert report.rel_l2 == {"pressure": 0.0}
    assert report.r2 == {"C_D": 1.0, "C_L": 1.0}
    assert len(report.fields) == samples[0].d_out
    predict = model_predictor(init_params(TINY), TINY, norm)
    first, second = evaluate(predict, samples).to_json(), evaluate(predict, samples).to_json()
    assert first == second
    doc = evaluate(predict, samples).to_dict()
    assert doc["n_samples"] == 3 and doc["rel_l2"]["pressure"] >= 0 and doc["r2"]["C_D"] <= 1
