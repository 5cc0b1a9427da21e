import json

import numpy as np
import pytest

from quietsr import dataio as D
from quietsr import model as M
from quietsr import train as T
from quietsr.errors import NumericalFailure, ValidationError


def micro(seed=0, **kw):
    cfg = M.ModelConfig(num_layers=2, layers_per_block=2, **kw)
    return cfg, M.init_params(cfg, np.random.default_rng(seed))


def tiny_dataset(n=4, seed=0):
    imgs = np.random.default_rng(seed).integers(0, 256, size=(n, 8, 8), dtype=np.uint8)
    return D.make_pairs(imgs, "tiny")


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------


def test_l1_examples():
    loss, cot = T.l1_loss(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert loss == 0.5
    np.testing.assert_array_equal(cot, [0.5, 0.0])
    assert T.l1_loss(np.ones(3), np.ones(3))[0] == 0.0
    with pytest.raises(ValidationError):
        T.l1_loss(np.ones(3), np.ones(4))


def test_l1_matches_direct_sum():
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 5, 5, 1)), rng.random((3, 5, 5, 1))
    direct = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert T.l1_loss(a, b)[0] == pytest.approx(direct, abs=1e-15)


def test_adam_zero_gradient_is_noop():
    cfg = T.TrainConfig(lr=1e-2)
    x = np.array([1.0, -2.0])
    new, state = T.adam_step(x, np.zeros(2), T.AdamState.zeros(2), cfg)
    np.testing.assert_array_equal(new, x)
    assert state.t == 1


def test_adam_first_step_is_signed_lr():
    cfg = T.TrainConfig(lr=1e-3)
    g = np.array([0.3, -7.0, 1e-3])
    new, _ = T.adam_step(np.zeros(3), g, T.AdamState.zeros(3), cfg)
    np.testing.assert_allclose(new, -1e-3 * np.sign(g), rtol=1e-4)


@pytest.mark.parametrize("lr,steps,bound", [(1e-1, 100, 0.5), (1e-2, 1000, 1e-2)])
def test_adam_minimizes_quadratic(lr, steps, bound):
    cfg = T.TrainConfig(lr=lr)
    x, state = np.array([1.0]), T.AdamState.zeros(1)
    for _ in range(steps):
        x, state = T.adam_step(x, 2 * x, state, cfg)
    assert x[0] ** 2 < bound


def test_adam_refuses_non_finite():
    g = np.array([0.0, np.inf])
    with pytest.raises(NumericalFailure) as info:
        T.adam_step(np.zeros(2), g, T.AdamState.zeros(2), T.TrainConfig())
    assert info.value.where == 1


def test_clipping_limits_update_norm():
    cfg = T.TrainConfig(lr=1.0, clip=True, betas=(0.0, 0.0))
    big = np.array([300.0, 400.0])
    new, state = T.adam_step(np.zeros(2), big, T.AdamState.zeros(2), cfg)
    np.testing.assert_allclose(state.m, [6.0, 8.0])


def test_train_config_validation():
    with pytest.raises(ValidationError):
        T.TrainConfig(lr=-1)
    with pytest.raises(ValidationError):
        T.TrainConfig(batch_size=0)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def test_zero_learning_rate_keeps_parameters():
    cfg, p = micro(bases=("RY",))
    before = p.flatten().tobytes()
    tr = T.Trainer(cfg, p, T.TrainConfig(lr=0.0, batch_size=2, epochs=1))
    T.fit(tr, tiny_dataset())
    assert tr.params.flatten().tobytes() == before
    assert tr.step == 2


def test_single_sample_loss_decreases():
    cfg, p = micro(bases=("RY",))
    ds = tiny_dataset(1)
    tr = T.Trainer(cfg, p, T.TrainConfig(lr=5e-3, batch_size=1))
    losses = [tr.train_step(ds.lr, ds.hr) for _ in range(50)]
    assert np.mean(losses[-5:]) < 0.8 * np.mean(losses[:5])


def test_same_seed_same_result(tmp_path):
    runs = []
    for k in range(2):
        cfg, p = micro(seed=3, drop_path=0.2)
        tr = T.Trainer(cfg, p, T.TrainConfig(lr=1e-3, batch_size=2, epochs=2, seed=9),
                       log_path=str(tmp_path / f"log{k}.jsonl"))
        T.fit(tr, tiny_dataset())
        runs.append(tr.params.flatten().tobytes())
    assert runs[0] == runs[1]


def test_jsonl_log_fields(tmp_path):
    cfg, p = micro()
    log = tmp_path / "steps.jsonl"
    tr = T.Trainer(cfg, p, T.TrainConfig(lr=1e-3, batch_size=2, epochs=1), log_path=str(log))
    stats = T.train_epoch(tr, tiny_dataset())
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"step", "epoch", "loss", "lr", "wall_ms"}
    assert stats["steps"] == 2 and stats["mean_loss"] == pytest.approx(np.mean([r["loss"] for r in rows]))


def test_max_steps_stops_early():
    cfg, p = micro()
    tr = T.Trainer(cfg, p, T.TrainConfig(lr=1e-3, batch_size=1, epochs=5, max_steps=3))
    T.fit(tr, tiny_dataset())
    assert tr.step == 3


def test_predict_shape():
    cfg, p = micro()
    ds = tiny_dataset(3)
    assert T.predict(p, cfg, ds.lr, batch_size=2).shape == (3, 8, 8, 1)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("bases", [None, ("RY",)])
def test_grad_check_micro(bases):
    cfg, p = micro(seed=1, bases=bases)
    rng = np.random.default_rng(0)
    hr = rng.random((2, 8, 8, 1))
    rep = T.grad_check(p, cfg, (D.downsample2(hr), hr), coords=60, seed=2)
    assert rep["coords"] == 60
    assert rep["max_rel_err"] < 1e-4


def test_grad_check_names_worst_parameter():
    cfg, p = micro()
    hr = np.random.default_rng(0).random((1, 4, 4, 1))
    rep = T.grad_check(p, cfg, (D.downsample2(hr), hr), coords=5)
    name = rep["worst_param_name"]
    assert name.endswith("]") and "[" in name
    assert 0 <= rep["worst_param_index"] < p.count()


def test_relative_error_floor():
    assert T.relative_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert T.relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_shift_and_sweep_training_gradients_agree():
    cfg, p = micro(seed=5)
    hr = np.random.default_rng(0).random((1, 4, 4, 1))
    lr = D.downsample2(hr)
    _, ga = T.loss_and_grad(p, cfg, lr, hr, method="shift")
    _, gb = T.loss_and_grad(p, cfg, lr, hr, method="sweep")
    np.testing.assert_allclose(ga.flatten(), gb.flatten(), atol=1e-13)
