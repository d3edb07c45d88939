import numpy as np
import pytest
from conftest import small_config

from revlab.model import batch_loss, init_params
from revlab.train import Optimizer, TrainConfig, TrainingDiverged, batch_schedule, train


def test_schedule_covers_each_epoch_once():
    sched = batch_schedule(6, 3, 4, seed=0)
    flat = np.concatenate(sched)
    assert sorted(flat[:6]) == list(range(6)) and sorted(flat[6:12]) == list(range(6))
    assert [len(b) for b in sched] == [3, 3, 3, 3]


def test_schedule_is_seeded():
    a = batch_schedule(10, 4, 5, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a, batch_schedule(10, 4, 5, seed=1)))
    assert any(not np.array_equal(x, y) for x, y in zip(a, batch_schedule(10, 4, 5, seed=2)))


def test_config_validation():
    for bad in ({"steps": -1}, {"batch_size": 0}, {"learning_rate": 0.0}, {"optimizer": "rmsprop"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_sgd_step():
    opt = Optimizer(TrainConfig(learning_rate=0.5), {"x": np.zeros(2)})
    out = opt.step({"x": np.array([1.0, 2.0])}, {"x": np.array([2.0, -2.0])})
    np.testing.assert_array_equal(out["x"], [0.0, 3.0])


def test_adam_first_step_has_unit_magnitude():
    # bias correction makes the first Adam step lr * sign(g), up to eps
    opt = Optimizer(TrainConfig(optimizer="adam", learning_rate=0.1), {"x": np.zeros(3)})
    out = opt.step({"x": np.zeros(3)}, {"x": np.array([4.0, -0.5, 1e-3])})
    np.testing.assert_allclose(out["x"], [-0.1, 0.1, -0.1], rtol=1e-4)


@pytest.mark.parametrize("optimizer, lr", [("sgd", 0.1), ("adam", 1e-2)])
def test_training_reduces_loss_and_is_deterministic(optimizer, lr):
    cfg = small_config(vocab_size=3)
    seqs = [(0, 1, 2, 0, 1, 2, 0, 1)] * 4
    tc = TrainConfig(steps=30, batch_size=2, learning_rate=lr, optimizer=optimizer)
    p0 = init_params(cfg, 0)
    p1, losses = train(p0, cfg, seqs, tc)
    p2, losses2 = train(p0, cfg, seqs, tc)
    assert losses == losses2 and all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert batch_loss(p1, cfg, seqs) < batch_loss(p0, cfg, seqs)
    assert len(losses) == 30


def test_zero_steps_return_initial_params():
    cfg = small_config(vocab_size=3)
    p0 = init_params(cfg, 0)
    p1, losses = train(p0, cfg, [(0, 1, 2)], TrainConfig(steps=0))
    assert losses == [] and all(np.array_equal(p0[k], p1[k]) for k in p0)


def test_divergence_is_reported():
    cfg = small_config(vocab_size=3)
    p0 = init_params(cfg, 0)
    p0["E"][0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(p0, cfg, [(0, 1, 2)], TrainConfig(steps=3))
    assert info.value.step == 0
