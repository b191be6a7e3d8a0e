import math

import numpy as np
import pytest

from btranspose.checkpoint import load_checkpoint
from btranspose.model import build_model, tiny_spec
from btranspose.optim import Adam, MultiStepSchedule
from btranspose.nn import Parameter
from btranspose.synth import generate_dataset
from btranspose.train import (TrainConfig, TrainingAborted, evaluate, fit_to_model, loss_ratio, predict,
                              scale_factor, smoothed, steps_to_threshold, train, write_trace)

SPEC = tiny_spec("C3A1(4)", input_size=(64, 48))


@pytest.fixture(scope="module")
def samples():
    small, factor = fit_to_model(generate_dataset(8, seed=1), SPEC)
    assert factor == 4
    return small


def test_schedule_boundary_exact():
    s = MultiStepSchedule(1e-4, [100, 150, 200, 220], 0.25)
    assert s.lr_at(99.99) == 1e-4
    assert s.lr_at(100) == 2.5e-5
    assert s.lr_at(150) == 1e-4 * 0.25 ** 2
    assert s.lr_at(230) == pytest.approx(1e-4 / 256)
    with pytest.raises(ValueError):
        MultiStepSchedule(1e-4, [150, 100], 0.25)


def test_adam_first_step_hand_value():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -3.0])
    opt = Adam([p], lr=0.1, betas=(0.9, 0.99))
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)
    p.grad = np.array([0.5, -3.0])
    opt.step()
    m = 0.9 * 0.1 * np.array([0.5, -3.0]) + 0.1 * np.array([0.5, -3.0])
    v = 0.99 * 0.01 * np.array([0.25, 9.0]) + 0.01 * np.array([0.25, 9.0])
    step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.99 ** 2)) + 1e-8)
    np.testing.assert_allclose(p.data, np.array([0.9, -1.9]) - step2, atol=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_steps=(100, 100))
    with pytest.raises(ValueError):
        TrainConfig(epochs=100)
    with pytest.raises(ValueError):
        TrainConfig(loss="l1")
    c = TrainConfig()
    assert (c.base_lr, c.lr_factor, c.betas, c.weight_decay, c.epochs, c.batch_size) == (
        1e-4, 0.25, (0.9, 0.99), 0.0, 230, 16)


def test_lr_drops_at_epoch_boundary(samples):
    cfg = TrainConfig(batch_size=4, epochs=4, lr_steps=(1,), steps=4, augment=False)
    res = train(build_model(SPEC, seed=0), samples, cfg)
    assert [r["epoch"] for r in res.trace] == [0.0, 0.5, 1.0, 1.5]
    assert [r["lr"] for r in res.trace] == [1e-4, 1e-4, 2.5e-5, 2.5e-5]
    assert res.final_lr == 2.5e-5


def test_epoch_count_sets_steps(samples):
    res = train(build_model(SPEC, seed=0), samples, TrainConfig(batch_size=4, epochs=2, lr_steps=(), augment=False))
    assert res.steps == 4


@pytest.mark.parametrize("loss", ["l2", "sinkhorn"])
def test_rerun_is_identical(samples, loss):
    cfg = TrainConfig(batch_size=4, steps=3, loss=loss, seed=5)
    a = train(build_model(SPEC, seed=1), samples, cfg).losses()
    b = train(build_model(SPEC, seed=1), samples, cfg).losses()
    assert a.tobytes() == b.tobytes() and np.all(np.isfinite(a))


def test_nan_abort_keeps_last_good_weights(samples, tmp_path):
    model = build_model(SPEC, seed=0)
    seen = {}

    def log(rec):
        if rec["step"] == 1:
            seen["good"] = {k: p.data.copy() for k, p in model.named_parameters()}
        if rec["step"] == 2:
            model.head.final.bias.data[0] = np.nan

    with pytest.raises(TrainingAborted, match="step 3"):
        train(model, samples, TrainConfig(batch_size=4, steps=10, augment=False), log=log,
              checkpoint_path=tmp_path / "last.btw")
    restored, ckpt = load_checkpoint(tmp_path / "last.btw")
    assert ckpt.step == 2
    for k, p in restored.named_parameters():
        assert np.array_equal(p.data, seen["good"][k]), k
        assert np.array_equal(dict(model.named_parameters())[k].data, seen["good"][k])


def test_stop_ratio_ends_early(samples):
    cfg = TrainConfig(batch_size=4, steps=50, augment=False, base_lr=1e-3)
    res = train(build_model(SPEC, seed=0), samples, cfg, stop_ratio=0.99)
    assert res.steps < 50
    assert steps_to_threshold(res.losses(), 0.99) == res.steps


def test_smoothing_helpers():
    v = np.arange(1.0, 7.0)
    np.testing.assert_allclose(smoothed(v, 3), [1, 1.5, 2, 3, 4, 5])
    assert loss_ratio(v, 2) == pytest.approx(5.5 / 1.5)
    assert steps_to_threshold([10, 10, 1, 1, 1], ratio=0.2, window=2) == 4
    assert steps_to_threshold([10, 10, 9], ratio=0.2, window=2) is None


def test_scale_factor():
    assert scale_factor(tiny_spec()) == 8
    assert scale_factor(tiny_spec(input_size=(256, 192))) == 1
    with pytest.raises(ValueError):
        scale_factor(tiny_spec(input_size=(96, 48)))


def test_predict_and_evaluate_shapes():
    full = generate_dataset(3, seed=2)
    model = build_model(SPEC, seed=0)
    small, _ = fit_to_model(full, SPEC)
    assert predict(model, np.stack([s.image for s in small])).shape == (3, 17, 16, 12)
    rep = evaluate(model, full)
    assert 0.0 <= rep.ap["AP"] <= 1.0 and 0.0 <= rep.mean_oks <= 1.0
    # predictions come back in full-resolution pixels
    assert max(p.keypoints[:, 0].max() for p in rep.predictions) > 48
    with pytest.raises(ValueError):
        evaluate(model, [])


def test_write_trace(tmp_path):
    write_trace([{"step": 0, "loss": 1.5}, {"step": 1, "loss": math.pi}], tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"step": 1' in lines[1]
