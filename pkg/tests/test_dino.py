import math

import numpy as np
import pytest

from btranspose.checkpoint import decode, load_pretrained
from btranspose.dino import (DinoConfig, DinoHead, augment_views, center_update, dino_loss, ema_update,
                             identity_views, init_state, pretrain, sample_crop, teacher_probs)
from btranspose.model import build_model, tiny_spec
from btranspose.synth import generate_sample
from btranspose.tensor import Tensor

SPEC = tiny_spec("C3A1(4)")
SMALL = DinoConfig(n_prototypes=16, hidden=8, bottleneck=4, batch_size=4)


def images(n=6):
    rng = np.random.default_rng(0)
    return rng.random((n, 3, 32, 24)).astype(np.float32)


# -- EMA / center ---------------------------------------------------------------------

def two_nets():
    state = init_state(SPEC, SMALL, seed=0)
    for p in state.student.parameters():
        p.data[...] = np.random.default_rng(p.size).normal(size=p.shape)
    return state.teacher, state.student


def test_ema_fixed_point_and_copy():
    teacher, student = two_nets()
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    ema_update(teacher, student, 1.0)
    assert all(np.array_equal(teacher.state_dict()[k], v) for k, v in before.items())
    ema_update(teacher, student, 0.0)
    for (name, t), (_, s) in zip(teacher.named_parameters(), student.named_parameters()):
        assert np.array_equal(t.data, s.data), name


def test_ema_arithmetic():
    teacher, student = two_nets()
    for p in teacher.parameters():
        p.data[...] = 2.0
    for p in student.parameters():
        p.data[...] = 4.0
    ema_update(teacher, student, 0.5)
    assert all(np.all(p.data == 3.0) for p in teacher.parameters())


def test_ema_is_convex_combination():
    teacher, student = two_nets()
    t0 = {k: p.data.copy() for k, p in teacher.named_parameters()}
    ema_update(teacher, student, 0.996)
    for (k, t), (_, s) in zip(teacher.named_parameters(), student.named_parameters()):
        np.testing.assert_allclose(t.data, 0.996 * t0[k] + 0.004 * s.data, rtol=1e-6, atol=1e-7)


def test_ema_shape_drift():
    teacher, student = two_nets()
    student.head.prototypes.data = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="shape"):
        ema_update(teacher, student, 0.9)


def test_center_cases(rng):
    c = rng.normal(size=5)
    batch = rng.normal(size=(3, 5))
    assert np.array_equal(center_update(c, batch, 1.0), c)
    np.testing.assert_allclose(center_update(c, batch, 0.0), batch.mean(0))
    b2 = rng.normal(size=(4, 5))
    two = center_update(center_update(c, batch, 0.9), b2, 0.9)
    hand = 0.81 * c + 0.09 * batch.mean(0) + 0.1 * b2.mean(0)
    np.testing.assert_allclose(two, hand, atol=1e-6)
    with pytest.raises(ValueError):
        center_update(c, np.zeros((0, 5)))


# -- loss ---------------------------------------------------------------------------

def test_uniform_loss_is_log_k():
    loss = dino_loss(Tensor(np.zeros((3, 16))), np.zeros((3, 16)), np.zeros(16))
    assert loss.item() == pytest.approx(math.log(16), rel=1e-6)


def test_matching_one_hot_is_small():
    logits = np.full((1, 8), -5.0)
    logits[0, 3] = 5.0
    loss = dino_loss(Tensor(logits), logits, np.zeros(8)).item()
    p_s = np.exp(logits[0] / 0.1) / np.exp(logits[0] / 0.1).sum()
    assert loss == pytest.approx(-math.log(p_s[3]), abs=1e-6) and loss < 1e-6


def test_hand_formula(f64, rng):
    s, t, c = rng.normal(size=(4, 10)), rng.normal(size=(4, 10)), rng.normal(size=10) * 0.1
    want = 0.0
    for i in range(4):
        pt = np.exp((t[i] - c) / 0.04)
        pt /= pt.sum()
        ps = np.exp(s[i] / 0.1)
        ps /= ps.sum()
        want += -(pt * np.log(ps)).sum()
    assert abs(dino_loss(Tensor(s), t, c).item() - want / 4) < 1e-6


def test_loss_nonnegative_and_entropy_at_match(f64, rng):
    t = rng.normal(size=(3, 6))
    s = t * (0.1 / 0.04)  # student softmax at tau 0.1 equals teacher softmax at tau 0.04
    p = teacher_probs(t, np.zeros(6), 0.04)
    entropy = -(p * np.log(p)).sum(-1).mean()
    assert dino_loss(Tensor(s), t, np.zeros(6)).item() == pytest.approx(entropy, abs=1e-9)
    for _ in range(20):
        assert dino_loss(Tensor(rng.normal(size=(2, 6))), rng.normal(size=(2, 6)), np.zeros(6)).item() >= 0


def test_no_gradient_reaches_teacher():
    state = init_state(SPEC, SMALL, seed=0)
    x = Tensor(images(2))
    t_out = state.teacher(x)
    assert not t_out.requires_grad
    loss = dino_loss(state.student(x), t_out.data, state.center)
    loss.backward()
    assert all(p.grad is None or not np.any(p.grad) for p in state.teacher.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in state.student.parameters())


def test_head_output_length(rng):
    head = DinoHead(12, rng, hidden=8, bottleneck=4, n_prototypes=32)
    assert head(Tensor(rng.normal(size=(5, 12)))).shape == (5, 32)


# -- views --------------------------------------------------------------------------

def test_identity_views_equal_image():
    img = generate_sample(0).image
    a, b = augment_views(img, 3, cfg=identity_views())
    assert np.array_equal(a, img) and np.array_equal(b, img)


def test_views_deterministic_and_independent():
    img = generate_sample(1).image
    a1, b1 = augment_views(img, (4, 2), out_size=(64, 48))
    a2, b2 = augment_views(img, (4, 2), out_size=(64, 48))
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()
    assert a1.shape == (3, 64, 48) and not np.array_equal(a1, b1)
    assert 0.0 <= a1.min() and a1.max() <= 1.0


def test_crop_bounds_property():
    rng = np.random.default_rng(0)
    for size in [(256, 192), (64, 48), (7, 5)]:
        for _ in range(10_000 // 3 + 1):
            top, left, ch, cw = sample_crop(rng, size)
            assert 0 <= top and 0 <= left and ch >= 1 and cw >= 1
            assert top + ch <= size[0] and left + cw <= size[1]


def test_config_scope_validation():
    with pytest.raises(ValueError, match="scope"):
        DinoConfig(scope="everything")


# -- loop -----------------------------------------------------------------------------

def test_zero_step_pretrain_keeps_student_init():
    res = pretrain(SPEC, images(), 0, seed=1, cfg=SMALL)
    assert res.trace == [] and res.state.step == 0
    fresh = init_state(SPEC, SMALL, seed=1)
    for k, v in fresh.teacher.state_dict().items():
        assert np.array_equal(res.state.teacher.state_dict()[k], v)


def test_pretrain_trace_is_deterministic():
    a = pretrain(SPEC, images(), 3, seed=2, cfg=SMALL)
    b = pretrain(SPEC, images(), 3, seed=2, cfg=SMALL)
    assert [r["loss"] for r in a.trace] == [r["loss"] for r in b.trace]
    assert [r["teacher_std"] for r in a.trace] == [r["teacher_std"] for r in b.trace]
    assert all(math.isfinite(r["loss"]) and r["loss"] >= 0 for r in a.trace)


def test_teacher_follows_ema_each_step():
    cfg = DinoConfig(n_prototypes=16, hidden=8, bottleneck=4, batch_size=4, ema_momentum=0.5)
    one = pretrain(SPEC, images(), 1, seed=3, cfg=cfg)
    start = init_state(SPEC, cfg, seed=3).teacher.state_dict()
    for (k, t), (_, s) in zip(one.state.teacher.named_parameters(), one.state.student.named_parameters()):
        np.testing.assert_allclose(t.data, 0.5 * start[k] + 0.5 * s.data, rtol=1e-6, atol=1e-7)


def test_centering_off_leaves_center_zero():
    cfg = DinoConfig(n_prototypes=16, hidden=8, bottleneck=4, batch_size=4, centering=False)
    assert np.all(pretrain(SPEC, images(), 2, seed=0, cfg=cfg).state.center == 0.0)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        pretrain(SPEC, np.zeros((0, 3, 32, 24)), 1)


def test_checkpoint_loads_into_pose_model(tmp_path):
    res = pretrain(SPEC, images(), 2, seed=0, cfg=SMALL)
    path = res.save(tmp_path / "dino.btw")
    ckpt = decode(path.read_bytes())
    assert ckpt.backbone_only and ckpt.step == 2
    assert all(k.startswith("backbone.") for k in ckpt.tensors)
    model = build_model(SPEC, seed=9)
    loaded = load_pretrained(model, path)
    assert len(loaded) == len(ckpt.tensors)
    for k in loaded:
        assert np.array_equal(model.state_dict()[k], res.state.teacher.state_dict()[k])


def test_encoder_scope_checkpoint(tmp_path):
    cfg = DinoConfig(n_prototypes=16, hidden=8, bottleneck=4, batch_size=4, scope="groups+encoder")
    res = pretrain(SPEC, images(), 1, seed=0, cfg=cfg)
    names = set(res.checkpoint().tensors)
    assert any(k.startswith("encoder.") for k in names) and any(k.startswith("projection.") for k in names)
    load_pretrained(build_model(SPEC), res.save(tmp_path / "d.btw"))
