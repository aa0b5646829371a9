import numpy as np
import pandas as pd
import pytest

import tensor as T
from errors import ParameterError
from nn_blocks import ToyBackbone
from owm_optimizer import AdamState
from ssl_distill import (
    DistillState,
    collapse_diagnostics,
    distill_cross_entropy,
    distill_step,
    pretrain_backbone,
    projection_network,
    run_distill_toy,
    write_distill_log,
)


def identity_view(x, rng):
    return x.copy()


def _state(**kwargs):
    return DistillState(projection_network(4, 6, hidden=8, seed=0), 6, **kwargs)


def test_state_initialisation():
    st = _state()
    assert np.array_equal(st.teacher.flat_parameters(), st.student.flat_parameters())
    assert np.array_equal(st.center, np.zeros(6))
    assert all(not p.requires_grad for p in st.teacher.parameters())
    with pytest.raises(ParameterError):
        _state(tps=0.0)
    with pytest.raises(ParameterError):
        _state(teacher_momentum=1.5)


def test_cross_entropy_of_distribution_with_itself(rng):
    st = _state(tps=0.5, tpt=0.5)
    s = rng.normal(size=(3, 6))
    p = np.exp(s / 0.5)
    p /= p.sum(axis=1, keepdims=True)
    entropy = float(np.mean(-(p * np.log(p)).sum(axis=1)))
    assert distill_cross_entropy(T.Tensor(s), T.Tensor(s), st).item() == pytest.approx(entropy, rel=1e-12)


def test_sharp_limit_goes_to_zero():
    st = _state(tps=1e-3, tpt=1e-3)
    logits = np.array([[2.0, 0.0, 0.0, 0.0, 0.0, 0.0]])
    assert distill_cross_entropy(T.Tensor(logits), T.Tensor(logits), st).item() < 1e-6


def test_no_gradient_reaches_teacher_logits(rng):
    st = _state()
    t = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    s = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    distill_cross_entropy(t, s, st).backward()
    assert t.grad is None or not np.any(t.grad)
    assert np.any(s.grad)


def test_teacher_parameters_never_receive_gradients(rng):
    st = _state()
    opt_params = st.student.trainable_parameters()
    distill_step(st, rng.normal(size=(5, 4)), identity_view, AdamState(opt_params, lr=1e-2), rng)
    total = sum(np.abs(p.grad).sum() for p in st.teacher.parameters() if p.grad is not None)
    assert total == 0.0


def test_loss_is_view_symmetric(rng):
    st = _state()
    s1, s2 = T.Tensor(rng.normal(size=(4, 6))), T.Tensor(rng.normal(size=(4, 6)))
    t1, t2 = T.Tensor(rng.normal(size=(4, 6))), T.Tensor(rng.normal(size=(4, 6)))
    forward = 0.5 * distill_cross_entropy(t1, s2, st).item() + 0.5 * distill_cross_entropy(t2, s1, st).item()
    swapped = 0.5 * distill_cross_entropy(t2, s1, st).item() + 0.5 * distill_cross_entropy(t1, s2, st).item()
    assert forward == swapped


def test_unit_teacher_momentum_freezes_teacher(rng):
    st = _state(teacher_momentum=1.0)
    before = st.teacher.flat_parameters()
    opt = AdamState(st.student.trainable_parameters(), lr=1e-2)
    for _ in range(3):
        distill_step(st, rng.normal(size=(6, 4)), identity_view, opt, rng)
    assert np.array_equal(st.teacher.flat_parameters(), before)
    assert not np.array_equal(st.student.flat_parameters(), before)


def test_zero_center_momentum_takes_batch_mean(rng):
    st = _state(teacher_momentum=1.0, center_momentum=0.0)
    batch = rng.normal(size=(7, 4))
    distill_step(st, batch, identity_view, None, rng)
    with T.no_grad():
        t = st.teacher(T.Tensor(batch)).data
    assert np.array_equal(st.center, np.concatenate([t, t], axis=0).mean(axis=0))


def test_teacher_follows_closed_form_ema(rng):
    l = 0.9
    st = _state(teacher_momentum=l)
    for p in st.teacher.parameters():
        p.data = p.data + rng.normal(size=p.shape)
    gt0 = st.teacher.flat_parameters()
    gs = st.student.flat_parameters()
    for _ in range(50):
        distill_step(st, rng.normal(size=(3, 4)), identity_view, None, rng)
    expected = l ** 50 * gt0 + (1 - l ** 50) * gs
    assert np.max(np.abs(st.teacher.flat_parameters() - expected)) < 1e-10


def test_collapse_diagnostics(rng):
    st = _state()
    same = np.tile(rng.normal(size=4), (5, 1))
    assert np.all(collapse_diagnostics(st, same)["output_std"] < 1e-12)
    diverse = collapse_diagnostics(st, rng.normal(size=(20, 4)))
    assert np.all(diverse["output_std"] > 0)


@pytest.mark.slow
def test_toy_distillation_learns_without_collapse(tmp_path):
    result = run_distill_toy(steps=200, out_dim=8, seed=0, verbose=False)
    losses = [r["loss"] for r in result["records"]]
    assert np.mean(losses[-10:]) < losses[0]
    assert result["diagnostics"]["entropy"] > 0.1 * np.log(8)

    path = write_distill_log(result["records"], str(tmp_path / "distill.csv"))
    log = pd.read_csv(path)
    assert list(log.columns) == ["step", "loss", "divergence", "center_norm"]
    assert len(log) == 200


def test_pretrain_backbone_returns_frozen_teacher(rng):
    backbone = ToyBackbone.for_images([8], channels=2, embedding_dim=4, seed=0)
    images = rng.normal(size=(6, 1, 8, 8))
    pretrained, records = pretrain_backbone(backbone, images, steps=2, batch_size=3, verbose=False)
    assert pretrained.frozen and len(records) == 2
    assert pretrained is not backbone
    emb, levels = pretrained(T.Tensor(images[:2]))
    assert emb.shape == (2, 4) and len(levels) == 3


def test_output_layer_scaling():
    base = projection_network(4, 8, seed=3)
    small = projection_network(4, 8, seed=3, init_scale=0.01)
    assert np.array_equal(small.layers[0].weight.data, base.layers[0].weight.data)
    assert np.allclose(small.layers[-1].weight.data, 0.01 * base.layers[-1].weight.data)
    with T.no_grad():
        logits = small(T.Tensor(np.ones((2, 4)))).data
    assert np.abs(logits).max() < 0.2


def test_toy_run_is_seeded():
    first = run_distill_toy(steps=5, seed=4, verbose=False)["records"]
    second = run_distill_toy(steps=5, seed=4, verbose=False)["records"]
    assert first == second
