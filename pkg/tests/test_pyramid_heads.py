import numpy as np
import pytest

import tensor as T
from config import ExperimentConfig
from data_io import TASKS, split, synth_generate
from errors import ConfigurationError, DimensionError
from pyramid_heads import (
    AttentionHead,
    EnsembleConfig,
    FeaturePyramid,
    MLPHead,
    PyramidConfig,
    ensemble_train_predict,
    fpn_fuse,
    jensen_gap,
    tokenize,
)
from training_engine import train


def _levels(rng, sizes, channels=2, batch=1):
    return [T.Tensor(rng.normal(size=(batch, channels, s, s))) for s in sizes]


def test_default_resolutions_fuse_to_14x14(rng):
    cfg = PyramidConfig([320, 160, 80], channels=2)
    out = fpn_fuse(_levels(rng, [320, 160, 80]), cfg)
    assert out.shape == (1, 2, 14, 14)


def test_other_resolution_lists(rng):
    for sizes in ([224, 112, 56], [160, 80], [80]):
        cfg = PyramidConfig(sizes, channels=2)
        assert fpn_fuse(_levels(rng, sizes), cfg).shape == (1, 2, 14, 14)


def test_single_level_delta_kernel_is_identity(rng):
    cfg = PyramidConfig([14], channels=1)
    pyramid = FeaturePyramid(cfg)
    kernel = np.zeros((1, 1, 5, 5))
    kernel[0, 0, 2, 2] = 1.0
    pyramid.convs["14"].kernel.data = kernel
    pyramid.convs["14"].bias.data = np.zeros(1)
    level = _levels(rng, [14], channels=1)[0]
    assert np.allclose(pyramid([level]).data, level.data, atol=1e-15)


def test_level_permutation_is_bit_identical(rng):
    cfg = PyramidConfig([32, 16, 8], channels=2)
    pyramid = FeaturePyramid(cfg, seed=4)
    levels = _levels(rng, [32, 16, 8], batch=2)
    reference = pyramid(levels).data
    for order in ([2, 0, 1], [1, 2, 0], [2, 1, 0]):
        assert np.array_equal(pyramid([levels[i] for i in order]).data, reference)


def test_level_mismatch(rng):
    cfg = PyramidConfig([32, 16], channels=2)
    with pytest.raises(ConfigurationError):
        fpn_fuse(_levels(rng, [32]), cfg)
    with pytest.raises(ConfigurationError):
        fpn_fuse(_levels(rng, [32, 8]), cfg)


def test_pyramid_gradients(rng):
    cfg = PyramidConfig([8, 4], channels=1, target_size=6)
    pyramid = FeaturePyramid(cfg, seed=1)
    levels = _levels(rng, [8, 4], channels=1)
    loss = lambda: T.reduce_sum(T.sigmoid(pyramid(levels)))
    assert T.grad_check_parameters(loss, pyramid.parameters()) < 1e-4


def test_mlp_zero_output_layer_is_constant(rng):
    head = MLPHead(8, 1, hidden=(6, 4), seed=0)
    head.output.weight.data = np.zeros((1, 4))
    head.output.bias.data = np.array([0.7])
    out = head(T.Tensor(rng.normal(size=(5, 8)))).data
    assert np.array_equal(out, np.full((5, 1), 0.7))


def test_mlp_bit_outputs_and_width_check(rng):
    head = MLPHead(8, 16, seed=0)
    assert head(T.Tensor(rng.normal(size=(3, 8)))).shape == (3, 16)
    with pytest.raises(DimensionError):
        head(T.Tensor(np.ones((3, 7))))


def test_mlp_gradients(rng):
    head = MLPHead(4, 2, hidden=(5, 3), seed=3)
    x = T.Tensor(rng.normal(size=(6, 4)))
    loss = lambda: T.reduce_sum(T.sigmoid(head(x)))
    assert T.grad_check_parameters(loss, head.parameters()) < 1e-4


def test_attention_head_single_token(rng):
    head = AttentionHead(4, 1, out_dim=1, seed=0)
    x = rng.normal(size=(3, 1, 4))
    value = x[:, 0, :] @ head.attention.value.weight.data.T
    expected = value @ head.output.weight.data.T + head.output.bias.data
    assert np.allclose(head(T.Tensor(x)).data, expected)


def test_attention_head_token_permutation_invariance(rng):
    head = AttentionHead(3, 4, out_dim=2, seed=1)
    x = rng.normal(size=(2, 4, 3))
    reference = head(T.Tensor(x)).data
    assert np.allclose(head(T.Tensor(x[:, [3, 1, 0, 2], :])).data, reference, atol=1e-12)


def test_attention_head_gradients(rng):
    head = AttentionHead(3, 2, out_dim=1, seed=2)
    head.attention.token_bias.data = rng.normal(size=(2, 3)) * 0.1
    x = T.Tensor(rng.normal(size=(2, 2, 3)))
    loss = lambda: T.reduce_sum(T.sigmoid(head(x)))
    assert T.grad_check_parameters(loss, head.parameters()) < 1e-4


def test_tokenize_shapes():
    assert tokenize(T.Tensor(np.ones((2, 12))), 4).shape == (2, 4, 3)
    with pytest.raises(DimensionError):
        tokenize(T.Tensor(np.ones((2, 10))), 4)


def test_ensemble_config_validation():
    assert len(EnsembleConfig().seeds) == 5
    with pytest.raises(ConfigurationError):
        EnsembleConfig(k=3, seeds=[1, 2, 2])
    with pytest.raises(ConfigurationError):
        EnsembleConfig(k=1)


def test_identical_members_have_zero_variance():
    x = np.linspace(0.0, 1.0, 7)
    mean, members, var = ensemble_train_predict(
        EnsembleConfig(k=3), lambda seed: (lambda inputs: 2.0 * inputs), x, verbose=False
    )
    np.testing.assert_allclose(mean, 2.0 * x, rtol=1e-14)
    assert members.shape == (3, 7)
    np.testing.assert_allclose(var, np.zeros(7), atol=1e-30)


def test_members_are_assembled_in_index_order():
    cfg = EnsembleConfig(k=4, seeds=[7, 3, 11, 5])
    _, members, _ = ensemble_train_predict(
        cfg, lambda seed: (lambda inputs: np.full(len(inputs), float(seed))), np.zeros(2), verbose=False
    )
    assert members[:, 0].tolist() == [7.0, 3.0, 11.0, 5.0]


@pytest.mark.parametrize("k", [2, 5])
def test_ensemble_jensen_inequality(k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(40, 3))
    target = x @ np.array([1.0, -2.0, 0.5])

    def train_member(seed):
        member_rng = np.random.default_rng(seed)
        coef = np.array([1.0, -2.0, 0.5]) + member_rng.normal(scale=0.3, size=3)
        return lambda inputs: inputs @ coef

    cfg = EnsembleConfig(k=k, base_seed=17)
    mean, members, var = ensemble_train_predict(cfg, train_member, x, verbose=False)
    for batch in np.array_split(np.arange(40), 5):
        report = jensen_gap(mean[batch], members[:, batch], target[batch])
        assert report["ensemble_mse"] <= report["mean_member_mse"] + 1e-12
    assert np.all(var >= 0)


def test_trained_ensemble_beats_its_average_member():
    data = synth_generate(TASKS["MRD1"], 150, d=8, noise=0.1, seed=7)
    splits = split(len(data), seed=0)
    cfg = ExperimentConfig().copy(**{
        'head.kind': 'deep_ensemble',
        'head.hidden': [16, 8],
        'ensemble.k': 3,
        'optimizer.epochs': 2,
        'optimizer.batch': 16,
        'optimizer.lr': 1e-2,
        'backbone.embedding_dim': 8,
        'seed': 5,
    })
    model, record = train(cfg, data, splits, verbose=False)
    assert model.seeds == [5, 1005, 2005]

    x, target = data.inputs[splits.test], data.targets[splits.test, 0]
    members = np.array([m.predict_mm(x) for m in model.members])
    assert not np.allclose(members[0], members[1])
    summary = jensen_gap(model.predict_mm(x), members, target)
    assert summary["ensemble_mse"] == pytest.approx(record.mse, rel=1e-12)
    assert summary["ensemble_mse"] <= summary["mean_member_mse"] + 1e-12
    assert summary["gap"] >= -1e-12
