import numpy as np
import pytest

from irss.diffcore import (
    Affine, Architecture, Conv2d, Flatten, MeanPool2d, ReLU, conv_architecture, extract, forward,
    init_params, mlp_architecture,
)
from irss.errors import ConfigError, ShapeError


def test_conv_architecture_shapes():
    arch = conv_architecture((3, 16, 16), (4, 8), feature_dim=8)
    shapes = arch.layer_shapes()
    assert shapes[0] == (4, 14, 14)
    assert shapes[2] == (4, 7, 7)
    assert shapes[5] == (8, 2, 2)
    assert arch.feature_dim == 8
    assert arch.taps == (1, 4)


def test_architecture_rejects_bad_layer_with_index():
    with pytest.raises(ShapeError, match="layer 1"):
        Architecture((5,), (Affine(4), Conv2d(2)), n_classes=2)


def test_architecture_must_end_flat():
    with pytest.raises(ConfigError):
        Architecture((1, 6, 6), (Conv2d(2), ReLU()), n_classes=2)


def test_architecture_dict_round_trip():
    arch = conv_architecture()
    assert Architecture.from_dict(arch.to_dict()) == arch


def test_init_is_seed_deterministic_and_glorot_bounded():
    arch = mlp_architecture(10, (16,), 8)
    a, b = init_params(arch, 3), init_params(arch, 3)
    for (ka, va), (kb, vb) in zip(a.state_arrays().items(), b.state_arrays().items()):
        assert ka == kb
        np.testing.assert_array_equal(va, vb)
    W = a.theta_f["l0.W"].data
    assert np.abs(W).max() <= np.sqrt(6.0 / (10 + 16))
    assert np.all(a.theta_f["l0.b"].data == 0)
    c = init_params(arch, 4)
    assert not np.array_equal(c.theta_f["l0.W"].data, W)


def test_forward_outputs_probabilities():
    arch = conv_architecture(feature_dim=6, n_classes=3)
    params = init_params(arch, 0)
    x = np.random.default_rng(0).standard_normal((5, 3, 16, 16))
    features, probs = forward(params, arch, x)
    assert features.shape == (5, 6)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0)


def test_extract_rejects_wrong_input():
    arch = mlp_architecture(4)
    params = init_params(arch, 0)
    with pytest.raises(ShapeError, match="input"):
        extract(params, arch, np.zeros((3, 5)))


def test_param_groups_are_disjoint():
    params = init_params(mlp_architecture(4), 0)
    ids = [id(t) for g in params.groups().values() for t in g.values()]
    assert len(ids) == len(set(ids))
