import numpy as np
import pytest
from hypothesis import given, strategies as st

from rfad.errors import ConfigError, DimensionError
from rfad.networks import NetworkSpec, apply_network, forward_features, sample_ensemble, sample_network
from rfad.tensor import Tensor


def test_same_seed_same_params():
    spec = NetworkSpec("convnet3", 3, 8, (1, 16, 16))
    a, b = sample_network(spec, 7), sample_network(spec, 7)
    for x, y in zip(a.weights + a.biases, b.weights + b.biases):
        assert x.tobytes() == y.tobytes()


def test_conv_weight_variance_monte_carlo():
    c = 64
    spec = NetworkSpec("convnet3", 3, c, (c, 8, 8))
    w = np.concatenate([np.ravel(sample_network(spec, s).weights[0]) for s in range(3)])
    assert w.size > 1e5
    assert np.var(w) == pytest.approx(2.0 / (9 * c), rel=0.03)


def test_zero_bias_variance_gives_zero_biases():
    p = sample_network(NetworkSpec("fc", 3, 16, (1, 4, 4), sigma_b2=0.0), 1)
    assert all(np.all(b == 0) for b in p.biases)


def test_zero_input_bias_feature():
    spec = NetworkSpec("fc", 1, 4, (1, 2, 2), sigma_b2=0.1)
    f = forward_features(sample_network(spec, 0), Tensor(np.zeros((2, 1, 2, 2))), spec).data
    assert f[-1, 0] == pytest.approx(np.sqrt(0.1))
    assert f[:, 0] @ f[:, 1] == pytest.approx(0.1)


def test_feature_dim_cifar_shape():
    spec = NetworkSpec("convnet3", 3, 256, (3, 32, 32))
    assert spec.repr_dim == 4 * 4 * 256 and spec.feature_dim == 4097


def test_mnist_spatial_arithmetic():
    spec = NetworkSpec("convnet3", 3, 256, (1, 28, 28))
    assert spec.repr_dim == 3 * 3 * 256 == 2304


def test_forward_shape(rng):
    spec = NetworkSpec("convnet3", 3, 8, (1, 28, 28))
    out = forward_features(sample_network(spec, 0), Tensor(rng.standard_normal((5, 1, 28, 28))), spec)
    assert out.shape == (spec.feature_dim, 5)


def test_input_shape_checked(rng):
    spec = NetworkSpec("convnet3", 3, 8, (1, 28, 28))
    with pytest.raises(DimensionError):
        forward_features(sample_network(spec, 0), Tensor(rng.standard_normal((2, 1, 16, 16))), spec)


def test_gram_of_mnist_features_is_psd(mnist):
    train, _ = mnist
    spec = NetworkSpec("convnet3", 3, 32, train.image_shape)
    f = forward_features(sample_network(spec, 0), Tensor(train.images[:8]), spec).data.astype(np.float64)
    k = f.T @ f
    np.testing.assert_array_equal(k, k.T)
    assert np.linalg.eigvalsh(k).min() > -1e-8 * np.trace(k)


def test_final_fc_outputs(rng):
    spec = NetworkSpec("fc", 3, 16, (1, 4, 4), use_final_fc=True, num_outputs=3)
    p = sample_network(spec, 0)
    out = forward_features(p, Tensor(rng.standard_normal((2, 1, 4, 4))), spec)
    assert out.shape == (3, 2)


def test_invalid_spec():
    with pytest.raises(ConfigError):
        NetworkSpec("fc", 3, 8, (1, 4, 4), sigma_w2=0.0)
    with pytest.raises(ConfigError):
        NetworkSpec("resnet", 3, 8, (1, 4, 4))


def test_ensemble_shares_spec_and_distinct_members():
    spec = NetworkSpec("fc", 2, 8, (1, 3, 3))
    ens = sample_ensemble(spec, 3, 5)
    assert ens.n == 3 and len({m.seed for m in ens.members}) == 3
    assert sample_ensemble(spec, 3, 5).ensemble_id == ens.ensemble_id
    assert sample_ensemble(spec, 3, 6).ensemble_id != ens.ensemble_id


@given(phi=st.lists(st.floats(-5, 5), min_size=3, max_size=3), psi=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       sw=st.floats(0.1, 4), sb=st.floats(0, 1))
def test_augmentation_identity(phi, psi, sw, sb):
    """<aug(phi), aug(psi)> = sw * <phi, psi> / dim + sb for a depth-1 FC (identity representation)."""
    spec = NetworkSpec("fc", 1, 1, (1, 1, 3), sigma_w2=sw, sigma_b2=sb)
    x = Tensor(np.array([phi, psi]).reshape(2, 1, 1, 3))
    f = apply_network(spec, [], [], x).data
    expect = sw * np.dot(phi, psi) / 3 + sb
    assert f[0] @ f[1] == pytest.approx(expect, rel=1e-12, abs=1e-12)
