import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fseb import autodiff as ad
from fseb import nn
from fseb.errors import ConfigError, DimensionError, FormatError


def test_mnist_cnn_parameter_count():
    net = nn.build_network("mnist_cnn", 10, seed=0)
    # conv 1->32, conv 32->64, dense 7*7*64->128, dense 128->10 (weights + biases)
    expected = (9 * 32 + 32) + (9 * 32 * 64 + 64) + (3136 * 128 + 128) + (128 * 10 + 10)
    assert expected == 421_642
    assert net.n_params == expected


def test_desk_mlp_parameter_count():
    net = nn.build_network("desk_mlp", 4, seed=0, input_shape=(1, 8, 8))
    assert net.n_params == 64 * 64 + 64 + 64 * 4 + 4
    small = nn.build_network("desk_mlp", 3, seed=0, input_shape=(1, 8, 8), hidden=3)
    assert small.n_params == 64 * 3 + 3 + 3 * 3 + 3


def test_cifar_cnn_shapes():
    net = nn.build_network("cifar_cnn", 10, seed=0, input_shape=(3, 32, 32))
    out = nn.forward(net, np.zeros((2, 3, 32, 32)))
    assert out.shape == (2, 10)
    assert net.layers[-2] == nn.LayerSpec("dropout", rate=0.4)


def test_preset_rates():
    assert nn.resolve_preset("mnist_cnn", 10).rate == 0.5
    assert nn.resolve_preset("cifar_cnn", 10).rate == 0.4
    assert nn.resolve_preset("mnist_cnn", 10, rate=0.2).rate == 0.2


def test_forward_shapes_and_determinism(rng):
    net = nn.build_network("mnist_cnn", 10, seed=3)
    x = rng.random((4, 1, 28, 28))
    a = nn.forward(net, x).data
    assert a.shape == (4, 10)
    np.testing.assert_array_equal(a, nn.forward(net, x).data)
    b = nn.forward(net, x, "eval_mc", np.random.default_rng(0)).data
    c = nn.forward(net, x, "eval_mc", np.random.default_rng(0)).data
    np.testing.assert_array_equal(b, c)
    assert not np.allclose(a, b)


def test_same_seed_same_init():
    a = nn.build_network("desk_mlp", 3, seed=5, input_shape=(1, 8, 8))
    b = nn.build_network("desk_mlp", 3, seed=5, input_shape=(1, 8, 8))
    c = nn.build_network("desk_mlp", 3, seed=6, input_shape=(1, 8, 8))
    np.testing.assert_array_equal(a.get_flat(), b.get_flat())
    assert not np.array_equal(a.get_flat(), c.get_flat())


def test_biases_start_at_zero():
    net = nn.build_network("mnist_cnn", 10, seed=0)
    for p in net.params:
        if p.data.ndim in (1, 4) and p.shape[:-1] in ((), (1, 1, 1)):
            assert not p.data.any()


def test_flatten_orders_features_height_width_channel():
    # the first dense layer sees the channels-last flattening of the input
    net = nn.build_network("desk_mlp", 2, seed=0, input_shape=(2, 2, 2), hidden=8)
    x = np.arange(8.0).reshape(1, 2, 2, 2) / 8
    flat_expected = np.transpose(x, (0, 2, 3, 1)).reshape(1, -1)
    first = net.params[0].data
    np.testing.assert_allclose(nn.forward_from(net, ad.Tensor(np.transpose(x, (0, 2, 3, 1))), 0, stop=2).data,
                               flat_expected @ first + net.params[1].data, rtol=1e-14)


def test_prefix_then_rest_equals_full_forward(rng):
    net = nn.build_network("mnist_cnn", 10, seed=1)
    x = rng.random((3, 1, 28, 28))
    h, start = nn.forward_prefix(net, x)
    assert net.layers[start].kind == "dropout"
    full = nn.forward(net, x, "eval_mc", np.random.default_rng(4)).data
    split = nn.forward_from(net, h, start, "eval_mc", np.random.default_rng(4)).data
    np.testing.assert_array_equal(full, split)


def test_flat_roundtrip(rng):
    net = nn.build_network("desk_mlp", 3, seed=0, input_shape=(1, 8, 8))
    flat = rng.normal(size=net.n_params)
    net.set_flat(flat)
    np.testing.assert_array_equal(net.get_flat(), flat)
    with pytest.raises(DimensionError):
        net.set_flat(flat[:-1])


def test_l2_norm_sq_matches_flat_vector():
    net = nn.build_network("desk_mlp", 3, seed=2, input_shape=(1, 8, 8))
    assert nn.l2_norm_sq(net).item() == pytest.approx(float(net.get_flat() @ net.get_flat()), rel=1e-13)


def test_checkpoint_roundtrip(tmp_path, rng):
    net = nn.build_network("mnist_cnn", 10, seed=0, rate=0.3)
    path = tmp_path / "net.fseb"
    nn.save_checkpoint(net, path)
    assert path.read_bytes()[:4] == b"FSEB"
    back = nn.load_checkpoint(path)
    assert back.layers == net.layers
    assert back.input_shape == net.input_shape and back.n_classes == 10
    np.testing.assert_array_equal(back.get_flat(), net.get_flat())
    x = rng.random((2, 1, 28, 28))
    np.testing.assert_array_equal(nn.forward(back, x).data, nn.forward(net, x).data)


def test_checkpoint_errors(tmp_path):
    net = nn.build_network("desk_mlp", 3, seed=0, input_shape=(1, 8, 8))
    path = tmp_path / "net.fseb"
    nn.save_checkpoint(net, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.fseb"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        nn.load_checkpoint(bad)
    bad.write_bytes(raw[:-16])
    with pytest.raises(FormatError):
        nn.load_checkpoint(bad)
    bad.write_bytes(raw[:30])
    with pytest.raises(FormatError):
        nn.load_checkpoint(bad)


@given(st.integers(2, 6), st.integers(1, 5), st.sampled_from([4, 8]))
def test_desk_mlp_probabilities_are_valid(K, B, size):
    net = nn.build_network("desk_mlp", K, seed=0, input_shape=(1, size, size), hidden=5)
    x = np.random.default_rng(K * 10 + B).random((B, 1, size, size))
    p = ad.softmax_np(nn.forward(net, x, "eval_mc", np.random.default_rng(0)).data)
    assert p.shape == (B, K)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_errors():
    with pytest.raises(ConfigError):
        nn.resolve_preset("resnet", 10)
    with pytest.raises(ConfigError):
        nn.build_network("desk_mlp", 1, seed=0)
    with pytest.raises(ConfigError):
        nn.LayerSpec("dropout", rate=1.0)
    net = nn.build_network("mnist_cnn", 10, seed=0)
    with pytest.raises(DimensionError):
        nn.forward(net, np.zeros((1, 1, 32, 32)))
    with pytest.raises(DimensionError):
        nn.build_network("mnist_cnn", 10, seed=0, input_shape=(1, 6, 6))
