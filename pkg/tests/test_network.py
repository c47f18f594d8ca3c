import math

import numpy as np
import pytest

from dsa3d.cae import CaeStack, LayerTraining, cae_encode, cae_pool, train_stack
from dsa3d.network import (ConvSpec, Dense, NetworkConfig, NetworkFormatError, backward,
                           deep_supervised_loss, finetune, load_network, network_forward, predict,
                           predict_proba, random_network, save_network, transfer_weights)
from dsa3d.nnops import conv3d_forward
from dsa3d.optim import SGD, Adadelta
from oracles import central_difference, relative_error, sample_indices

SMALL = NetworkConfig(input_shape=(1, 8, 8, 8), conv=(ConvSpec(2), ConvSpec(3)), fc=(6, 5),
                      n_classes=3)


def _zero(net):
    for p in net.parameters():
        p[...] = 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(n_classes=1)
    with pytest.raises(ValueError):
        NetworkConfig(fc=(8,), aux_weights=(0.3, 0.3))
    with pytest.raises(ValueError):
        NetworkConfig(top_weight=0.0)
    with pytest.raises(ValueError):
        NetworkConfig(fc=(), aux_weights=())
    assert NetworkConfig().conv_output_shape() == (32, 4, 4, 4)
    assert NetworkConfig.from_dict(SMALL.to_dict()) == SMALL


def test_zero_network_is_uniform_everywhere():
    net = random_network(SMALL, 0)
    _zero(net)
    out = network_forward(net, np.ones((1, 8, 8, 8)))
    for p in [out.probs] + out.aux_probs:
        np.testing.assert_allclose(p, 1 / 3, rtol=1e-15)


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(0)
    for seed in range(5):
        net = random_network(SMALL, seed)
        out = network_forward(net, rng.standard_normal((1, 8, 8, 8)))
        for p in [out.probs] + out.aux_probs:
            assert abs(p.sum() - 1) < 1e-9
        assert out.features.shape == (1, 5)


def test_scalar_toy_network_by_hand():
    cfg = NetworkConfig(input_shape=(1, 1, 1, 1), conv=(ConvSpec(1, 1, 1, "linear"),), fc=(1,),
                        n_classes=2, aux_weights=(0.3,), fc_activation="linear")
    net = random_network(cfg, 0)
    net.conv[0].bank.weights[...] = 2.0
    net.conv[0].bank.biases[...] = 0.5
    net.fc[0] = Dense(np.array([[-1.5]]), np.array([0.25]))
    net.top = Dense(np.array([[1.0], [-2.0]]), np.array([0.0, 0.3]))
    net.aux[0] = Dense(np.array([[0.5], [0.0]]), np.array([0.1, -0.1]))
    x = 0.7
    a = -1.5 * (2.0 * x + 0.5) + 0.25
    top = np.array([a, -2 * a + 0.3])
    aux = np.array([0.5 * a + 0.1, -0.1])
    out = network_forward(net, np.full((1, 1, 1, 1), x))
    np.testing.assert_allclose(out.probs[0], np.exp(top) / np.exp(top).sum(), atol=1e-9)
    np.testing.assert_allclose(out.aux_probs[0][0], np.exp(aux) / np.exp(aux).sum(), atol=1e-9)


def test_input_shape_checked():
    with pytest.raises(ValueError):
        network_forward(random_network(SMALL, 0), np.zeros((1, 4, 4, 4)))


def test_loss_without_aux_is_top_nll():
    cfg = SMALL.replace(aux_weights=(0.0, 0.0))
    net = random_network(cfg, 1)
    out = network_forward(net, np.random.default_rng(1).standard_normal((1, 8, 8, 8)))
    total, per_head = deep_supervised_loss(out, [2], cfg)
    assert total[0] == per_head[0, 0] == pytest.approx(-math.log(out.probs[0, 2]), rel=1e-12)


def test_uniform_loss_closed_form():
    net = random_network(SMALL, 0)
    _zero(net)
    out = network_forward(net, np.ones((1, 8, 8, 8)))
    total, _ = deep_supervised_loss(out, [1], SMALL)
    assert abs(total[0] - 1.6 * math.log(3)) < 1e-9
    assert total[0] == pytest.approx(1.7578, abs=1e-4)


def test_loss_is_weighted_sum_of_heads():
    rng = np.random.default_rng(2)
    cfg = SMALL.replace(aux_weights=(0.7, 0.2), top_weight=1.3)
    net = random_network(cfg, 2)
    feats = rng.standard_normal((4, 3 * 2 * 2 * 2))
    out = net.head_forward(feats)
    y = np.array([0, 2, 1, 1])
    total, per_head = deep_supervised_loss(out, y, cfg)
    np.testing.assert_allclose(total, per_head @ np.array([1.3, 0.7, 0.2]), rtol=1e-15)
    with pytest.raises(IndexError):
        deep_supervised_loss(out, [0, 1, 2, 3], cfg)


def _fd_net(seed=3):
    cfg = NetworkConfig(input_shape=(1, 6, 6, 6),
                        conv=(ConvSpec(2, 3, 2, "sigmoid"), ConvSpec(2, 3, 1, "sigmoid")),
                        fc=(5, 4), n_classes=3, aux_weights=(0.3, 0.3), fc_activation="sigmoid")
    net = random_network(cfg, seed)
    rng = np.random.default_rng(seed)
    for p in net.parameters():
        p += 0.1 * rng.standard_normal(p.shape)
    width = int(np.prod(cfg.conv_output_shape()))
    net.feature_shift = 0.1 * rng.standard_normal(width)
    net.feature_scale = 0.5 + rng.random(width)
    return net, rng


def test_full_network_gradients_match_finite_differences():
    net, rng = _fd_net()
    x = rng.standard_normal((1, 6, 6, 6))
    y = 1

    def loss():
        return deep_supervised_loss(network_forward(net, x), [y], net.config)[0][0]

    out = network_forward(net, x, keep_cache=True)
    head, conv = backward(net, out, [y], conv_grads=True)
    for arr, grad in zip(net.head_parameters() + net.conv_parameters(), head + conv):
        for idx in sample_indices(arr, 5, rng):
            assert relative_error(grad[idx], central_difference(loss, arr, idx)) < 1e-4


def test_relu_head_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    net = random_network(SMALL, 4)
    feats = rng.standard_normal((3, 24))
    y = np.array([2, 0, 1])

    def loss():
        return float(np.mean(deep_supervised_loss(net.head_forward(feats), y, SMALL)[0]))

    grads, _ = backward(net, net.head_forward(feats), y)
    for arr, grad in zip(net.head_parameters(), grads):
        for idx in sample_indices(arr, 6, rng):
            # small step so the probe does not straddle a ReLU kink
            assert relative_error(grad[idx], central_difference(loss, arr, idx, h=1e-5)) < 1e-4


def test_top_only_gradient_when_deep_supervision_off():
    net, rng = _fd_net(5)
    cfg = net.config.replace(aux_weights=(0.0, 0.0))
    net.config = cfg
    feats = rng.standard_normal((2, int(np.prod(cfg.conv_output_shape()))))
    out = net.head_forward(feats)
    a, _ = backward(net, out, [0, 2], deep_supervision=True)
    b, _ = backward(net, out, [0, 2], deep_supervision=False)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


# -- transfer -------------------------------------------------------------------------

def _trained_stack(maps=(2, 3), sizes=3, seed=0):
    stack = CaeStack.init(1, maps, size=sizes, seed=seed)
    rng = np.random.default_rng(seed)
    data = [rng.standard_normal((1, 8, 8, 8)) for _ in range(2)]
    train_stack(stack, data, LayerTraining(epochs=1, batch_size=2))
    return stack


def test_transfer_equal_sizes_copies_and_reproduces_encodings():
    stack = _trained_stack()
    net = transfer_weights(stack, SMALL, seed=0)
    for st, layer in zip(net.conv, stack.layers):
        assert np.array_equal(st.bank.weights, layer.encoder.weights)
        assert np.array_equal(st.bank.biases, layer.encoder.biases)
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.standard_normal((1, 8, 8, 8))
        feats, _ = net.conv_features(x)
        assert np.max(np.abs(feats - stack.encode(x).reshape(-1))) <= 1e-6


def test_transfer_into_larger_kernel_preserves_outputs():
    stack = _trained_stack()
    big = SMALL.replace(conv=(ConvSpec(2, 5), ConvSpec(3, 5)))
    small_net = transfer_weights(stack, SMALL)
    big_net = transfer_weights(stack, big)
    assert big_net.conv[0].bank.weights.shape == (2, 1, 5, 5, 5)
    ring = big_net.conv[0].bank.weights.copy()
    ring[:, :, 1:4, 1:4, 1:4] = 0
    assert not ring.any()
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.standard_normal((1, 8, 8, 8))
        a = small_net.conv_features(x)[0]
        b = big_net.conv_features(x)[0]
        assert np.max(np.abs(a - b)) <= 1e-6


def test_transfer_wider_maps_duplicates_sources():
    stack = _trained_stack(maps=(8, 3))
    cfg = SMALL.replace(conv=(ConvSpec(12), ConvSpec(3)))
    wide = transfer_weights(stack, cfg, seed=3)
    narrow = transfer_weights(stack, SMALL.replace(conv=(ConvSpec(8), ConvSpec(3))), seed=3)
    w = wide.conv[0].bank.weights
    assert np.array_equal(w[:8], stack.layers[0].encoder.weights)
    for extra in range(8, 12):
        assert any(np.array_equal(w[extra], w[s]) for s in range(8))
    x = np.random.default_rng(4).standard_normal((1, 8, 8, 8))
    h_wide = conv3d_forward(x, wide.conv[0].bank, "relu")
    h_src = cae_encode(stack.layers[0], x)
    assert np.max(np.abs(h_wide[:8] - h_src)) <= 1e-12
    # the next layer splits its weights among copies, so the stack function is unchanged
    assert np.max(np.abs(wide.conv_features(x)[0] - narrow.conv_features(x)[0])) <= 1e-9


def test_transfer_noise_only_touches_extra_maps():
    stack = _trained_stack(maps=(2, 3))
    cfg = SMALL.replace(conv=(ConvSpec(4), ConvSpec(3)))
    net = transfer_weights(stack, cfg, seed=1, noise=0.5)
    w = net.conv[0].bank.weights
    assert np.array_equal(w[:2], stack.layers[0].encoder.weights)
    assert not any(np.array_equal(w[2], w[s]) for s in range(2))


def test_transfer_rejects_depth_mismatch():
    with pytest.raises(ValueError):
        transfer_weights(_trained_stack(maps=(2,)), SMALL)


# -- fine-tuning -----------------------------------------------------------------------

def _toy_data(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.standard_normal((1, 8, 8, 8)) + (i % 3), i % 3) for i in range(n)]


def test_zero_epochs_leaves_parameters():
    net = random_network(SMALL, 0)
    before = [t.copy() for t in net.tensors()]
    assert finetune(net, _toy_data(), epochs=0) == []
    assert all(np.array_equal(a, b) for a, b in zip(before, net.tensors()))


def test_freeze_conv_keeps_conv_bit_identical():
    net = random_network(SMALL, 0)
    before = [p.copy() for p in net.conv_parameters()]
    heads = [p.copy() for p in net.head_parameters()]
    finetune(net, _toy_data(), epochs=2, freeze_conv=True)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.conv_parameters()))
    assert any(not np.array_equal(a, b) for a, b in zip(heads, net.head_parameters()))


def test_unfrozen_conv_is_trained():
    net = random_network(SMALL, 0)
    before = [p.copy() for p in net.conv_parameters()]
    log = finetune(net, _toy_data(6), epochs=1, freeze_conv=False, batch_size=3)
    assert len(log) == 1
    assert any(not np.array_equal(a, b) for a, b in zip(before, net.conv_parameters()))


@pytest.mark.parametrize("freeze", [True, False])
def test_zero_aux_weights_equal_single_loss_trajectory(freeze):
    cfg = SMALL.replace(aux_weights=(0.0, 0.0))
    a = random_network(cfg, 7)
    b = a.copy()
    data = _toy_data(9)
    la = finetune(a, data, Adadelta(), epochs=3, seed=5, freeze_conv=freeze, batch_size=4)
    lb = finetune(b, data, Adadelta(), epochs=3, seed=5, freeze_conv=freeze, batch_size=4,
                  deep_supervision=False)
    assert la == lb
    assert all(np.array_equal(u, v) for u, v in zip(a.tensors(), b.tensors()))


def test_finetune_errors():
    net = random_network(SMALL, 0)
    with pytest.raises(ValueError):
        finetune(net, [], epochs=1)
    with pytest.raises(IndexError):
        finetune(net, [(np.zeros((1, 8, 8, 8)), 3)], epochs=1)


def test_finetune_learns_toy_problem():
    net = random_network(SMALL, 1)
    log = finetune(net, _toy_data(30), SGD(0.05), epochs=30, batch_size=5)
    assert log[-1].loss < log[0].loss
    assert log[-1].accuracy == 1.0


# -- prediction ------------------------------------------------------------------------

def _constant_net(probs):
    cfg = SMALL.replace(n_classes=len(probs))
    net = random_network(cfg, 0)
    net.top.weights[...] = 0.0
    net.top.biases[...] = np.log(probs)
    return net


def test_predict_argmax_and_ties():
    x = np.zeros((1, 8, 8, 8))
    assert predict(_constant_net([0.2, 0.5, 0.3]), x)[0] == 1
    assert predict(_constant_net([0.5, 0.5]), x)[0] == 0


def test_predict_agrees_with_forward_and_shift():
    rng = np.random.default_rng(3)
    net = random_network(SMALL, 3)
    for _ in range(5):
        x = rng.standard_normal((1, 8, 8, 8))
        c, p = predict(net, x)
        assert c == int(np.argmax(network_forward(net, x).probs[0]))
        shifted = net.copy()
        shifted.top.biases += 17.0
        assert predict(shifted, x)[0] == c
    feats = np.stack([net.conv_features(rng.standard_normal((1, 8, 8, 8)))[0] for _ in range(3)])
    assert predict_proba(net, features=feats).shape == (3, 3)


# -- DSA1 ------------------------------------------------------------------------------

def test_dsa1_roundtrip(tmp_path):
    net = random_network(SMALL, 2)
    net.fit_normalization(np.random.default_rng(0).standard_normal((4, 24)))
    p = tmp_path / "n.dsa1"
    save_network(net, p)
    assert p.read_bytes()[:4] == b"DSA1"
    back = load_network(p)
    assert back.config == net.config
    for a, b in zip(net.tensors(), back.tensors()):
        assert np.array_equal(a.astype(np.float32), b)


def test_dsa1_bad_files(tmp_path):
    p = tmp_path / "n.dsa1"
    p.write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(NetworkFormatError):
        load_network(p)
    save_network(random_network(SMALL, 0), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(NetworkFormatError, match="truncated"):
        load_network(p)
