import math
import zlib

import numpy as np
import pytest

from dropback import tensor as T
from dropback.errors import ConfigError, DimensionError, StateError
from dropback.layers import (
    Conv2D,
    Dense,
    Dropout,
    Network,
    ParamTensor,
    ReLU,
    ResidualBlock,
    build_network,
    droppable_layer_indices,
    network_backward,
    network_forward,
    parse_layers,
)
from dropback.tensor import softmax_cross_entropy

from conftest import finite_diff, rel_err


def loss_of(net, x, y):
    return softmax_cross_entropy(net.forward(x), y)[0]


def check_net_grads(net, x, y, tol=1e-5):
    net.train()
    _, g = softmax_cross_entropy(net.forward(x), y)
    net.backward(g)
    analytic = [p.grad.copy() for p in net.params()]
    net.eval()
    for p, a in zip(net.params(), analytic):
        num = finite_diff(lambda: loss_of(net, x, y), p.values)
        assert rel_err(a, num) <= tol, p.name
    net.train()


def test_param_tensor_buffers_match():
    p = ParamTensor("w", np.ones((3, 2)))
    assert p.grad.shape == p.momentum.shape == (3, 2)
    assert p.channel_count == 3
    with pytest.raises(DimensionError):
        ParamTensor("w", np.ones((3, 2)), grad=np.zeros((2, 3)))


def test_layer_param_shapes(rng):
    net = build_network("conv:4:3:1:1,relu,flatten,dense:5", (2, 6, 6), rng)
    conv, dense = net.layers[0], net.layers[3]
    assert conv.weight.values.shape == (4, 2, 3, 3) and conv.bias.values.shape == (4,)
    assert dense.weight.values.shape == (5, 4 * 36) and dense.bias.values.shape == (5,)
    assert not conv.bias.values.any()


def test_kaiming_uniform_bounds(rng):
    net = build_network("dense:200", (50,), rng)
    w = net.layers[0].weight.values
    bound = math.sqrt(6 / 50)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound


class TestForward:
    def test_zero_weights_give_zero_logits(self, rng):
        net = Network([Dense(4)], (3,))
        out = net.forward(rng.standard_normal((5, 3)))
        assert out.shape == (5, 4) and not out.any()

    def test_eval_ignores_dropout_rng(self, rng):
        net = build_network("dense:8,relu,dropout:0.5,dense:3", (4,), rng).eval()
        x = rng.standard_normal((6, 4))
        a = net.forward(x, np.random.default_rng(1))
        b = net.forward(x, np.random.default_rng(2))
        assert np.array_equal(a, b)

    def test_matches_manual_composition(self, rng):
        net = build_network("conv:2:3:1:1,relu,avgpool:2,flatten,dense:3", (1, 4, 4), rng)
        x = rng.standard_normal((2, 1, 4, 4))
        conv, dense = net.layers[0], net.layers[4]
        h = T.conv2d(x, conv.weight.values, 1, 1) + conv.bias.values[None, :, None, None]
        h = T.avgpool2d(T.relu(h), 2).reshape(2, -1)
        expected = h @ dense.weight.values.T + dense.bias.values
        np.testing.assert_allclose(net.forward(x), expected, rtol=0, atol=1e-14)

    def test_train_equals_eval_without_dropout(self, rng):
        net = build_network("conv:3:3:1:1,relu,res:3,flatten,dense:2", (2, 5, 5), rng)
        x = rng.standard_normal((3, 2, 5, 5))
        a = net.train().forward(x)
        b = net.eval().forward(x)
        assert np.array_equal(a, b)

    def test_shape_mismatch_names_layer(self, rng):
        net = build_network("dense:4,relu,dense:2", (3,), rng)
        with pytest.raises(DimensionError, match="layer 0"):
            net.forward(np.zeros((2, 5)))

    def test_incompatible_stack_rejected_at_build(self, rng):
        with pytest.raises(DimensionError, match="layer 1"):
            build_network("conv:2:3,dense:3", (1, 5, 5), rng)

    def test_eval_caches_nothing(self, rng, mlp):
        mlp.train().forward(rng.standard_normal((2, 4)))
        mlp.eval().forward(rng.standard_normal((2, 4)))
        assert all(layer.cache is None for layer in mlp.layers)
        with pytest.raises(StateError):
            mlp.backward(np.ones((2, 3)))

    def test_module_level_aliases(self, rng, mlp):
        x = rng.standard_normal((2, 4))
        out = network_forward(mlp, x)
        network_backward(mlp, np.ones_like(out))
        assert any(p.grad.any() for p in mlp.params())


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self, rng, mlp):
        mlp.forward(rng.standard_normal((3, 4)))
        mlp.backward(np.zeros((3, 3)))
        assert not any(p.grad.any() for p in mlp.params())

    def test_single_dense_hand_derivation(self, rng):
        net = build_network("dense:2", (3,), rng)
        x = rng.standard_normal((4, 3))
        target = rng.standard_normal((4, 2))
        out = net.forward(x)
        g = (out - target) / 4  # d/d out of mean 0.5*|out - target|^2
        net.backward(g)
        np.testing.assert_allclose(net.layers[0].weight.grad, g.T @ x, rtol=1e-14)
        np.testing.assert_allclose(net.layers[0].bias.grad, g.sum(axis=0), rtol=1e-14)

    def test_backward_without_forward(self, mlp):
        with pytest.raises(StateError):
            mlp.backward(np.ones((2, 3)))

    def test_two_conv_residual_net_finite_differences(self, rng):
        net = build_network("res:2,flatten,dense:3", (2, 4, 4), rng)
        for p in net.params():
            p.values += 0.1 * rng.standard_normal(p.values.shape)
        check_net_grads(net, rng.standard_normal((2, 2, 4, 4)), np.array([0, 2]))

    @pytest.mark.parametrize("spec,shape", [
        ("dense:4,dense:3", (5,)),
        ("dense:6,relu,dense:3", (5,)),
        ("conv:3:3:1:1,flatten,dense:3", (2, 4, 4)),
        ("conv:3:2:2:0,relu,flatten,dense:3", (2, 5, 5)),
        ("avgpool:2,flatten,dense:3", (2, 4, 4)),
        ("res:3:1,flatten,dense:3", (3, 4, 4)),
        ("res:4:2,flatten,dense:3", (2, 4, 4)),
        ("dropout:0.5,dense:3", (4,)),
    ])
    def test_every_layer_kind_ten_trials(self, spec, shape):
        r = np.random.default_rng(zlib.crc32(spec.encode()))
        for _ in range(10):
            net = build_network(spec, shape, r)
            for p in net.params():
                p.values += 0.1 * r.standard_normal(p.values.shape)
            x = r.standard_normal((3,) + shape)
            y = r.integers(3, size=3)
            if "dropout" in spec:
                # fixed mask: compare against the same masked function
                net.train()
                drop_rng = np.random.default_rng(5)
                _, g = softmax_cross_entropy(net.forward(x, drop_rng), y)
                net.backward(g)
                scale = net.layers[0].cache.copy()
                w = net.layers[1].weight
                f = lambda: softmax_cross_entropy((x * scale) @ w.values.T + net.layers[1].bias.values, y)[0]
                assert rel_err(w.grad.copy(), finite_diff(f, w.values)) <= 1e-5
            else:
                check_net_grads(net, x, y)


class TestResidualBlock:
    def test_zero_convs_identity_skip_is_relu(self, rng):
        net = Network([ResidualBlock(2)], (2, 3, 3))
        assert net.layers[0].proj is None
        x = rng.standard_normal((2, 2, 3, 3))
        assert np.array_equal(net.forward(x), np.maximum(x, 0))

    def test_grad_through_identity_skip(self, rng):
        net = Network([ResidualBlock(2)], (2, 3, 3))
        x = rng.standard_normal((2, 2, 3, 3))
        g = rng.standard_normal(x.shape)
        block = net.layers[0]
        block.forward(x, training=True)
        gx = block.backward(g)
        np.testing.assert_array_equal(gx, T.relu_grad(x, g))

    def test_projection_when_shapes_change(self, rng):
        net = build_network("res:4:2", (2, 6, 6), rng)
        block = net.layers[0]
        assert block.proj is not None
        assert net.output_shape == (4, 3, 3)
        assert [p.name for p in block.params] == [
            "0.conv1.weight", "0.conv1.bias", "0.conv2.weight", "0.conv2.bias",
            "0.proj.weight", "0.proj.bias",
        ]

    def test_random_block_finite_differences(self, rng):
        net = build_network("res:3:2,flatten,dense:2", (2, 5, 5), rng)
        for p in net.params():
            p.values += 0.1 * rng.standard_normal(p.values.shape)
        check_net_grads(net, rng.standard_normal((2, 2, 5, 5)), np.array([1, 0]))


class TestDropout:
    def test_keep_one_is_identity(self, rng):
        d = Dropout(1.0)
        x = rng.standard_normal((4, 5))
        assert np.array_equal(d.forward(x, True, rng), x)

    def test_expected_value_monte_carlo(self):
        d = Dropout(0.7)
        r = np.random.default_rng(3)
        x = np.array([[1.0, -2.0, 0.5]])
        trials = 10_000
        outs = np.stack([d.forward(x, True, r)[0] for _ in range(trials)])
        # per-element std of the mean: |x| * sqrt((1-p)/p) / sqrt(trials)
        sigma = np.abs(x[0]) * math.sqrt(0.3 / 0.7) / math.sqrt(trials)
        assert np.all(np.abs(outs.mean(axis=0) - x[0]) <= 3 * sigma)

    def test_eval_passthrough_bit_identical(self, rng):
        x = rng.standard_normal((3, 3))
        assert np.array_equal(Dropout(0.3).forward(x, False), x)

    @pytest.mark.parametrize("keep", [0.0, -0.1, 1.5])
    def test_bad_keep_prob(self, keep):
        with pytest.raises(ConfigError):
            Dropout(keep)

    def test_training_needs_rng(self, rng):
        with pytest.raises(StateError):
            Dropout(0.5).forward(np.ones((1, 2)), True, None)


class TestDroppableIndices:
    def test_conv_relu_dense(self, rng):
        net = build_network("conv:2:3,relu,flatten,dense:3", (1, 4, 4), rng)
        assert droppable_layer_indices(net) == [0, 3]

    def test_only_parametric_layers_count(self):
        layers = [Conv2D(2, 3), ReLU(), Dense(3)]
        net = Network(layers[:2], (1, 4, 4))
        assert droppable_layer_indices(net) == [0]
        flat = Network([Dense(3), ReLU(), Dense(2)], (4,))
        assert droppable_layer_indices(flat) == [0, 2]

    def test_no_parametric_layers(self):
        net = Network([ReLU(), Dropout(0.5)], (4,))
        assert droppable_layer_indices(net) == []

    def test_residual_block_counts_once(self, rng):
        net = build_network("res:4:2,flatten,dense:3", (2, 4, 4), rng)
        assert droppable_layer_indices(net) == [0, 2]
        assert len(net.layers[0].params) == 6
        assert net.layers[0].channel_count == 4
        assert all(p.channel_count == 4 for p in net.layers[0].params)


def test_describe_round_trip(rng):
    spec = "conv:4:3:1:1,relu,res:4:1,res:6:2,avgpool:2,flatten,dropout:0.7,dense:3"
    net = build_network(spec, (1, 8, 8), rng)
    assert net.describe() == "1x8x8|" + spec
    again = build_network(net.describe())
    assert [p.name for p in again.params()] == [p.name for p in net.params()]


def test_parse_layers_rejects_unknown():
    with pytest.raises(ConfigError):
        parse_layers("dense:3,bogus")
    with pytest.raises(ConfigError):
        parse_layers("dense")
