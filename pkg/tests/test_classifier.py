import math

import pytest
import torch

from models import classifier
from models.classifier import Activation, DenseLayer, Network
from spectral.linalg import matrix_rank

DTYPE = torch.float64


def linear_net(p, k, generator):
    layer = DenseLayer(
        weights=torch.randn(k, p, generator=generator, dtype=DTYPE),
        bias=torch.randn(k, generator=generator, dtype=DTYPE),
        activation=Activation.IDENTITY,
    )
    return Network(layers=[layer], tap_index=0, class_count=k)


def autograd_loss(net, X, labels):
    """Same forward pass written with autograd-tracked copies of the parameters."""
    params = []
    x = X
    for layer in net.layers:
        tracked = {n: p.clone().requires_grad_(True) for n, p in layer.parameters().items()}
        params.append(tracked)
        if layer.kind == "bottleneck":
            pre = (x @ tracked["factor"]) @ tracked["factor"].T
        else:
            pre = x @ tracked["weights"].T + tracked["bias"]
        x = torch.relu(pre) if layer.activation is Activation.RELU else pre
    loss = torch.nn.functional.cross_entropy(x, labels)
    loss.backward()
    return loss.item(), params


class TestNetworkValidation:
    def test_dimension_mismatch(self, generator):
        a = DenseLayer(torch.zeros(4, 3, dtype=DTYPE), torch.zeros(4, dtype=DTYPE))
        b = DenseLayer(torch.zeros(2, 5, dtype=DTYPE), torch.zeros(2, dtype=DTYPE), Activation.IDENTITY)
        with pytest.raises(ValueError, match="layer 1"):
            Network(layers=[a, b], tap_index=0, class_count=2)

    def test_tap_out_of_range(self, small_net):
        with pytest.raises(ValueError):
            Network(layers=small_net.layers, tap_index=3, class_count=3)

    def test_last_layer_must_be_logits(self, small_net):
        layers = small_net.layers[:-1]
        with pytest.raises(ValueError):
            Network(layers=layers, tap_index=0, class_count=5)

    def test_input_width_checked(self, small_net):
        with pytest.raises(ValueError):
            classifier.forward_with_taps(small_net, torch.ones(2, 5, dtype=DTYPE))


class TestForward:
    def test_taps_and_logits(self, small_net, small_blobs):
        activations, logits = classifier.forward_with_taps(small_net, small_blobs.features)
        assert [a.shape[1] for a in activations] == [8, 5, 3]
        assert torch.equal(activations[-1], logits)
        assert torch.all(activations[0] >= 0)

    def test_forward_from_tap_reproduces_logits(self, small_net, small_blobs):
        activations, logits = classifier.forward_with_taps(small_net, small_blobs.features)
        head = classifier.forward_from(small_net, activations[small_net.tap_index], small_net.tap_index + 1)
        torch.testing.assert_close(head, logits)

    def test_single_example(self, small_net):
        assert classifier.predict(small_net, torch.zeros(6, dtype=DTYPE)).shape == (1,)


class TestLoss:
    def test_uniform_logits_give_log_k(self):
        logits = torch.zeros(4, 5, dtype=DTYPE)
        loss = classifier.cross_entropy(logits, torch.tensor([0, 1, 2, 3]))
        assert loss.item() == pytest.approx(math.log(5))

    def test_nonnegative(self, generator):
        logits = torch.randn(10, 3, generator=generator, dtype=DTYPE) * 5
        labels = torch.randint(0, 3, (10,), generator=generator)
        assert classifier.cross_entropy(logits, labels).item() >= 0

    def test_labels_checked(self, small_net):
        with pytest.raises(ValueError):
            classifier.loss_and_grads(small_net, torch.zeros(2, 6, dtype=DTYPE), [0, 3])


class TestGradients:
    def test_finite_differences_on_random_networks(self):
        generator = torch.Generator().manual_seed(0)
        for config in range(50):
            depth = int(torch.randint(1, 4, (1,), generator=generator))
            hidden = [int(torch.randint(2, 9, (1,), generator=generator)) for _ in range(depth)]
            p = int(torch.randint(2, 7, (1,), generator=generator))
            k = int(torch.randint(2, 5, (1,), generator=generator))
            net = classifier.build_mlp(p, hidden, k, seed=config)
            for layer in net.layers:
                layer.bias.copy_(torch.randn(layer.bias.shape, generator=generator, dtype=DTYPE) * 0.1)
            X = torch.rand(6, p, generator=generator, dtype=DTYPE)
            labels = torch.randint(0, k, (6,), generator=generator)
            assert classifier.finite_diff_check(net, X, labels, h=1e-6) <= 1e-4

    def test_linear_network_is_exact(self, generator):
        net = linear_net(4, 3, generator)
        X = torch.randn(5, 4, generator=generator, dtype=DTYPE)
        labels = torch.tensor([0, 1, 2, 0, 1])
        assert classifier.finite_diff_check(net, X, labels) <= 1e-7

    def test_matches_autograd(self, small_net, small_blobs):
        X, y = small_blobs.features[:16], small_blobs.labels[:16]
        loss, grads = classifier.loss_and_grads(small_net, X, y)
        expected_loss, tracked = autograd_loss(small_net, X, y)
        assert loss == pytest.approx(expected_loss, rel=1e-12)
        for ours, theirs in zip(grads.layers, tracked):
            for name, param in theirs.items():
                torch.testing.assert_close(ours[name], param.grad, atol=1e-12, rtol=1e-10)

    def test_bottleneck_matches_autograd(self, small_net, small_blobs):
        net = classifier.insert_bottleneck(small_net, 0, 3, seed=1)
        X, y = small_blobs.features[:10], small_blobs.labels[:10]
        _, grads = classifier.loss_and_grads(net, X, y)
        _, tracked = autograd_loss(net, X, y)
        torch.testing.assert_close(grads.layers[1]["factor"], tracked[1]["factor"].grad)

    def test_extra_gradient_at_tap(self, small_net, small_blobs):
        X, y = small_blobs.features[:8], small_blobs.labels[:8]
        extra = torch.ones(8, 5, dtype=DTYPE) * 0.1
        _, plain = classifier.loss_and_grads(small_net, X, y)
        _, shifted = classifier.loss_and_grads(small_net, X, y, extra)
        _, by_dict = classifier.loss_and_grads(small_net, X, y, {small_net.tap_index: extra})
        # Layers after the tap are unaffected.
        assert torch.equal(plain.layers[2]["weights"], shifted.layers[2]["weights"])
        assert not torch.equal(plain.layers[1]["weights"], shifted.layers[1]["weights"])
        assert torch.equal(shifted.layers[0]["weights"], by_dict.layers[0]["weights"])

    def test_extra_gradient_shape_checked(self, small_net, small_blobs):
        with pytest.raises(ValueError):
            classifier.loss_and_grads(
                small_net, small_blobs.features[:4], small_blobs.labels[:4], torch.ones(4, 2, dtype=DTYPE)
            )

    def test_logit_jacobian_of_affine_model(self, generator):
        net = linear_net(4, 3, generator)
        X = torch.randn(2, 4, generator=generator, dtype=DTYPE)
        logits, jac = classifier.logit_jacobian(net, X)
        torch.testing.assert_close(logits, net(X))
        torch.testing.assert_close(jac[0], net.layers[0].weights)
        torch.testing.assert_close(jac[1], net.layers[0].weights)

    def test_input_gradient_matches_autograd(self, small_net, small_blobs):
        X = small_blobs.features[:5].clone().requires_grad_(True)
        y = small_blobs.labels[:5]
        logits = X
        for layer in small_net.layers:
            logits = layer.pre_activation(logits)
            if layer.activation is Activation.RELU:
                logits = torch.relu(logits)
        torch.nn.functional.cross_entropy(logits, y, reduction="sum").backward()
        ours = classifier.input_gradient(small_net, X.detach(), y)
        torch.testing.assert_close(ours, X.grad)


class TestPredict:
    def test_tie_goes_to_lowest_index(self):
        layer = DenseLayer(torch.zeros(2, 2, dtype=DTYPE), torch.tensor([0.5, 0.5], dtype=DTYPE), "identity")
        net = Network(layers=[layer], tap_index=0, class_count=2)
        assert classifier.predict(net, torch.zeros(1, 2, dtype=DTYPE)).tolist() == [0]

    def test_batch(self, small_net, small_blobs):
        assert classifier.predict(small_net, small_blobs.features).shape == (len(small_blobs),)


class TestBuild:
    def test_same_seed_same_weights(self):
        a = classifier.build_mlp(6, [8, 5], 3, seed=4)
        b = classifier.build_mlp(6, [8, 5], 3, seed=4)
        for la, lb in zip(a.layers, b.layers):
            assert torch.equal(la.weights, lb.weights)

    def test_default_tap_is_last_hidden_layer(self):
        assert classifier.build_mlp(6, [8, 5, 4], 3).tap_index == 2

    def test_clone_is_independent(self, small_net):
        copy = small_net.clone()
        copy.layers[0].weights.add_(1.0)
        assert not torch.equal(copy.layers[0].weights, small_net.layers[0].weights)

    def test_parameter_count(self, small_net):
        assert small_net.parameter_count() == 6 * 8 + 8 + 8 * 5 + 5 + 5 * 3 + 3
        assert small_net.parameter_count(start=2) == 5 * 3 + 3


class TestBottleneck:
    def test_output_rank_bounded(self, small_net, small_blobs):
        net = classifier.insert_bottleneck(small_net, 0, 2, seed=3)
        activations, _ = classifier.forward_with_taps(net, small_blobs.features)
        assert net.tap_index == 1
        assert matrix_rank(activations[1]) <= 2

    def test_factor_starts_orthonormal(self, small_net):
        net = classifier.insert_bottleneck(small_net, 1, 3, seed=0)
        F = net.layers[2].factor
        torch.testing.assert_close(F.T @ F, torch.eye(3, dtype=DTYPE))

    def test_original_untouched(self, small_net):
        before = small_net.layers[0].weights.clone()
        net = classifier.insert_bottleneck(small_net, 0, 2)
        net.layers[0].weights.add_(1.0)
        assert torch.equal(small_net.layers[0].weights, before)

    @pytest.mark.parametrize("after,rank", [(2, 1), (0, 0), (0, 9)])
    def test_invalid(self, small_net, after, rank):
        with pytest.raises(ValueError):
            classifier.insert_bottleneck(small_net, after, rank)


class TestKinks:
    def test_rows_on_kinks_are_moved_or_dropped(self):
        layer = DenseLayer(torch.eye(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))
        head = DenseLayer(torch.eye(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE), "identity")
        net = Network(layers=[layer, head], tap_index=0, class_count=2)
        X = torch.tensor([[0.0, 0.5], [0.3, 0.4]], dtype=DTYPE)
        nudged, kept = classifier.nudge_off_kinks(net, X)
        assert kept.tolist() == [True, True]
        assert nudged[0, 0].abs() >= classifier.KINK_MARGIN
        torch.testing.assert_close(nudged[1], X[1])
