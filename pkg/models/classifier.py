"""Feedforward classifier with manual backpropagation and tap points.

A ``Network`` is an ordered list of dense and bottleneck layers. The layer at
``tap_index`` closes the representation part f-(x; phi); everything after it is
the head f+(. ; theta). Activations of every layer are exposed so regularizers
and metrics can read the representation at any depth.
"""
import copy
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Union

import torch

DTYPE = torch.float64
KINK_MARGIN = 1e-3
# Rounding slack of a central difference, in units of eps * |loss| / h.
FD_NOISE_ULPS = 64


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


def _activate(pre, activation):
    if activation is Activation.RELU:
        return torch.relu(pre)
    return pre


@dataclass
class DenseLayer:
    weights: torch.Tensor  # (out, in)
    bias: torch.Tensor  # (out,)
    activation: Activation = Activation.RELU

    kind = "dense"

    def __post_init__(self):
        self.activation = Activation(self.activation)
        assert self.weights.dim() == 2 and self.bias.shape == (self.weights.shape[0],)

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def effective_weight(self):
        return self.weights

    def pre_activation(self, x):
        return x @ self.weights.T + self.bias

    def parameters(self):
        return {"weights": self.weights, "bias": self.bias}

    def backward(self, x, g_pre):
        grads = {"weights": g_pre.T @ x, "bias": g_pre.sum(dim=0)}
        return grads, g_pre @ self.weights


@dataclass
class BottleneckLayer:
    """Linear layer with weight ``factor @ factor.T``; rank is at most ``factor.shape[1]``."""

    factor: torch.Tensor  # (q, r_b)

    kind = "bottleneck"
    activation = Activation.IDENTITY

    @property
    def in_dim(self):
        return self.factor.shape[0]

    @property
    def out_dim(self):
        return self.factor.shape[0]

    @property
    def rank(self):
        return self.factor.shape[1]

    def effective_weight(self):
        return self.factor @ self.factor.T

    def pre_activation(self, x):
        return (x @ self.factor) @ self.factor.T

    def parameters(self):
        return {"factor": self.factor}

    def backward(self, x, g_pre):
        g_weight = g_pre.T @ x
        grads = {"factor": (g_weight + g_weight.T) @ self.factor}
        return grads, g_pre @ self.effective_weight()


Layer = Union[DenseLayer, BottleneckLayer]


@dataclass
class Network:
    layers: List[Layer]
    tap_index: int
    class_count: int

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise ValueError(
                    f"layer {i} expects {self.layers[i].in_dim} inputs, "
                    f"layer {i - 1} emits {self.layers[i - 1].out_dim}"
                )
        if not 0 <= self.tap_index < len(self.layers):
            raise ValueError(
                f"tap_index {self.tap_index} out of range for {len(self.layers)} layers"
            )
        last = self.layers[-1]
        if last.out_dim != self.class_count or last.activation is not Activation.IDENTITY:
            raise ValueError(
                f"last layer must emit {self.class_count} logits with identity activation"
            )

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    def parameter_count(self, start=0):
        return sum(
            p.numel() for layer in self.layers[start:] for p in layer.parameters().values()
        )

    def clone(self):
        return copy.deepcopy(self)

    def __call__(self, X):
        return forward_with_taps(self, X)[1]


@dataclass
class ForwardCache:
    inputs: torch.Tensor
    pre_activations: List[torch.Tensor] = field(default_factory=list)
    activations: List[torch.Tensor] = field(default_factory=list)

    @property
    def logits(self):
        return self.activations[-1]


@dataclass
class Gradients:
    layers: List[Dict[str, torch.Tensor]]
    inputs: torch.Tensor


def _as_batch(net, X):
    X = torch.as_tensor(X, dtype=DTYPE)
    if X.dim() == 1:
        X = X.unsqueeze(0)
    if X.dim() != 2 or X.shape[1] != net.input_dim:
        raise ValueError(
            f"input of shape {tuple(X.shape)} does not match network input dim {net.input_dim}"
        )
    return X


def _forward(net, X, start=0):
    cache = ForwardCache(inputs=X)
    x = X
    for layer in net.layers[start:]:
        pre = layer.pre_activation(x)
        x = _activate(pre, layer.activation)
        cache.pre_activations.append(pre)
        cache.activations.append(x)
    return cache


def forward_with_taps(net, X):
    """Post-activations of every layer and the final logits."""
    cache = _forward(net, _as_batch(net, X))
    return cache.activations, cache.logits


def forward_from(net, A, start):
    """Run layers ``start..`` on activations A (the head f+ when start = tap + 1)."""
    A = torch.as_tensor(A, dtype=DTYPE)
    if start == len(net.layers):
        return A
    if A.shape[1] != net.layers[start].in_dim:
        raise ValueError(
            f"activations have {A.shape[1]} columns, layer {start} expects {net.layers[start].in_dim}"
        )
    return _forward(net, A, start).logits


def _check_labels(net, X, labels):
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.shape[0] != X.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {X.shape[0]} inputs")
    if labels.numel() and (labels.min() < 0 or labels.max() >= net.class_count):
        raise ValueError(f"labels must lie in [0, {net.class_count})")
    return labels


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy."""
    log_probs = torch.log_softmax(logits, dim=1)
    return -log_probs.gather(1, labels.unsqueeze(1)).mean()


def _backward(net, cache, grad_logits, extra_activation_grads=None):
    extra = extra_activation_grads or {}
    grads = [None] * len(net.layers)
    g = grad_logits
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if i in extra:
            if extra[i].shape != cache.activations[i].shape:
                raise ValueError(
                    f"extra gradient at layer {i} has shape {tuple(extra[i].shape)}, "
                    f"activation has {tuple(cache.activations[i].shape)}"
                )
            g = g + extra[i]
        if layer.activation is Activation.RELU:
            # ReLU'(0) = 0.
            g = g * (cache.pre_activations[i] > 0).to(DTYPE)
        x = cache.activations[i - 1] if i > 0 else cache.inputs
        grads[i], g = layer.backward(x, g)
    return Gradients(layers=grads, inputs=g)


def _normalize_extra(net, extra_activation_grad):
    if extra_activation_grad is None:
        return None
    if isinstance(extra_activation_grad, dict):
        return {int(k): torch.as_tensor(v, dtype=DTYPE) for k, v in extra_activation_grad.items()}
    return {net.tap_index: torch.as_tensor(extra_activation_grad, dtype=DTYPE)}


def loss_and_grads(net, X, labels, extra_activation_grad=None):
    """Mean cross-entropy and its exact gradients.

    ``extra_activation_grad`` is added to dL/dA at the tap before backpropagating
    further down. Pass a ``{layer_index: grad}`` dict to inject at several layers.
    """
    X = _as_batch(net, X)
    labels = _check_labels(net, X, labels)
    cache = _forward(net, X)
    loss = cross_entropy(cache.logits, labels)
    probs = torch.softmax(cache.logits, dim=1)
    grad_logits = probs - torch.nn.functional.one_hot(labels, net.class_count).to(DTYPE)
    grad_logits = grad_logits / X.shape[0]
    grads = _backward(net, cache, grad_logits, _normalize_extra(net, extra_activation_grad))
    return loss.item(), grads


def input_gradient(net, X, labels):
    """Per-example gradient of the cross-entropy loss with respect to each input row."""
    X = _as_batch(net, X)
    labels = _check_labels(net, X, labels)
    cache = _forward(net, X)
    probs = torch.softmax(cache.logits, dim=1)
    grad_logits = probs - torch.nn.functional.one_hot(labels, net.class_count).to(DTYPE)
    return _backward(net, cache, grad_logits).inputs


def logit_jacobian(net, X):
    """Logits (n, k) and their input Jacobians (n, k, p)."""
    X = _as_batch(net, X)
    n, k = X.shape[0], net.class_count
    cache = _forward(net, X.repeat_interleave(k, dim=0))
    seeds = torch.eye(k, dtype=DTYPE).repeat(n, 1)
    jac = _backward(net, cache, seeds).inputs.reshape(n, k, X.shape[1])
    return cache.logits[::k], jac


def predict(net, X):
    """Argmax labels; ties go to the lowest class index."""
    logits = forward_with_taps(net, X)[1]
    return torch.argmax(logits, dim=1)


def apply_gradients(net, grads, rate):
    for layer, layer_grads in zip(net.layers, grads.layers):
        params = layer.parameters()
        for name, g in layer_grads.items():
            params[name].sub_(rate * g)


def nudge_off_kinks(net, X, margin=KINK_MARGIN, attempts=10):
    """Shift rows whose ReLU pre-activations sit within ``margin`` of 0.

    Rows still on a kink after ``attempts`` nudges of ``margin`` are dropped.
    Returns the adjusted inputs and the mask of kept rows.
    """
    X = _as_batch(net, X).clone()

    def on_kink(Xb):
        cache = _forward(net, Xb)
        flags = torch.zeros(Xb.shape[0], dtype=torch.bool)
        for layer, pre in zip(net.layers, cache.pre_activations):
            if layer.activation is Activation.RELU:
                flags |= (pre.abs() < margin).any(dim=1)
        return flags

    flags = on_kink(X)
    for _ in range(attempts):
        if not flags.any():
            break
        X[flags] += margin
        flags = on_kink(X)
    return X[~flags], ~flags


def _loss(net, X, labels):
    return cross_entropy(_forward(net, X).logits, labels).item()


def finite_diff_check(net, X, labels, h=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``. The numerator drops
    the rounding slack of the difference quotient, so gradients below float64
    resolution at step h do not count as errors. Inputs sitting on a ReLU kink
    are nudged off first (see ``nudge_off_kinks``).
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    X, kept = nudge_off_kinks(net, X)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)[kept]
    if X.shape[0] == 0:
        return 0.0
    _, grads = loss_and_grads(net, X, labels)
    shifted = net.clone()

    eps = torch.finfo(DTYPE).eps
    worst = 0.0
    for layer, layer_grads in zip(shifted.layers, grads.layers):
        for name, param in layer.parameters().items():
            flat = param.view(-1)
            analytic = layer_grads[name].reshape(-1)
            for j in range(flat.numel()):
                saved = flat[j].item()
                flat[j] = saved + h
                plus = _loss(shifted, X, labels)
                flat[j] = saved - h
                minus = _loss(shifted, X, labels)
                flat[j] = saved
                numeric = (plus - minus) / (2 * h)
                a = analytic[j].item()
                slack = FD_NOISE_ULPS * eps * max(abs(plus), abs(minus), 1.0) / (2 * h)
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, max(abs(a - numeric) - slack, 0.0) / denom)
    return worst


def he_uniform(out_dim, in_dim, generator):
    bound = math.sqrt(6.0 / in_dim)
    return (torch.rand(out_dim, in_dim, generator=generator, dtype=DTYPE) * 2 - 1) * bound


def build_mlp(input_dim, hidden, class_count, tap_index=None, seed=0):
    """ReLU MLP with He-uniform weights and zero biases.

    ``tap_index`` defaults to the penultimate layer (the last hidden layer).
    """
    generator = torch.Generator().manual_seed(seed)
    dims = [input_dim] + list(hidden) + [class_count]
    layers = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        layers.append(
            DenseLayer(
                weights=he_uniform(dims[i + 1], dims[i], generator),
                bias=torch.zeros(dims[i + 1], dtype=DTYPE),
                activation=Activation.IDENTITY if last else Activation.RELU,
            )
        )
    if tap_index is None:
        tap_index = max(len(layers) - 2, 0)
    return Network(layers=layers, tap_index=tap_index, class_count=class_count)


def orthonormal_factor(q, rank, generator):
    Q, _ = torch.linalg.qr(torch.randn(q, rank, generator=generator, dtype=DTYPE))
    Q = Q.contiguous()
    return Q


def insert_bottleneck(net, after, rank, seed=0):
    """Bottle-LR variant: a factorized bottleneck right after layer ``after``.

    The factor starts with orthonormal columns so ``F F^T`` is a rank-r projection.
    The tap moves onto the bottleneck output.
    """
    if not 0 <= after < len(net.layers) - 1:
        raise ValueError(f"cannot insert a bottleneck after layer {after}")
    q = net.layers[after].out_dim
    if not 1 <= rank <= q:
        raise ValueError(f"bottleneck rank {rank} out of range [1, {q}]")
    generator = torch.Generator().manual_seed(seed)
    bottleneck = BottleneckLayer(factor=orthonormal_factor(q, rank, generator))
    layers = [copy.deepcopy(layer) for layer in net.layers]
    layers.insert(after + 1, bottleneck)
    return Network(layers=layers, tap_index=after + 1, class_count=net.class_count)
