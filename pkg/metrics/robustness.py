"""Random-noise accuracy, perturbation propagation and layer cushion."""
from dataclasses import dataclass, field
from typing import List, Tuple

import torch

from models import classifier
from models.utils import accuracy

DTYPE = torch.float64
CUSHION_BINS = 50
# Per-example streams are seeded rng_seed * EXAMPLE_STREAM_STRIDE + index.
EXAMPLE_STREAM_STRIDE = 1_000_003


@dataclass(frozen=True)
class NoiseConfig:
    pixel_prob: float
    sigma: float = 128 / 255  # standard deviation of the additive noise
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.pixel_prob <= 1:
            raise ValueError(f"pixel_prob must lie in [0, 1], got {self.pixel_prob}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def perturb_features(X, cfg, bounds=(0.0, 1.0)):
    """Each feature gets ``N(0, sigma)`` noise with probability ``pixel_prob``.

    Example i draws from its own generator, so results do not depend on batching.
    """
    X = torch.as_tensor(X, dtype=DTYPE)
    noisy = X.clone()
    for i in range(X.shape[0]):
        generator = torch.Generator().manual_seed(cfg.rng_seed * EXAMPLE_STREAM_STRIDE + i)
        mask = torch.rand(X.shape[1], generator=generator, dtype=DTYPE) < cfg.pixel_prob
        noise = torch.randn(X.shape[1], generator=generator, dtype=DTYPE) * cfg.sigma
        noisy[i] = (X[i] + torch.where(mask, noise, torch.zeros_like(noise))).clamp(*bounds)
    return noisy


def noisy_accuracy(net, X, y, cfg, bounds=(0.0, 1.0)):
    noisy = perturb_features(X, cfg, bounds)
    return accuracy(classifier.predict(net, noisy), y, net.class_count)


@dataclass
class PropagationReport:
    tap_index: int
    pairs: List[Tuple[float, float]] = field(default_factory=list)
    skipped: int = 0

    def mean_representation_ratio(self):
        if not self.pairs:
            return 0.0
        return sum(p[1] for p in self.pairs) / len(self.pairs)

    def to_dict(self):
        return {
            "tap_index": self.tap_index,
            "pairs": [list(p) for p in self.pairs],
            "skipped": self.skipped,
            "mean_input_ratio": sum(p[0] for p in self.pairs) / len(self.pairs) if self.pairs else 0.0,
            "mean_representation_ratio": self.mean_representation_ratio(),
        }


def perturbation_propagation(net, X_clean, X_perturbed, tap=None):
    """Squared relative change at the input against squared relative change at the tap."""
    tap = net.tap_index if tap is None else tap
    X_clean = torch.as_tensor(X_clean, dtype=DTYPE)
    X_perturbed = torch.as_tensor(X_perturbed, dtype=DTYPE)
    if X_clean.shape != X_perturbed.shape:
        raise ValueError("clean and perturbed batches differ in shape")
    clean_repr = classifier.forward_with_taps(net, X_clean)[0][tap]
    perturbed_repr = classifier.forward_with_taps(net, X_perturbed)[0][tap]

    report = PropagationReport(tap_index=tap)
    for i in range(X_clean.shape[0]):
        x_norm = X_clean[i].norm() ** 2
        r_norm = clean_repr[i].norm() ** 2
        if x_norm == 0 or r_norm == 0:
            report.skipped += 1
            continue
        input_ratio = (X_perturbed[i] - X_clean[i]).norm() ** 2 / x_norm
        repr_ratio = (perturbed_repr[i] - clean_repr[i]).norm() ** 2 / r_norm
        report.pairs.append((input_ratio.item(), repr_ratio.item()))
    return report


@dataclass
class CushionReport:
    layer_index: int
    per_example_ratios: List[float] = field(default_factory=list)
    # Dataset positions of the ratios; skipped examples leave gaps.
    example_indices: List[int] = field(default_factory=list)
    mu_layer: float = 0.0
    skipped: int = 0

    def to_dict(self):
        return {
            "layer_index": self.layer_index,
            "mu_layer": self.mu_layer,
            "skipped": self.skipped,
            "count": len(self.per_example_ratios),
            "per_example_ratios": list(self.per_example_ratios),
            "example_indices": list(self.example_indices),
            "histogram": cushion_histogram(self),
        }


def layer_cushion(net, X, layer):
    """``||W phi|| / (||W||_F ||phi||)`` for every example; mu is their minimum.

    Bottleneck layers use their effective weight ``F F^T``.
    """
    if not 0 <= layer < len(net.layers):
        raise ValueError(f"layer {layer} out of range for {len(net.layers)} layers")
    X = torch.as_tensor(X, dtype=DTYPE)
    activations, _ = classifier.forward_with_taps(net, X)
    inputs = X if layer == 0 else activations[layer - 1]
    W = net.layers[layer].effective_weight()
    w_norm = torch.linalg.norm(W)

    report = CushionReport(layer_index=layer)
    input_norms = inputs.norm(dim=1)
    output_norms = (inputs @ W.T).norm(dim=1)
    for i, (x_norm, out_norm) in enumerate(zip(input_norms.tolist(), output_norms.tolist())):
        if x_norm == 0 or w_norm == 0:
            report.skipped += 1
            continue
        report.per_example_ratios.append(out_norm / (w_norm.item() * x_norm))
        report.example_indices.append(i)
    if report.per_example_ratios:
        report.mu_layer = min(report.per_example_ratios)
    return report


def cushion_histogram(report, bins=CUSHION_BINS):
    """Counts over ``bins`` uniform bins on [0, 1] as ``(bin_lo, bin_hi, count)`` rows."""
    ratios = torch.tensor(report.per_example_ratios, dtype=DTYPE).clamp(0.0, 1.0)
    counts = torch.histc(ratios, bins=bins, min=0.0, max=1.0) if ratios.numel() else torch.zeros(bins)
    edges = torch.linspace(0.0, 1.0, bins + 1, dtype=DTYPE)
    return [
        (edges[j].item(), edges[j + 1].item(), int(counts[j].item())) for j in range(bins)
    ]
