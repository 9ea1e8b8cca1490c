"""Hybrid max-margin models: frozen network tap -> optional PCA -> linear classifier."""
from dataclasses import dataclass, field
from typing import List, Optional

import torch

from models import classifier
from spectral.linalg import PcaModel, pca_transform

DTYPE = torch.float64


@dataclass(frozen=True)
class MaxMarginConfig:
    eta0: Optional[float] = None  # None: 1 / (l2_coeff * n)
    alpha_decay: Optional[float] = None  # None: l2_coeff
    l2_coeff: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if self.eta0 is not None and self.eta0 <= 0:
            raise ValueError(f"eta0 must be > 0, got {self.eta0}")
        if self.l2_coeff < 0:
            raise ValueError(f"l2_coeff must be >= 0, got {self.l2_coeff}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def resolve(self, n):
        eta0 = self.eta0
        if eta0 is None:
            eta0 = 1.0 / (self.l2_coeff * n) if self.l2_coeff > 0 else 0.1
        alpha = self.alpha_decay if self.alpha_decay is not None else self.l2_coeff
        return eta0, alpha


def learning_rate(eta0, alpha, t):
    """``eta_t = eta0 / (1 + alpha t)``."""
    return eta0 / (1 + alpha * t)


@dataclass
class LinearClassifier:
    weights: torch.Tensor  # (k, d)
    bias: torch.Tensor  # (k,)
    objective_history: List[float] = field(default_factory=list, repr=False)

    def decision(self, X):
        return torch.as_tensor(X, dtype=DTYPE) @ self.weights.T + self.bias

    def predict(self, X):
        return torch.argmax(self.decision(X), dim=1)

    @property
    def parameter_count(self):
        return self.weights.numel() + self.bias.numel()


def _signed_targets(labels, k):
    return 2 * torch.nn.functional.one_hot(labels, k).to(DTYPE) - 1


def ovr_objective(clf, X, labels, l2_coeff):
    """Summed one-vs-rest mean hinge loss plus ``l2/2 ||W||^2``."""
    targets = _signed_targets(labels, clf.weights.shape[0])
    margins = targets * clf.decision(X)
    hinge = torch.clamp(1 - margins, min=0).mean(dim=0).sum()
    return (hinge + 0.5 * l2_coeff * (clf.weights**2).sum()).item()


def train_max_margin(embeddings, labels, cfg, class_count=None):
    """One-vs-rest linear SVM trained by mini-batch SGD on the hinge loss."""
    X = torch.as_tensor(embeddings, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if torch.unique(labels).numel() < 2:
        raise ValueError("max-margin training needs at least two classes")
    k = class_count or int(labels.max()) + 1
    n, d = X.shape
    eta0, alpha = cfg.resolve(n)
    targets = _signed_targets(labels, k)

    clf = LinearClassifier(
        weights=torch.zeros(k, d, dtype=DTYPE), bias=torch.zeros(k, dtype=DTYPE)
    )
    generator = torch.Generator().manual_seed(cfg.rng_seed)
    t = 0
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            Xb, Tb = X[idx], targets[idx]
            violated = ((Tb * clf.decision(Xb)) < 1).to(DTYPE)
            coeff = -(violated * Tb) / len(idx)
            grad_w = coeff.T @ Xb + cfg.l2_coeff * clf.weights
            grad_b = coeff.sum(dim=0)
            eta = learning_rate(eta0, alpha, t)
            clf.weights -= eta * grad_w
            clf.bias -= eta * grad_b
            t += 1
        clf.objective_history.append(ovr_objective(clf, X, labels, cfg.l2_coeff))
    return clf


@dataclass
class HybridModel:
    base: classifier.Network
    tap: int
    linear: LinearClassifier
    pca: Optional[PcaModel] = None

    def __post_init__(self):
        dim = self.base.layers[self.tap].out_dim
        if self.pca is not None:
            if self.pca.mean.shape[0] != dim:
                raise ValueError(f"PCA expects {self.pca.mean.shape[0]} features, tap emits {dim}")
            dim = self.pca.target_dim
        if self.linear.weights.shape[1] != dim:
            raise ValueError(f"linear classifier expects {self.linear.weights.shape[1]} inputs, got {dim}")

    def features(self, X):
        embeddings = extract_embeddings(self.base, X, self.tap)
        if self.pca is not None:
            embeddings = pca_transform(self.pca, embeddings)
        return embeddings


def extract_embeddings(net, X, tap=None):
    """Rows of f-(x) at ``tap`` (the network's tap by default)."""
    tap = net.tap_index if tap is None else tap
    if not 0 <= tap < len(net.layers):
        raise ValueError(f"tap {tap} out of range for {len(net.layers)} layers")
    return classifier.forward_with_taps(net, X)[0][tap]


def hybrid_predict(h, X):
    return h.linear.predict(h.features(X))
