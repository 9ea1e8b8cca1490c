"""PCA compression of tap embeddings and hybrid max-margin evaluation."""
from dataclasses import dataclass, field
from typing import Dict, List

import torch

from models import classifier
from models.hybrid import HybridModel, extract_embeddings, hybrid_predict, train_max_margin
from models.utils import accuracy
from spectral.linalg import pca_fit, pca_inverse_transform, pca_transform


@dataclass
class CompressionRow:
    model: str
    dim: int
    accuracy: float
    params_replaced: int


@dataclass
class CompressionTable:
    rows: List[CompressionRow] = field(default_factory=list)

    def accuracy_at(self, model, dim):
        for row in self.rows:
            if row.model == model and row.dim == dim:
                return row.accuracy
        raise KeyError(f"no row for model {model!r} at dim {dim}")

    def to_dict(self):
        return [row.__dict__.copy() for row in self.rows]


def fit_hybrid(net, train, tap, dim, cfg):
    """Hybrid on ``dim`` PCA components of the tap embeddings (no PCA when dim is None)."""
    embeddings = extract_embeddings(net, train.features, tap)
    pca = None
    if dim is not None:
        pca = pca_fit(embeddings, dim)
        embeddings = pca_transform(pca, embeddings)
    linear = train_max_margin(embeddings, train.labels, cfg, class_count=net.class_count)
    return HybridModel(base=net, tap=tap, linear=linear, pca=pca)


def compression_eval(models: Dict[str, classifier.Network], train, test, dims, tap, cfg):
    """Test accuracy of a hybrid per (model, dim); one row each, in input order.

    ``params_replaced`` counts the head parameters after the tap that the
    linear classifier stands in for.
    """
    table = CompressionTable()
    for name, net in models.items():
        tap_index = net.tap_index if tap is None else tap
        replaced = net.parameter_count(start=tap_index + 1)
        for dim in dims:
            hybrid = fit_hybrid(net, train, tap_index, dim, cfg)
            acc = accuracy(hybrid_predict(hybrid, test.features), test.labels, net.class_count)
            table.rows.append(
                CompressionRow(model=name, dim=dim, accuracy=acc, params_replaced=replaced)
            )
    return table


def hybrid_adversarial_eval(h, X_adv, y_true, fooled=None):
    """Share of base-model adversarial examples the hybrid still classifies correctly.

    With a ``fooled`` mask only the rows that fooled the base network count;
    accuracy is against ``y_true``.
    """
    X_adv = torch.as_tensor(X_adv)
    y_true = torch.as_tensor(y_true)
    if fooled is not None:
        mask = torch.as_tensor(fooled, dtype=torch.bool)
        if mask.shape[0] != X_adv.shape[0]:
            raise ValueError(f"fooled mask has {mask.shape[0]} rows, expected {X_adv.shape[0]}")
        X_adv, y_true = X_adv[mask], y_true[mask]
    if X_adv.shape[0] == 0:
        raise ValueError("no adversarial examples to evaluate")
    return accuracy(hybrid_predict(h, X_adv), y_true, h.base.class_count)


def posthoc_truncation_eval(net, train, test, rank, tap=None):
    """Accuracy after projecting test activations onto a rank-r PCA subspace.

    The subspace is fit on train activations (no scaling) and the truncated
    activations run through the original head.
    """
    tap = net.tap_index if tap is None else tap
    pca = pca_fit(extract_embeddings(net, train.features, tap), rank, standardize=False)
    truncated = pca_inverse_transform(pca, pca_transform(pca, extract_embeddings(net, test.features, tap)))
    logits = classifier.forward_from(net, truncated, tap + 1)
    return accuracy(torch.argmax(logits, dim=1), test.labels, net.class_count)
