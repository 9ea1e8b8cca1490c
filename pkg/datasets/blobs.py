from dataclasses import dataclass, field
from typing import Dict, Optional

import torch

DTYPE = torch.float64


@dataclass
class Dataset:
    features: torch.Tensor  # (n, p), values in [0, 1]
    labels: torch.Tensor  # (n,) int64
    class_count: int
    name: str = "dataset"
    rescale: Optional[Dict[str, list]] = field(default=None, repr=False)

    def __post_init__(self):
        self.features = torch.as_tensor(self.features, dtype=DTYPE)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        assert self.features.dim() == 2, "features must be a matrix"
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} feature rows"
            )
        if self.labels.numel() and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx, name=None):
        return Dataset(
            features=self.features[idx].clone(),
            labels=self.labels[idx].clone(),
            class_count=self.class_count,
            name=name or self.name,
            rescale=self.rescale,
        )


def gen_blobs(k, dim, n_per_class, separation, seed):
    """k unit-variance Gaussian clusters centred at ``separation`` times random unit directions.

    All features share one affine map onto [0, 1], so the geometry between
    clusters is preserved. Rows are ordered by class.
    """
    if k < 2 or dim < 2:
        raise ValueError(f"need k >= 2 and dim >= 2, got k={k}, dim={dim}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    generator = torch.Generator().manual_seed(seed)
    directions = torch.randn(k, dim, generator=generator, dtype=DTYPE)
    directions = directions / directions.norm(dim=1, keepdim=True)
    means = separation * directions

    noise = torch.randn(k, n_per_class, dim, generator=generator, dtype=DTYPE)
    features = (means[:, None, :] + noise).reshape(k * n_per_class, dim)
    labels = torch.arange(k).repeat_interleave(n_per_class)

    lo, hi = features.min(), features.max()
    features = (features - lo) / (hi - lo)
    return Dataset(
        features=features,
        labels=labels,
        class_count=k,
        name=f"blobs-k{k}-d{dim}-s{separation:g}",
        rescale={"offset": [lo.item()], "span": [(hi - lo).item()]},
    )


def split_dataset(data, test_fraction, seed):
    """Shuffled train/test split; the input dataset is left untouched."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(data)
    n_test = max(1, int(round(test_fraction * n)))
    if n_test >= n:
        raise ValueError(f"dataset of {n} rows is too small to split")
    order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    return (
        data.subset(order[n_test:], f"{data.name}-train"),
        data.subset(order[:n_test], f"{data.name}-test"),
    )
