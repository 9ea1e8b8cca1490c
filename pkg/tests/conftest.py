import pytest
import torch

from config import config_from_dict
from datasets.blobs import gen_blobs, split_dataset
from models import classifier

DTYPE = torch.float64


def random_spsd(m, rank=None, seed=0, decay=None):
    """Random SPSD matrix; ``decay`` gives eigenvalues decay**i, ``rank`` truncates."""
    generator = torch.Generator().manual_seed(seed)
    Q, _ = torch.linalg.qr(torch.randn(m, m, generator=generator, dtype=DTYPE))
    if decay is not None:
        values = decay ** torch.arange(m, dtype=DTYPE)
    else:
        values = torch.rand(m, generator=generator, dtype=DTYPE) + 0.1
    if rank is not None:
        values[rank:] = 0.0
    return (Q * values) @ Q.T


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def small_blobs():
    return gen_blobs(k=3, dim=6, n_per_class=20, separation=4.0, seed=0)


@pytest.fixture
def split_blobs():
    data = gen_blobs(k=3, dim=8, n_per_class=40, separation=6.0, seed=0)
    return split_dataset(data, 0.25, seed=7)


@pytest.fixture
def small_net():
    return classifier.build_mlp(6, [8, 5], 3, seed=0)


def tiny_config(tmp_path, **overrides):
    payload = {
        "seed": 0,
        "output_dir": str(tmp_path / "out"),
        "verbose": False,
        "tensorboard": False,
        "dataset": {"kind": "blobs", "classes": 3, "dim": 8, "n_per_class": 30, "separation": 6.0},
        "network": {"hidden": [12, 8], "tap_index": 1},
        "train": {"epochs": 4, "batch_size": 16, "pretrain_epochs": 1, "projection_period": 2},
        "variants": ["N-LR", "1-LR"],
        "lr_layer": {"target_rank": 2},
        "attacks": [{"kind": "iter_fsgm", "epsilon": 0.05, "alpha": 0.01, "max_iters": 3}],
        "sweep_epsilons": [0.02, 0.05],
        "search": {"grid_start": 0.01, "grid_steps": 4, "bisection_steps": 1, "max_examples": 10, "max_iters": 5},
        "metrics": {"min_perturbation": True},
        "compression": {"dims": [2, 4], "max_margin": {"epochs": 3}},
    }
    payload.update(overrides)
    return config_from_dict(payload)


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(tmp_path)
