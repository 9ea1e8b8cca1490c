"""Ensembled Nystrom approximation and the SPSD rank projection of the LR layer."""
from dataclasses import dataclass, replace
from enum import Enum

import torch

from errors import SmoothingError, SvdConvergenceError
from spectral import linalg

PINV_CUTOFF = 1e-10


class ProjectionBackend(str, Enum):
    EXACT_SVD = "exact_svd"
    NYSTROM_SINGLE = "nystrom_single"
    NYSTROM_ENSEMBLED = "nystrom_ensembled"


@dataclass(frozen=True)
class NystromConfig:
    l: int
    ensemble_t: int = 1
    smoothing_delta: float = 0.01
    max_smoothing_attempts: int = 20
    rng_seed: int = 0

    def __post_init__(self):
        if self.l < 1:
            raise ValueError(f"l must be >= 1, got {self.l}")
        if self.ensemble_t < 1:
            raise ValueError(f"ensemble_t must be >= 1, got {self.ensemble_t}")
        if self.smoothing_delta <= 0:
            raise ValueError(f"smoothing_delta must be > 0, got {self.smoothing_delta}")

    def to_dict(self):
        return {
            "l": self.l,
            "ensemble_t": self.ensemble_t,
            "smoothing_delta": self.smoothing_delta,
            "max_smoothing_attempts": self.max_smoothing_attempts,
            "rng_seed": self.rng_seed,
        }


def _check_square(M, name):
    M = linalg.as_matrix(M, name)
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {tuple(M.shape)}")
    return M


def symmetrize(W_s):
    W_s = _check_square(W_s, "W_s")
    return (W_s + W_s.T) / 2


def smooth_for_svd(Z, cfg):
    """Add ``k * delta * I`` for the smallest k at which the SVD converges.

    Returns the (possibly shifted) matrix and k.
    """
    Z = _check_square(Z, "Z")
    eye = torch.eye(Z.shape[0], dtype=linalg.DTYPE)
    for k in range(cfg.max_smoothing_attempts + 1):
        candidate = Z if k == 0 else Z + (k * cfg.smoothing_delta) * eye
        try:
            linalg.svd(candidate)
        except SvdConvergenceError:
            continue
        return candidate, k
    raise SmoothingError(cfg.max_smoothing_attempts)


def _spsd_factor(Z, r):
    """``F`` with ``F F^T = Z_r^+`` built from the top-r nonnegative eigenpairs."""
    values, vectors = linalg.symmetric_eig(symmetrize(Z))
    values, vectors = values[:r], vectors[:, :r]
    if values.numel() == 0 or values[0] <= 0:
        return torch.zeros(Z.shape[0], 0, dtype=linalg.DTYPE)
    keep = values > PINV_CUTOFF * values[0]
    return vectors[:, keep] / values[keep].sqrt()


def _nystrom_run(W, r, cfg, seed):
    m = W.shape[0]
    generator = torch.Generator().manual_seed(seed)
    idx = torch.randperm(m, generator=generator)[: cfg.l].sort().values
    C = W[:, idx]
    Z, _ = smooth_for_svd(C[idx, :], cfg)
    F = C @ _spsd_factor(Z, r)
    return F @ F.T


def nystrom_approx(W, r, cfg):
    """``C Z_r^+ C^T`` from ``cfg.l`` uniformly sampled columns.

    With ``cfg.ensemble_t > 1`` the result is the mean of that many runs, each
    seeded ``cfg.rng_seed + run`` and summed in run order.
    """
    W = symmetrize(W)
    m = W.shape[0]
    if cfg.l > m:
        raise ValueError(f"l={cfg.l} exceeds matrix dimension {m}")
    if not 0 <= r <= cfg.l:
        raise ValueError(f"rank {r} out of range [0, l={cfg.l}]")

    total = torch.zeros_like(W)
    for run in range(cfg.ensemble_t):
        total += _nystrom_run(W, r, cfg, cfg.rng_seed + run)
    return symmetrize(total / cfg.ensemble_t)


def project_rank_spsd(W_s, r, backend, cfg=None):
    """Symmetrize then project onto SPSD matrices of rank at most r."""
    W = symmetrize(W_s)
    m = W.shape[0]
    if not 0 <= r <= m:
        raise ValueError(f"rank {r} out of range [0, {m}]")
    backend = ProjectionBackend(backend)

    if backend is ProjectionBackend.EXACT_SVD:
        values, vectors = linalg.symmetric_eig(W)
        values = values[:r].clamp(min=0.0)
        vectors = vectors[:, :r]
        return symmetrize((vectors * values) @ vectors.T)

    if cfg is None:
        raise ValueError(f"backend {backend.value} needs a NystromConfig")
    if backend is ProjectionBackend.NYSTROM_SINGLE:
        cfg = replace(cfg, ensemble_t=1)
    return nystrom_approx(W, r, cfg)
