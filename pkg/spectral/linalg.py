"""Dense matrix kernel: SVD, rank truncation, variance ratio and PCA.

Every matrix is a 2-D ``torch.float64`` tensor. The functions here are pure and
are the exact oracle the randomized projections are checked against.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import torch

from errors import SvdConvergenceError

DTYPE = torch.float64
DEFAULT_RANK_TOL = 1e-10
MIN_FEATURE_STD = 1e-12


def as_matrix(M, name="M"):
    M = torch.as_tensor(M, dtype=DTYPE)
    if M.dim() != 2:
        raise ValueError(f"{name} must be 2-D, got shape {tuple(M.shape)}")
    if not torch.isfinite(M).all():
        raise ValueError(f"{name} has non-finite entries")
    return M


def svd(M):
    """Thin SVD ``M = U diag(S) V^T`` with S nonincreasing.

    Returns ``(U, S, V)``; V holds the right singular vectors as columns.
    """
    M = as_matrix(M)
    try:
        U, S, Vh = torch.linalg.svd(M, full_matrices=False)
    except torch.linalg.LinAlgError as e:
        raise SvdConvergenceError() from e
    return U, S, Vh.mT


def singular_values(M):
    M = as_matrix(M)
    try:
        return torch.linalg.svdvals(M)
    except torch.linalg.LinAlgError as e:
        raise SvdConvergenceError() from e


def symmetric_eig(M):
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order."""
    M = as_matrix(M)
    try:
        values, vectors = torch.linalg.eigh(M)
    except torch.linalg.LinAlgError as e:
        raise SvdConvergenceError("eigendecomposition did not converge") from e
    return values.flip(0), vectors.flip(1)


def truncate_rank(M, r):
    """Frobenius-optimal rank-r approximation (Eckart-Young)."""
    M = as_matrix(M)
    p = min(M.shape)
    if not 0 <= r <= p:
        raise ValueError(f"rank {r} out of range [0, {p}] for shape {tuple(M.shape)}")
    if r == p:
        return M.clone()
    U, S, V = svd(M)
    return (U[:, :r] * S[:r]) @ V[:, :r].T


def _cumulative_ratio(S):
    energy = torch.cumsum(S**2, dim=0)
    total = energy[-1]
    if total == 0:
        return torch.ones_like(energy)
    return energy / total


def variance_ratio(M, r):
    """Share of squared singular-value mass held by the top r values.

    The zero matrix has ratio 1.0 for every r.
    """
    S = singular_values(M)
    p = S.shape[0]
    if not 0 <= r <= p:
        raise ValueError(f"rank {r} out of range [0, {p}]")
    if r == 0:
        return 1.0 if torch.all(S == 0) else 0.0
    return _cumulative_ratio(S)[r - 1].item()


def matrix_rank(M, tol=DEFAULT_RANK_TOL):
    """Number of singular values above ``tol * sigma_1``."""
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    S = singular_values(M)
    if S.numel() == 0 or S[0] == 0:
        return 0
    return int((S > tol * S[0]).sum().item())


@dataclass
class SpectrumReport:
    singular_values: List[float]
    variance_ratio_at: Dict[int, float] = field(default_factory=dict)

    def to_dict(self):
        return {
            "singular_values": self.singular_values,
            "variance_ratio_at": {str(k): v for k, v in self.variance_ratio_at.items()},
        }


def spectrum(M, ranks=None, center=False):
    M = as_matrix(M)
    if center:
        M = M - M.mean(dim=0, keepdim=True)
    S = singular_values(M)
    ratios = _cumulative_ratio(S)
    if ranks is None:
        ranks = range(1, S.shape[0] + 1)
    report = SpectrumReport(singular_values=S.tolist())
    for r in ranks:
        if not 1 <= r <= S.shape[0]:
            raise ValueError(f"rank {r} out of range [1, {S.shape[0]}]")
        report.variance_ratio_at[int(r)] = ratios[r - 1].item()
    return report


@dataclass
class PcaModel:
    mean: torch.Tensor
    scale: torch.Tensor
    components: torch.Tensor  # (dim, target_dim), orthonormal columns

    @property
    def target_dim(self):
        return self.components.shape[1]

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "components": matrix_to_json(self.components),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            mean=torch.tensor(d["mean"], dtype=DTYPE),
            scale=torch.tensor(d["scale"], dtype=DTYPE),
            components=matrix_from_json(d["components"]),
        )


def pca_fit(data, target_dim, standardize=True):
    data = as_matrix(data, "data")
    n, m = data.shape
    if n < 2:
        raise ValueError(f"PCA needs at least 2 rows, got {n}")
    if not 0 <= target_dim <= m:
        raise ValueError(f"target_dim {target_dim} out of range [0, {m}]")

    mean = data.mean(dim=0)
    if standardize:
        std = data.std(dim=0, unbiased=False)
        scale = torch.where(std < MIN_FEATURE_STD, torch.ones_like(std), std)
    else:
        scale = torch.ones(m, dtype=DTYPE)

    _, _, V = svd((data - mean) / scale)
    if V.shape[1] < m:
        # Fewer rows than features: complete the basis so any target_dim <= m works.
        Q, _ = torch.linalg.qr(torch.cat([V, torch.eye(m, dtype=DTYPE)], dim=1))
        V = torch.cat([V, Q[:, V.shape[1] : m]], dim=1)
    components = V[:, :target_dim]

    # Deterministic sign: largest-magnitude loading of each component is positive.
    if target_dim > 0:
        pivots = components.abs().argmax(dim=0)
        signs = torch.sign(components[pivots, torch.arange(target_dim)])
        signs[signs == 0] = 1.0
        components = components * signs

    return PcaModel(mean=mean, scale=scale, components=components)


def pca_transform(model, data):
    data = as_matrix(data, "data")
    if data.shape[1] != model.mean.shape[0]:
        raise ValueError(
            f"data has {data.shape[1]} features, PCA model expects {model.mean.shape[0]}"
        )
    return ((data - model.mean) / model.scale) @ model.components


def pca_inverse_transform(model, projected):
    projected = as_matrix(projected, "projected")
    return (projected @ model.components.T) * model.scale + model.mean


def pca_fit_transform(data, target_dim, standardize=True):
    model = pca_fit(data, target_dim, standardize=standardize)
    return model, pca_transform(model, data)


def matrix_to_json(M):
    M = torch.as_tensor(M, dtype=DTYPE)
    return {"rows": M.shape[0], "cols": M.shape[1], "data": M.reshape(-1).tolist()}


def matrix_from_json(d):
    rows, cols, data = d["rows"], d["cols"], d["data"]
    if len(data) != rows * cols:
        raise ValueError(f"matrix payload has {len(data)} entries, expected {rows * cols}")
    return as_matrix(torch.tensor(data, dtype=DTYPE).reshape(rows, cols))


def relu_rank_example() -> Tuple[int, int]:
    """Rank of ``[[1,-1,1],[-1,1,-1]]`` before and after an elementwise ReLU."""
    A = torch.tensor([[1.0, -1.0, 1.0], [-1.0, 1.0, -1.0]], dtype=DTYPE)
    return matrix_rank(A), matrix_rank(torch.relu(A))
