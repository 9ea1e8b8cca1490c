"""Virtual low-rank (LR) layer.

The layer sits beside the network at a tap. It never feeds the prediction
path: it reads the activations A, scores them with

    L_c = 1/n sum_i ||W^T (a_i + b) - (a_i + b)||^2
    L_n = 1/n sum_i |1 - ||a_i|||

and hands ``lambda1 dL_c/dA + lambda2 dL_n/dA`` back to the network while
updating its own W (through the symmetric carrier W_s) and b. Every
``projection_period`` steps W_s is replaced by its rank-r SPSD projection.
"""
from dataclasses import dataclass, field, replace
from typing import Optional

import torch

from spectral import linalg
from spectral.nystrom import NystromConfig, ProjectionBackend, project_rank_spsd, symmetrize

NORM_GRAD_TOL = 1e-12


@dataclass
class LRLayerState:
    W_s: torch.Tensor
    b: torch.Tensor
    target_rank: int
    tap_index: int
    lambda1: float = 1.0
    lambda2: float = 1.0
    w_learning_rate: Optional[float] = None  # None: follow the network's current rate
    projection_period: int = 10
    step_counter: int = 0
    backend: ProjectionBackend = ProjectionBackend.EXACT_SVD
    nystrom_cfg: Optional[NystromConfig] = None

    def __post_init__(self):
        self.backend = ProjectionBackend(self.backend)
        m = self.W_s.shape[0]
        if self.W_s.shape != (m, m) or self.b.shape != (m,):
            raise ValueError(
                f"W_s {tuple(self.W_s.shape)} and b {tuple(self.b.shape)} do not describe an m x m layer"
            )
        if not 0 <= self.target_rank < m:
            raise ValueError(f"target_rank {self.target_rank} must lie in [0, {m})")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be nonnegative")
        if self.projection_period < 1:
            raise ValueError(f"projection_period must be >= 1, got {self.projection_period}")
        if self.backend is not ProjectionBackend.EXACT_SVD and self.nystrom_cfg is None:
            self.nystrom_cfg = NystromConfig(l=min(2 * max(self.target_rank, 1), m))

    @classmethod
    def create(cls, dim, target_rank, tap_index, **kwargs):
        """Identity W_s (so L_c starts at zero) and zero bias."""
        return cls(
            W_s=torch.eye(dim, dtype=linalg.DTYPE),
            b=torch.zeros(dim, dtype=linalg.DTYPE),
            target_rank=target_rank,
            tap_index=tap_index,
            **kwargs,
        )

    @property
    def dim(self):
        return self.W_s.shape[0]

    @property
    def W(self):
        return symmetrize(self.W_s)

    def to_dict(self):
        return {
            "W_s": linalg.matrix_to_json(self.W_s),
            "b": self.b.tolist(),
            "r": self.target_rank,
            "tap_index": self.tap_index,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "w_learning_rate": self.w_learning_rate,
            "K": self.projection_period,
            "step_counter": self.step_counter,
            "backend": self.backend.value,
            "nystrom": self.nystrom_cfg.to_dict() if self.nystrom_cfg else None,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            W_s=linalg.matrix_from_json(d["W_s"]),
            b=torch.tensor(d["b"], dtype=linalg.DTYPE),
            target_rank=d["r"],
            tap_index=d["tap_index"],
            lambda1=d["lambda1"],
            lambda2=d["lambda2"],
            w_learning_rate=d.get("w_learning_rate"),
            projection_period=d["K"],
            step_counter=d.get("step_counter", 0),
            backend=d["backend"],
            nystrom_cfg=NystromConfig(**d["nystrom"]) if d.get("nystrom") else None,
        )


@dataclass
class LRBatchOutput:
    Z: torch.Tensor
    loss_c: float
    loss_n: float
    grad_into_activations: Optional[torch.Tensor] = None
    grad_W: Optional[torch.Tensor] = None
    grad_b: Optional[torch.Tensor] = None


def _check_activations(A, state):
    A = torch.as_tensor(A, dtype=linalg.DTYPE)
    if A.dim() != 2 or A.shape[1] != state.dim:
        raise ValueError(
            f"activations of shape {tuple(A.shape)} do not match LR layer dim {state.dim}"
        )
    return A


def lr_losses(A, state):
    A = _check_activations(A, state)
    n = A.shape[0]
    Y = A + state.b
    Z = Y @ state.W
    residual = Z - Y
    loss_c = (residual**2).sum() / n
    loss_n = (1 - A.norm(dim=1)).abs().sum() / n
    return LRBatchOutput(Z=Z, loss_c=loss_c.item(), loss_n=loss_n.item())


def lr_grads(A, state):
    A = _check_activations(A, state)
    n, m = A.shape
    out = lr_losses(A, state)
    W = state.W
    Y = A + state.b
    residual = out.Z - Y

    # L_c = 1/n ||Y (W - I)||_F^2
    d_residual = 2 * residual / n
    d_Y = d_residual @ (W - torch.eye(m, dtype=linalg.DTYPE)).T
    d_W = Y.T @ d_residual
    d_W_s = (d_W + d_W.T) / 2

    # L_n; subgradient taken as 0 at ||a|| = 0 and ||a|| = 1.
    norms = A.norm(dim=1, keepdim=True)
    active = (norms > 0) & ((1 - norms).abs() >= NORM_GRAD_TOL)
    unit = torch.where(active, A / torch.where(active, norms, torch.ones_like(norms)), torch.zeros_like(A))
    d_A_norm = -torch.sign(1 - norms) * unit / n

    out.grad_into_activations = state.lambda1 * d_Y + state.lambda2 * d_A_norm
    out.grad_W = state.lambda1 * d_W_s
    out.grad_b = state.lambda1 * d_Y.sum(dim=0)
    return out


def lr_step(state, grad_W, grad_b, rate=None):
    """Gradient step on W_s and b, then the periodic rank projection.

    Returns a new state; the projected carrier is stored in W_s so later
    symmetrizations leave it unchanged.
    """
    if grad_W.shape != state.W_s.shape or grad_b.shape != state.b.shape:
        raise ValueError("gradient shapes do not match the LR layer state")
    step = state.w_learning_rate if state.w_learning_rate is not None else rate
    if step is None:
        raise ValueError("no learning rate for the LR layer: set w_learning_rate or pass rate")

    W_s = state.W_s - step * grad_W
    b = state.b - step * grad_b
    counter = state.step_counter + 1
    if counter % state.projection_period == 0:
        cfg = state.nystrom_cfg
        if cfg is not None:
            cfg = replace(cfg, rng_seed=cfg.rng_seed + counter)
        W_s = project_rank_spsd(W_s, state.target_rank, state.backend, cfg)
    return replace(state, W_s=W_s, b=b, step_counter=counter)


@dataclass
class LRRegularizer:
    """Training hook: feeds tap activations through the LR layer each batch."""

    state: LRLayerState
    last: Optional[LRBatchOutput] = field(default=None, repr=False)

    @property
    def tap_index(self):
        return self.state.tap_index

    def __call__(self, A, rate):
        out = lr_grads(A, self.state)
        self.state = lr_step(self.state, out.grad_W, out.grad_b, rate)
        self.last = out
        return out.grad_into_activations
