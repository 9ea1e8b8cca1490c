"""Adversarial examples against ``models.classifier.Network`` models.

Iter-FSGM and Iter-LL-FSGM take L-inf projected sign-gradient steps; DeepFool
walks to the nearest linearized decision boundary. All attacks run on a batch
with a per-row stop mask, and the single-example entry points wrap the batch
versions. Every attack starts at the clean input.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import torch
import tqdm

from models import classifier
from models.utils import accuracy

DTYPE = torch.float64
MISCLASSIFICATION_TARGET = 0.99


class AttackKind(str, Enum):
    ITER_FSGM = "iter_fsgm"
    ITER_LL_FSGM = "iter_ll_fsgm"
    DEEPFOOL = "deepfool"


class StopMode(str, Enum):
    FIXED_STEPS = "fixed_steps"
    UNTIL_MISCLASSIFIED = "until_misclassified"


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind = AttackKind.ITER_FSGM
    epsilon: float = 0.03
    alpha: float = 0.005
    max_iters: int = 20
    stop_mode: StopMode = StopMode.FIXED_STEPS
    overshoot: float = 0.02
    input_bounds: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "stop_mode", StopMode(self.stop_mode))
        object.__setattr__(self, "input_bounds", tuple(float(b) for b in self.input_bounds))
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kind is not AttackKind.DEEPFOOL and self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        lo, hi = self.input_bounds
        if lo > hi:
            raise ValueError(f"input_bounds {self.input_bounds} are inverted")

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "max_iters": self.max_iters,
            "stop_mode": self.stop_mode.value,
            "overshoot": self.overshoot,
            "input_bounds": list(self.input_bounds),
        }


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    iterations_used: int
    fooled: bool
    rho: float
    per_step_labels: List[int] = field(default_factory=list)

    def to_record(self, index, eps):
        return {
            "index": index,
            "fooled": self.fooled,
            "iterations": self.iterations_used,
            "rho": self.rho,
            "eps": eps,
        }


def clip_linf(z, x, epsilon, bounds):
    """Clip z into ``[x - eps, x + eps]`` intersected with ``[lo, hi]``, elementwise."""
    z = torch.as_tensor(z, dtype=DTYPE)
    x = torch.as_tensor(x, dtype=DTYPE)
    if z.shape != x.shape:
        raise ValueError(f"z {tuple(z.shape)} and x {tuple(x.shape)} differ in shape")
    lo, hi = bounds
    lower = (x - epsilon).clamp(min=lo)
    upper = (x + epsilon).clamp(max=hi)
    return torch.maximum(torch.minimum(z, upper), lower)


def rho(x_clean, x_adv):
    """Normalized L2 dissimilarity ``||x_adv - x|| / ||x||``."""
    x_clean = torch.as_tensor(x_clean, dtype=DTYPE)
    norm = x_clean.norm()
    if norm == 0:
        raise ValueError("rho is undefined for a zero-norm clean input")
    return ((torch.as_tensor(x_adv, dtype=DTYPE) - x_clean).norm() / norm).item()


def mean_rho(pairs):
    values = [rho(x, x_adv) for x, x_adv in pairs]
    if not values:
        raise ValueError("mean_rho of an empty collection")
    return sum(values) / len(values)


def _least_likely(logits):
    # argmin of the softmax equals argmin of the logits; ties go to the lowest index.
    return torch.argmin(logits, dim=1)


def _sign_gradient_attack(net, X, y_true, cfg):
    X = torch.as_tensor(X, dtype=DTYPE)
    n = X.shape[0]
    targeted = cfg.kind is AttackKind.ITER_LL_FSGM
    clean_labels = classifier.predict(net, X)
    reference = clean_labels if targeted else torch.as_tensor(y_true, dtype=torch.long)

    x_adv = X.clone()
    active = torch.ones(n, dtype=torch.bool)
    if cfg.stop_mode is StopMode.UNTIL_MISCLASSIFIED:
        active &= clean_labels == reference
    traces = [[] for _ in range(n)]

    for _ in range(cfg.max_iters):
        if not active.any():
            break
        rows = active.nonzero().squeeze(1)
        xa = x_adv[rows]
        if targeted:
            target = _least_likely(classifier.forward_with_taps(net, xa)[1])
            step = -cfg.alpha * torch.sign(classifier.input_gradient(net, xa, target))
        else:
            step = cfg.alpha * torch.sign(classifier.input_gradient(net, xa, reference[rows]))
        x_adv[rows] = clip_linf(xa + step, X[rows], cfg.epsilon, cfg.input_bounds)

        labels = classifier.predict(net, x_adv[rows])
        for row, label in zip(rows.tolist(), labels.tolist()):
            traces[row].append(label)
        if cfg.stop_mode is StopMode.UNTIL_MISCLASSIFIED:
            active[rows] = labels == reference[rows]

    final = classifier.predict(net, x_adv)
    return x_adv, traces, final != reference


def _deepfool(net, X, cfg):
    X = torch.as_tensor(X, dtype=DTYPE)
    n, k = X.shape[0], net.class_count
    lo, hi = cfg.input_bounds
    clean = classifier.predict(net, X)
    x_adv = X.clone()
    r_total = torch.zeros_like(X)
    active = torch.ones(n, dtype=torch.bool)
    traces = [[] for _ in range(n)]

    for _ in range(cfg.max_iters):
        if not active.any():
            break
        rows = active.nonzero().squeeze(1)
        logits, jac = classifier.logit_jacobian(net, x_adv[rows])
        origin = clean[rows]
        f = logits - logits.gather(1, origin.unsqueeze(1))
        w = jac - jac[torch.arange(len(rows)), origin].unsqueeze(1)
        w_norm = w.norm(dim=2)
        distance = f.abs() / w_norm
        distance[w_norm == 0] = float("inf")
        distance[torch.arange(len(rows)), origin] = float("inf")
        nearest = torch.argmin(distance, dim=1)

        sel = torch.arange(len(rows))
        f_l, w_l, norm_l = f[sel, nearest], w[sel, nearest], w_norm[sel, nearest]
        scale = torch.where(norm_l > 0, f_l.abs() / norm_l**2, torch.zeros_like(f_l))
        step = scale.unsqueeze(1) * w_l
        step[~torch.isfinite(distance[sel, nearest])] = 0.0
        r_total[rows] += step
        x_adv[rows] = (X[rows] + (1 + cfg.overshoot) * r_total[rows]).clamp(lo, hi)

        labels = classifier.predict(net, x_adv[rows])
        for row, label in zip(rows.tolist(), labels.tolist()):
            traces[row].append(label)
        # DeepFool stops at the first label flip in either stop mode.
        active[rows] = labels == origin

    final = classifier.predict(net, x_adv)
    return x_adv, traces, final != clean


def attack_batch(net, X, y_true, cfg):
    """Attack every row of X; results come back in row order."""
    X = torch.as_tensor(X, dtype=DTYPE)
    if X.dim() == 1:
        X = X.unsqueeze(0)
    if cfg.kind is AttackKind.DEEPFOOL:
        x_adv, traces, fooled = _deepfool(net, X, cfg)
    else:
        x_adv, traces, fooled = _sign_gradient_attack(net, X, y_true, cfg)
    return [
        AttackResult(
            x_adv=x_adv[i],
            iterations_used=len(traces[i]),
            fooled=bool(fooled[i]),
            rho=rho(X[i], x_adv[i]),
            per_step_labels=traces[i],
        )
        for i in range(X.shape[0])
    ]


def iter_fsgm(net, x, y_true, cfg):
    cfg = replace(cfg, kind=AttackKind.ITER_FSGM)
    return attack_batch(net, x, torch.as_tensor([int(y_true)]), cfg)[0]


def iter_ll_fsgm(net, x, cfg):
    cfg = replace(cfg, kind=AttackKind.ITER_LL_FSGM)
    return attack_batch(net, x, None, cfg)[0]


def deepfool(net, x, cfg):
    cfg = replace(cfg, kind=AttackKind.DEEPFOOL)
    return attack_batch(net, x, None, cfg)[0]


def adversarial_accuracy(target, source, X, y, cfg, return_results=False):
    """Accuracy of ``target`` on examples crafted against ``source`` (fixed steps).

    ``source is target`` is the white-box setting; a different source gives the
    black-box transfer number.
    """
    if target.input_dim != source.input_dim or target.class_count != source.class_count:
        raise ValueError("source and target models must share input and output dims")
    cfg = replace(cfg, stop_mode=StopMode.FIXED_STEPS)
    results = attack_batch(source, X, y, cfg)
    x_adv = torch.stack([r.x_adv for r in results])
    acc = accuracy(classifier.predict(target, x_adv), y, target.class_count)
    return (acc, results) if return_results else acc


@dataclass
class SweepPoint:
    epsilon: float
    rho: float
    accuracy: float


def epsilon_sweep(target, source, X, y, cfg, epsilons, verbose=False):
    """Adversarial accuracy and mean rho for each perturbation budget."""
    points = []
    for eps in tqdm.tqdm(epsilons, disable=not verbose, desc="eps sweep"):
        acc, results = adversarial_accuracy(
            target, source, X, y, replace(cfg, epsilon=eps), return_results=True
        )
        points.append(
            SweepPoint(epsilon=eps, rho=sum(r.rho for r in results) / len(results), accuracy=acc)
        )
    return points


def epsilon_grid(start=0.001, steps=10):
    """``{0} U {start * 2^k}``: the coarse stage of the minimum-perturbation search."""
    return [0.0] + [start * 2**k for k in range(steps)]


@dataclass
class MinPerturbationResult:
    epsilon: Optional[float]
    mean_rho: Optional[float]
    misclassification: float
    reached: bool

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "mean_rho": self.mean_rho,
            "misclassification": self.misclassification,
            "reached": self.reached,
        }


def _misclassification(net, X, y, cfg):
    results = attack_batch(net, X, y, cfg)
    rate = sum(r.fooled for r in results) / len(results)
    return rate, results


def min_perturbation_search(net, X, y, cfg, grid=None, bisection_steps=4, verbose=False):
    """Smallest epsilon with at least 99% misclassification within ``cfg.max_iters``.

    A geometric grid brackets the answer, then ``bisection_steps`` halvings
    refine it. ``mean_rho`` averages over the successful perturbations.
    """
    cfg = replace(cfg, stop_mode=StopMode.UNTIL_MISCLASSIFIED)
    grid = sorted(grid if grid is not None else epsilon_grid())
    if not grid:
        raise ValueError("epsilon grid is empty")

    def summarize(eps, rate, results):
        fooled = [r.rho for r in results if r.fooled]
        return MinPerturbationResult(
            epsilon=eps,
            mean_rho=sum(fooled) / len(fooled) if fooled else None,
            misclassification=rate,
            reached=rate >= MISCLASSIFICATION_TARGET,
        )

    previous = None
    for eps in tqdm.tqdm(grid, disable=not verbose, desc="eps search"):
        rate, results = _misclassification(net, X, y, replace(cfg, epsilon=eps))
        if rate >= MISCLASSIFICATION_TARGET:
            best = summarize(eps, rate, results)
            if previous is None:
                return best
            lo, hi = previous, eps
            for _ in range(bisection_steps):
                mid = (lo + hi) / 2
                rate, results = _misclassification(net, X, y, replace(cfg, epsilon=mid))
                if rate >= MISCLASSIFICATION_TARGET:
                    hi, best = mid, summarize(mid, rate, results)
                else:
                    lo = mid
            return best
        previous = eps
    return summarize(grid[-1], rate, results)


def accuracy_curves(traces: Sequence[Sequence[int]], reference: Sequence[int]):
    """Instantaneous and cumulative accuracy per attack step.

    ``a_I[k]`` is the share of examples whose step-(k+1) label still equals the
    clean prediction; ``a_C[k]`` the share that never left it up to that step.
    """
    if not traces:
        raise ValueError("accuracy_curves needs at least one trace")
    steps = len(traces[0])
    if any(len(t) != steps for t in traces):
        raise ValueError("all traces must have the same length")
    if len(reference) != len(traces):
        raise ValueError(f"{len(reference)} reference labels for {len(traces)} traces")
    labels = torch.as_tensor([list(t) for t in traces], dtype=torch.long).reshape(len(traces), steps)
    same = labels == torch.as_tensor(list(reference), dtype=torch.long).unsqueeze(1)
    a_i = same.to(DTYPE).mean(dim=0)
    a_c = torch.cummin(same.to(DTYPE), dim=1).values.mean(dim=0)
    return a_i.tolist(), a_c.tolist()
