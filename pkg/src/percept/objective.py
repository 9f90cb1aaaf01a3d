"""Symmetric contrastive objective and a finite-difference gradient verifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class LossConfig:
    tau: float = 0.07
    learnable_tau: bool = True
    tau_min: float = 0.01
    tau_max: float = 1.0

    def __post_init__(self):
        if not 0 < self.tau_min <= self.tau <= self.tau_max:
            raise ValueError(f"need 0 < tau_min <= tau <= tau_max, got {self.tau_min}, {self.tau}, {self.tau_max}")


def similarity_logits(x: torch.Tensor, y: torch.Tensor, tau) -> torch.Tensor:
    """``logits[i, j] = x_i . y_j / tau``."""
    if not torch.all(torch.as_tensor(tau) > 0):
        raise ValueError(f"temperature must be > 0, got {tau}")
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"embedding dims differ: {x.shape[-1]} vs {y.shape[-1]}")
    return x @ y.transpose(-2, -1) / tau


def _log_softmax_diag(logits: torch.Tensor) -> torch.Tensor:
    # max-subtracted log-sum-exp along rows
    m = logits.max(dim=1, keepdim=True).values.detach()
    lse = m.squeeze(1) + torch.log(torch.exp(logits - m).sum(dim=1))
    return torch.diagonal(logits) - lse


def contrastive_loss(logits: torch.Tensor) -> torch.Tensor:
    """Image-to-text plus text-to-image cross entropy over an ``N x N`` logit matrix.

    Row ``i`` scores image ``i`` against every text; the matching pair sits on
    the diagonal.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    n = logits.shape[0]
    if logits.shape != (n, n):
        raise ValueError(f"expected a square logit matrix, got {tuple(logits.shape)}")
    i2t = -_log_softmax_diag(logits).sum() / n
    t2i = -_log_softmax_diag(logits.T).sum() / n
    return i2t + t2i


class GradientCheckError(RuntimeError):
    pass


def gradient_check(loss_fn, params: dict[str, torch.Tensor], epsilon: float = 1e-5,
                   n_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn(params)`` must return a scalar tensor built from ``params``
    (float64 leaves). ``n_coords`` coordinates are drawn uniformly over the
    concatenation of all parameters; the denominator is
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-5 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-5, 1e-3]")
    names = list(params)
    leaves = {k: params[k].detach().clone().to(torch.float64).requires_grad_(True) for k in names}
    loss = loss_fn(leaves)
    if not torch.isfinite(loss):
        raise GradientCheckError("non-finite loss at the base point")
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    analytic = {k: (torch.zeros_like(leaves[k]) if g is None else g) for k, g in zip(names, grads)}

    sizes = np.array([leaves[k].numel() for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        probe = {k: v.detach().clone() for k, v in leaves.items()}
        for f in np.sort(flat):
            which = int(np.searchsorted(offsets, f, side="right") - 1)
            name = names[which]
            local = int(f - offsets[which])
            view = probe[name].view(-1)
            orig = view[local].item()
            view[local] = orig + epsilon
            plus = loss_fn(probe)
            view[local] = orig - epsilon
            minus = loss_fn(probe)
            view[local] = orig
            if not (torch.isfinite(plus) and torch.isfinite(minus)):
                raise GradientCheckError(f"non-finite loss while probing {name}[{local}]")
            numeric = (plus.item() - minus.item()) / (2 * epsilon)
            a = analytic[name].view(-1)[local].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
