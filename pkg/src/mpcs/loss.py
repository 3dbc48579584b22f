"""NT-Xent contrastive objective over a batch of 2N projected views."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateBatch, ZeroVector


def interleaved_pairs(n_views: int) -> list[int]:
    """Partner index for views laid out as (a0, b0, a1, b1, ...)."""
    return [i + 1 if i % 2 == 0 else i - 1 for i in range(n_views)]


@dataclass
class ContrastiveBatch:
    Z: torch.Tensor
    pair_of: list[int]
    temperature: float = 0.01

    def __post_init__(self):
        if not isinstance(self.Z, torch.Tensor):
            self.Z = torch.as_tensor(np.asarray(self.Z, dtype=np.float64))
        if self.Z.ndim != 2:
            raise ValueError("Z must be a 2-D matrix")
        n = self.Z.shape[0]
        if n < 2:
            raise DegenerateBatch(f"need at least 2 views, got {n}")
        self.pair_of = [int(p) for p in self.pair_of]
        if len(self.pair_of) != n:
            raise ValueError("pair_of must have one entry per row")
        for i, p in enumerate(self.pair_of):
            if p == i or not 0 <= p < n or self.pair_of[p] != i:
                raise ValueError("pair_of must be a fixed-point-free involution")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def cosine_sim(z1, z2) -> float:
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0 or n2 == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(z1 @ z2 / (n1 * n2), -1.0, 1.0))


def normalize_rows(Z: torch.Tensor) -> torch.Tensor:
    norms = Z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ZeroVector("batch contains a zero embedding")
    return Z / norms


def per_anchor_losses(batch: ContrastiveBatch, exclude_positive: bool = False) -> torch.Tensor:
    """Loss of every anchor row.

    The denominator sums over all rows except the anchor itself (the positive
    included). With ``exclude_positive`` the positive is dropped from the
    denominator as well, which needs at least two pairs.
    """
    Z = normalize_rows(batch.Z)
    n = Z.shape[0]
    logits = Z @ Z.T / batch.temperature
    idx = torch.arange(n)
    partner = torch.as_tensor(batch.pair_of)
    drop = torch.eye(n, dtype=torch.bool)
    if exclude_positive:
        if n < 4:
            raise DegenerateBatch("strict exclusion needs at least two pairs")
        positive_logit = logits[idx, partner]
        drop = drop.clone()
        drop[idx, partner] = True
        masked = logits.masked_fill(drop, float("-inf"))
        return torch.logsumexp(masked, dim=1) - positive_logit
    masked = logits.masked_fill(drop, float("-inf"))
    log_prob = masked - torch.logsumexp(masked, dim=1, keepdim=True)
    return -log_prob[idx, partner]


def nt_xent(batch: ContrastiveBatch, exclude_positive: bool = False) -> torch.Tensor:
    """Mean NT-Xent over all 2N anchors (differentiable)."""
    return per_anchor_losses(batch, exclude_positive).mean()


def nt_xent_loss(Z: torch.Tensor, temperature: float = 0.01, pair_of=None, exclude_positive=False):
    """Training-loop entry point; views must be interleaved unless ``pair_of`` is given."""
    pair_of = interleaved_pairs(Z.shape[0]) if pair_of is None else pair_of
    return nt_xent(ContrastiveBatch(Z, pair_of, temperature), exclude_positive)


def nt_xent_grad(batch: ContrastiveBatch, exclude_positive: bool = False) -> np.ndarray:
    """Gradient of :func:`nt_xent` with respect to ``Z`` (autograd, same dtype as Z)."""
    Z = batch.Z.detach().clone().requires_grad_(True)
    loss = nt_xent(ContrastiveBatch(Z, batch.pair_of, batch.temperature), exclude_positive)
    (grad,) = torch.autograd.grad(loss, Z)
    return grad.numpy()
