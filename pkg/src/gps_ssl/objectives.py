"""SSL objectives reported as ``total = distance_term - diversity_term``.

Every function takes float64 tensors and returns a LossReport whose tensors
stay attached to the autograd graph, so ``report.total`` can be
differentiated directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ArgumentError, NumericError, StateError
from .sampler import SupportQueue

OBJECTIVES = ("simclr", "byol", "barlow", "vicreg", "nnclr")


@dataclass
class LossReport:
    total: torch.Tensor
    distance_term: torch.Tensor
    diversity_term: torch.Tensor
    per_component: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "distance": float(self.distance_term.detach()),
            "diversity": float(self.diversity_term.detach()),
            **{k: float(v.detach()) for k, v in self.per_component.items()},
        }


def _check_pair(z1: torch.Tensor, z2: torch.Tensor, min_batch: int = 2) -> None:
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ArgumentError(f"views must be matching B x D matrices, got {tuple(z1.shape)} and {tuple(z2.shape)}")
    if z1.shape[0] < min_batch:
        raise ArgumentError(f"batch size must be >= {min_batch}")


def infonce(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.5) -> LossReport:
    """NT-Xent over the 2B x 2B cosine-similarity matrix.

    For anchor i with positive p(i): ``-s_ip / T + logsumexp_{j != i} s_ij / T``,
    averaged over all 2B anchors.  The first part is the distance term, the
    negated log-partition the diversity term.
    """
    if not temperature > 0:
        raise ArgumentError(f"temperature must be positive, got {temperature}")
    _check_pair(z1, z2)
    b = z1.shape[0]
    z = torch.cat([z1, z2])
    norms = z.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise NumericError("infonce: zero-norm embedding row")
    u = z / norms
    logits = (u @ u.T) / temperature
    self_mask = torch.eye(2 * b, dtype=torch.bool)
    logits = logits.masked_fill(self_mask, float("-inf"))
    pos_idx = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)])
    positive = logits[torch.arange(2 * b), pos_idx]
    log_partition = torch.logsumexp(logits, dim=1)
    distance = -positive.mean()
    diversity = -log_partition.mean()
    return LossReport(distance - diversity, distance, diversity,
                      {"alignment": distance, "log_partition": log_partition.mean()})


def byol(predictions_student: torch.Tensor, projections_teacher: torch.Tensor) -> LossReport:
    """Mean of ``2 - 2 cos(p_i, z_i)``; the teacher side is detached.

    The anti-collapse mechanism is the teacher/predictor asymmetry, which has
    no separable term, so ``diversity_term`` is reported as zero.
    """
    p, z = predictions_student, projections_teacher.detach()
    _check_pair(p, z, min_batch=1)
    pn, zn = p.norm(dim=1), z.norm(dim=1)
    if (pn == 0).any() or (zn == 0).any():
        raise NumericError("byol: zero-norm row")
    cos = (p * z).sum(dim=1) / (pn * zn)
    total = (2.0 - 2.0 * cos).mean()
    zero = torch.zeros((), dtype=total.dtype)
    return LossReport(total, total, zero, {"cosine": cos.mean()})


def _standardize(z: torch.Tensor, view: str) -> torch.Tensor:
    centered = z - z.mean(dim=0)
    std = centered.pow(2).mean(dim=0).sqrt()
    dead = torch.nonzero(std == 0).flatten()
    if dead.numel():
        raise NumericError(f"barlow: feature {int(dead[0])} of {view} has zero variance")
    return centered / std


def barlow(z1: torch.Tensor, z2: torch.Tensor, lambda_offdiag: float = 5e-3) -> LossReport:
    """Barlow Twins redundancy reduction on the batch cross-correlation matrix."""
    _check_pair(z1, z2)
    b = z1.shape[0]
    c = _standardize(z1, "view 1").T @ _standardize(z2, "view 2") / b
    diag = torch.diagonal(c)
    on = (1.0 - diag).pow(2).sum()
    off = c.pow(2).sum() - diag.pow(2).sum()
    distance = on
    diversity = -lambda_offdiag * off
    return LossReport(distance - diversity, distance, diversity, {"on_diagonal": on, "off_diagonal": off})


def _vicreg_view_terms(z: torch.Tensor, gamma: float, eps: float):
    b, d = z.shape
    centered = z - z.mean(dim=0)
    var = centered.pow(2).sum(dim=0) / (b - 1)
    std = torch.sqrt(var + eps)
    variance = F.relu(gamma - std).mean()
    cov = centered.T @ centered / (b - 1)
    covariance = (cov.pow(2).sum() - torch.diagonal(cov).pow(2).sum()) / d
    return variance, covariance


def vicreg(z1: torch.Tensor, z2: torch.Tensor, coeffs=(25.0, 25.0, 1.0), gamma: float = 1.0,
           eps: float = 1e-4) -> LossReport:
    """Variance-invariance-covariance loss, per-view terms averaged over the two views.

    ``coeffs`` is (sim, var, cov).  ``eps`` regularizes the std; with
    ``eps=0`` a collapsed batch scores exactly ``gamma`` on the variance term.
    """
    _check_pair(z1, z2)
    sim_c, var_c, cov_c = coeffs if not isinstance(coeffs, dict) else (coeffs["sim"], coeffs["var"], coeffs["cov"])
    invariance = F.mse_loss(z1, z2)
    v1, c1 = _vicreg_view_terms(z1, gamma, eps)
    v2, c2 = _vicreg_view_terms(z2, gamma, eps)
    variance = 0.5 * (v1 + v2)
    covariance = 0.5 * (c1 + c2)
    distance = sim_c * invariance
    diversity = -(var_c * variance + cov_c * covariance)
    return LossReport(distance - diversity, distance, diversity,
                      {"invariance": invariance, "variance": variance, "covariance": covariance})


def queue_neighbors(z1: torch.Tensor, queue: SupportQueue) -> tuple[torch.Tensor, np.ndarray]:
    """Nearest queue entry per row (as a constant tensor) and its queue positions."""
    if len(queue) == 0:
        raise StateError("nnclr: support queue is empty")
    idx = queue.nearest_index(z1.detach().numpy())
    return torch.from_numpy(queue.entries[idx].copy()), idx


def nnclr_infonce(z1: torch.Tensor, queue: SupportQueue, z2: torch.Tensor, temperature: float = 0.5) -> LossReport:
    """InfoNCE after swapping each z1 row for its nearest queue entry (no gradient through the swap)."""
    nn, _ = queue_neighbors(z1, queue)
    return infonce(nn, z2, temperature)
