"""Training objectives for agglomeration and anchor-guided fine-tuning.

All functions take torch tensors and are differentiable in the prediction
arguments. Leading dimensions beyond the documented trailing ones are treated
as a batch and mean-reduced.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn.functional as F

from countlab.ot import entropic_w2, exact_w2

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    epsilon_rank: float = 0.0
    alpha: float = 10.0
    tau: float = 0.3
    lambda_: tuple[float, ...] = (0.4, 0.6)  # category order: negative, positive
    gamma: float = 0.5
    ot_reg: float = 0.05
    ot_iters: int = 500
    ot_tol: float = 1e-7
    ot_omega: float = 1.9
    norm_floor: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "lambda_", tuple(float(x) for x in self.lambda_))
        if self.epsilon_rank < 0:
            raise ValueError("epsilon_rank must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        for name in ("alpha", "tau", "ot_reg", "ot_iters", "ot_tol", "norm_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.ot_omega < 2:
            raise ValueError("ot_omega must lie in (0, 2)")
        if not self.lambda_ or any(x <= 0 for x in self.lambda_):
            raise ValueError("lambda_ entries must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# agglomeration
# ---------------------------------------------------------------------------


def distill_loss(S_out: torch.Tensor, T_out: torch.Tensor, norm_floor: float = 1e-8) -> torch.Tensor:
    """Token-averaged ``(1 - cos) + mean_d smoothL1`` between ``(..., d)`` sequences."""
    if S_out.shape != T_out.shape:
        raise ValueError(f"shape mismatch {tuple(S_out.shape)} vs {tuple(T_out.shape)}")
    s_norm = S_out.norm(dim=-1)
    t_norm = T_out.norm(dim=-1)
    valid = (s_norm > norm_floor) & (t_norm > norm_floor)
    if not bool(valid.all()):
        logger.debug("distill_loss: %d zero-norm token(s) scored as worst case", int((~valid).sum()))
    # 1 - cos as half the squared distance of the unit vectors: exact zero for
    # identical tokens and no cancellation when they nearly agree
    s_hat = S_out / s_norm.clamp_min(norm_floor).unsqueeze(-1)
    t_hat = T_out / t_norm.clamp_min(norm_floor).unsqueeze(-1)
    one_minus_cos = 0.5 * (s_hat - t_hat).pow(2).sum(dim=-1)
    one_minus_cos = torch.where(valid, one_minus_cos, torch.ones_like(one_minus_cos))
    smooth = F.smooth_l1_loss(S_out, T_out, reduction="none", beta=1.0).mean(dim=-1)
    return (one_minus_cos + smooth).mean()


def rank_loss(
    predicted_counts: torch.Tensor | Sequence[Sequence[float]],
    pairs: Sequence[tuple[int, int]] | Sequence[Sequence[tuple[int, int]]],
    epsilon: float = 0.0,
) -> torch.Tensor:
    """Hinge penalty on every pair ``(i, j)`` whose count ordering ``C_i <= C_j`` is violated.

    ``predicted_counts`` is ``(G, k)``; ``pairs`` is either one pair list shared
    by all groups or one list per group. Summed over pairs and groups.
    """
    C = torch.as_tensor(predicted_counts, dtype=torch.float64) if not torch.is_tensor(predicted_counts) else predicted_counts
    if C.ndim == 1:
        C = C[None]
    shared = len(pairs) == 0 or isinstance(pairs[0], tuple) or (
        len(pairs[0]) == 2 and not isinstance(pairs[0][0], (tuple, list))
    )
    if shared:
        if len(pairs) == 0:
            return C.sum() * 0.0
        idx = torch.as_tensor(list(pairs), dtype=torch.long)
        diff = C[:, idx[:, 1]] - C[:, idx[:, 0]]
        return torch.relu(-diff + epsilon).sum()
    total = C.sum() * 0.0
    for g, gp in enumerate(pairs):
        if len(gp):
            idx = torch.as_tensor(list(gp), dtype=torch.long)
            total = total + torch.relu(-(C[g, idx[:, 1]] - C[g, idx[:, 0]]) + epsilon).sum()
    return total


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def ce_loss(P_hat: torch.Tensor, class_index_map: torch.Tensor, category: int, norm_floor: float = 1e-8) -> torch.Tensor:
    """Negative log-likelihood of the true bin, summed over blocks.

    ``P_hat`` is ``(..., H', W', m, n+1)`` and ``class_index_map`` ``(..., H', W', m)``.
    """
    probs = P_hat[..., category, :]
    target = torch.as_tensor(class_index_map, device=P_hat.device)[..., category].long()
    picked = probs.gather(-1, target[..., None])[..., 0]
    if bool((picked < norm_floor).any()):
        logger.debug("ce_loss: clamped %d probabilities at %g", int((picked < norm_floor).sum()), norm_floor)
    nll = -torch.log(picked.clamp_min(norm_floor))
    per_image = nll.sum(dim=(-2, -1))
    return per_image.mean()


def _dm_maps(D_gt, D_hat, cfg: LossConfig, method="entropic") -> torch.Tensor:
    """Per-map DM loss for ``(..., H', W')`` inputs; returns shape ``(...)``."""
    D_gt = torch.as_tensor(D_gt, dtype=D_hat.dtype, device=D_hat.device)
    if bool((D_gt < 0).any()) or bool((D_hat < 0).any()):
        raise ValueError("density maps must be non-negative")
    lead = D_hat.shape[:-2]
    H, W = D_hat.shape[-2:]
    gt = D_gt.reshape(-1, H, W)
    hat = D_hat.reshape(-1, H, W)
    m_gt = gt.sum(dim=(-2, -1))
    m_hat = hat.sum(dim=(-2, -1))
    loss = (m_gt - m_hat).abs()
    ok = (m_gt >= cfg.norm_floor) & (m_hat >= cfg.norm_floor)
    if bool(ok.any()):
        idx = torch.nonzero(ok).flatten()
        nu_gt = gt[idx] / m_gt[idx, None, None]
        nu_hat = hat[idx] / m_hat[idx, None, None]
        if method == "exact":
            w2 = torch.tensor(
                [exact_w2(a.detach().double().numpy(), b.detach().double().numpy()) for a, b in zip(nu_gt, nu_hat)],
                dtype=hat.dtype,
            )
        else:
            w2 = entropic_w2(nu_gt, nu_hat, reg=cfg.ot_reg, iters=cfg.ot_iters, tol=cfg.ot_tol, omega=cfg.ot_omega)
        l1 = 0.5 * m_gt[idx] * (nu_gt - nu_hat).abs().sum(dim=(-2, -1))
        loss = loss.index_add(0, idx, w2 + l1)
    return loss.reshape(lead)


def dm_loss(D_gt, D_hat: torch.Tensor, category: int | None = None, cfg: LossConfig = LossConfig(), *, method="entropic") -> torch.Tensor:
    """Distribution-matching loss: count L1 + transport cost + scaled L1 of normalised maps.

    With ``category`` the inputs are ``(..., H', W', m)`` and that channel is
    used; otherwise they are single-channel ``(..., H', W')``. If either map
    has total mass below ``cfg.norm_floor`` only the count term is kept.
    """
    if category is not None:
        D_gt = torch.as_tensor(D_gt)[..., category]
        D_hat = D_hat[..., category]
    return _dm_maps(D_gt, D_hat, cfg, method).mean()


def se_loss(D1: torch.Tensor, D2: torch.Tensor, alpha: float = 10.0, tau: float = 0.3) -> torch.Tensor:
    """Block-averaged product of sigmoid gates ``sigma(alpha (D - tau))`` of two density maps."""
    if D1.shape != D2.shape:
        raise ValueError("density maps must share a shape")
    g = torch.sigmoid(alpha * (D1 - tau)) * torch.sigmoid(alpha * (D2 - tau))
    return g.mean(dim=(-2, -1)).mean()


def se_loss_multi(D: torch.Tensor, alpha: float = 10.0, tau: float = 0.3) -> torch.Tensor:
    """:func:`se_loss` averaged over all unordered category pairs of ``(..., H', W', m)``."""
    m = D.shape[-1]
    pairs = list(itertools.combinations(range(m), 2))
    if not pairs:
        return D.sum() * 0.0
    return torch.stack([se_loss(D[..., i], D[..., j], alpha, tau) for i, j in pairs]).mean()


def _targets(targets):
    cm = targets.count_map if hasattr(targets, "count_map") else targets[0]
    ci = targets.class_index_map if hasattr(targets, "class_index_map") else targets[1]
    return torch.as_tensor(cm), torch.as_tensor(ci)


def loss_terms(P_hat, D_hat, targets, cfg: LossConfig = LossConfig()) -> dict:
    """All fine-tuning terms: per-category ``ce`` and ``dm`` lists plus ``count``, ``se``, ``total``."""
    _, class_index = _targets(targets)
    m = D_hat.shape[-1]
    if len(cfg.lambda_) != m:
        raise ValueError(f"lambda_ has {len(cfg.lambda_)} entries for {m} categories")
    D_gt = class_index.to(D_hat.dtype)  # min(count, n) per block
    # one batched transport solve for all categories
    dm_all = _dm_maps(D_gt.movedim(-1, -3), D_hat.movedim(-1, -3), cfg)
    dm_all = dm_all.reshape(-1, m).mean(dim=0)
    ce = [ce_loss(P_hat, class_index, i, cfg.norm_floor) for i in range(m)]
    dm = [dm_all[i] for i in range(m)]
    count = sum(lam * (c + d) for lam, c, d in zip(cfg.lambda_, ce, dm))
    se = se_loss_multi(D_hat, cfg.alpha, cfg.tau)
    return {"ce": ce, "dm": dm, "count": count, "se": se, "total": count + cfg.gamma * se}


def count_loss(P_hat, D_hat, targets, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Category-weighted sum of cross-entropy and distribution-matching terms."""
    return loss_terms(P_hat, D_hat, targets, cfg)["count"]


def total_loss(P_hat, D_hat, targets, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """``count_loss + gamma * se_loss`` (pairwise-averaged for more than two categories)."""
    return loss_terms(P_hat, D_hat, targets, cfg)["total"]
