"""Anchor similarity head: features -> bin probabilities -> density maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from countlab import kernels
from countlab.anchors import AnchorTensor
from countlab.datamodel import CountBinning

DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True, eq=False)
class DensityBundle:
    P: torch.Tensor  # (..., H', W', m, n+1)
    D: torch.Tensor  # (..., H', W', m)


def _anchor_tensor(A, like: torch.Tensor) -> torch.Tensor:
    vals = A.values if isinstance(A, AnchorTensor) else A
    if torch.is_tensor(vals):
        return vals.to(like.dtype)
    return torch.tensor(np.asarray(vals), dtype=like.dtype, device=like.device)


def similarity_probs(F_map: torch.Tensor, A, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Softmax over bins of ``cos(F[u, v], A[i, j]) / temperature``.

    ``F_map`` is ``(..., H', W', d)``; a zero feature vector has cosine 0 with
    every anchor and so yields a uniform distribution.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    anchors = _anchor_tensor(A, F_map)
    if F_map.shape[-1] != anchors.shape[-1]:
        raise ValueError(f"feature dim {F_map.shape[-1]} != anchor dim {anchors.shape[-1]}")
    f = F.normalize(F_map, dim=-1, eps=1e-12)
    a = F.normalize(anchors, dim=-1, eps=1e-12)
    cos = torch.einsum("...d,mjd->...mj", f, a)
    return torch.softmax(cos / temperature, dim=-1)


def expected_density(P: torch.Tensor, binning: CountBinning) -> torch.Tensor:
    """Expectation of the bin representatives ``0..n`` (the open bin counts as ``n``)."""
    reps = torch.as_tensor(binning.representatives, dtype=P.dtype, device=P.device)
    return (P * reps).sum(dim=-1)


def density_bundle(F_map, A, binning, temperature=DEFAULT_TEMPERATURE) -> DensityBundle:
    P = similarity_probs(F_map, A, temperature)
    return DensityBundle(P, expected_density(P, binning))


def total_counts(D: torch.Tensor) -> torch.Tensor:
    """Per-category totals: sum over the two spatial axes of ``(..., H', W', m)``."""
    return D.sum(dim=(-3, -2))


def extract_centroids(D, category: int, threshold: float = 0.3, min_distance: int = 1) -> list[tuple[int, int]]:
    """Approximate cell centres as strict local maxima of one density channel.

    Peaks above ``threshold`` are visited by descending value (row-major on
    ties) and kept only if at Chebyshev distance ``>= min_distance`` from every
    peak already kept.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if min_distance < 1:
        raise ValueError("min_distance must be >= 1")
    arr = D.detach().cpu().numpy() if torch.is_tensor(D) else np.asarray(D)
    chan = np.asarray(arr[..., category], dtype=np.float64)
    coords = kernels.local_maxima(chan, threshold)
    if len(coords) == 0:
        return []
    vals = chan[coords[:, 0], coords[:, 1]]
    order = np.argsort(-vals, kind="stable")
    coords = coords[order]
    keep = kernels.suppress_peaks(coords, min_distance)
    return [(int(u), int(v)) for u, v in coords[keep]]
