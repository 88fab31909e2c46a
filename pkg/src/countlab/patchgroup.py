"""Global-to-local ranked patch groups.

A group is ``k`` centre-aligned square crops of one image, smallest first,
each resized to ``M x M``. Because every crop is nested in the next, the true
cell count is non-decreasing along the group; that ordering is the free
supervision used to score teachers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from countlab import kernels
from countlab.datamodel import AnnotatedImage

PAPER_RATIOS = (5 / 8, 3 / 4, 7 / 8, 1.0)


@dataclass(frozen=True, eq=False)
class RankedPatchGroup:
    patches: np.ndarray  # (k, M, M, 3) float32
    crop_sizes: tuple[int, ...]
    source_id: str
    origin: tuple[int, int]  # (y0, x0) of the largest crop in the source image
    counts: np.ndarray | None = None  # (k, m) true points per crop
    block_counts: np.ndarray | None = None  # (k, M//p, M//p, m) in resized coordinates

    @property
    def k(self) -> int:
        return len(self.crop_sizes)

    @property
    def M(self) -> int:
        return self.patches.shape[1]


def crop_sizes_for(M: int, ratios: Sequence[float]) -> tuple[int, ...]:
    return tuple(int(round(M * s)) for s in ratios)


def _validate_ratios(ratios):
    if len(ratios) == 0:
        raise ValueError("ratio list is empty")
    for s in ratios:
        if not 0.0 < s <= 1.0:
            raise ValueError(f"ratio {s} outside (0, 1]")
    if any(b < a for a, b in zip(ratios, ratios[1:])):
        raise ValueError("ratios must be sorted ascending")
    if ratios[-1] != 1.0:
        raise ValueError("the last ratio must be 1")


def _resize(crop: np.ndarray, M: int) -> np.ndarray:
    if crop.shape[0] == M:
        return np.array(crop, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(crop, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(M, M), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).contiguous().numpy()


def make_ranked_group(
    image: AnnotatedImage,
    M: int,
    ratios: Sequence[float] = PAPER_RATIOS,
    *,
    rng: np.random.Generator | int | None = 0,
    p: int = 14,
    m: int | None = None,
) -> RankedPatchGroup:
    """Build one ranked group from ``image``.

    The largest crop is an ``M x M`` window at a uniformly random position
    drawn from ``rng``; the others share its centre. When the image carries
    points, per-crop counts and block count grids (in resized coordinates,
    block size ``p``) are attached for synthetic teachers and tests.
    """
    ratios = tuple(float(s) for s in ratios)
    _validate_ratios(ratios)
    H, W = image.height, image.width
    if H < M or W < M:
        raise ValueError(f"image smaller than crop size: {W}x{H} < {M}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    y0 = int(gen.integers(0, H - M + 1))
    x0 = int(gen.integers(0, W - M + 1))
    sizes = crop_sizes_for(M, ratios)

    patches = np.empty((len(sizes), M, M, 3), dtype=np.float32)
    offsets = []
    for t, s in enumerate(sizes):
        off = (M - s) // 2
        cy, cx = y0 + off, x0 + off
        offsets.append((cy, cx))
        patches[t] = _resize(image.pixels[cy : cy + s, cx : cx + s], M)

    counts = blocks = None
    if m is None and image.points:
        m = int(image.point_array()[:, 2].max()) + 1
    if m is not None:
        pts = image.point_array()
        hb = M // p
        counts = np.zeros((len(sizes), m), dtype=np.int64)
        blocks = np.zeros((len(sizes), hb, hb, m), dtype=np.int64)
        for t, (s, (cy, cx)) in enumerate(zip(sizes, offsets)):
            inside = (pts[:, 0] >= cx) & (pts[:, 0] < cx + s) & (pts[:, 1] >= cy) & (pts[:, 1] < cy + s)
            sub = pts[inside]
            # pixel centre (x + 1/2) mapped through the s -> M rescale, floored
            xr = ((2 * (sub[:, 0] - cx) + 1) * M) // (2 * s)
            yr = ((2 * (sub[:, 1] - cy) + 1) * M) // (2 * s)
            counts[t] = np.bincount(sub[:, 2], minlength=m)[:m]
            blocks[t], _ = kernels.block_counts(xr, yr, sub[:, 2], hb, hb, m, p)
    patches.flags.writeable = False
    return RankedPatchGroup(patches, sizes, image.id, (y0, x0), counts, blocks)


def group_count_order(group_or_k: RankedPatchGroup | int) -> list[tuple[int, int]]:
    """All index pairs ``(i, j)``, ``i < j``, 0-based: crop ``j`` should hold at least as many cells as ``i``."""
    k = group_or_k if isinstance(group_or_k, int) else group_or_k.k
    return [(i, j) for i in range(k) for j in range(i + 1, k)]
