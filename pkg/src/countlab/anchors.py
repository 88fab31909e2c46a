"""Structured count prompts and their frozen text embeddings."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from countlab.datamodel import CategorySet, CountBinning

RATS_CATEGORY = "cell"


@runtime_checkable
class TextEncoder(Protocol):
    d: int

    def encode(self, text: str) -> np.ndarray: ...


class HashTextEncoder:
    """Deterministic stand-in for a frozen text tower.

    The prompt's 64-bit BLAKE2b digest keys a Philox counter-based generator,
    which draws ``d`` standard normals; the result is L2-normalised.
    """

    def __init__(self, d: int = 64):
        self.d = int(d)

    def __repr__(self):
        return f"HashTextEncoder(d={self.d})"

    def encode(self, text: str) -> np.ndarray:
        key = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
        gen = np.random.Generator(np.random.Philox(key=key))
        v = gen.standard_normal(self.d)
        return v / np.linalg.norm(v)


def render_prompt(category: str, bin_index: int, n: int) -> str:
    """Sentence describing ``bin_index`` cells of ``category`` (bin ``n`` is open)."""
    if not category:
        raise ValueError("category must be non-empty")
    j = int(bin_index)
    if not 0 <= j <= n:
        raise ValueError(f"bin index {bin_index} outside 0..{n}")
    if j == n:
        return f"There are more than {n} {category}s"
    if j == 0:
        return f"There is no {category}"
    if j == 1:
        return f"There is 1 {category}"
    return f"There are {j} {category}s"


@dataclass(frozen=True, eq=False)
class AnchorTensor:
    values: np.ndarray  # (m, n + 1, d), unit rows
    prompts: tuple[tuple[str, ...], ...]

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def num_bins(self) -> int:
        return self.values.shape[1]


def build_anchor_tensor(categories: CategorySet, binning: CountBinning, enc: TextEncoder) -> AnchorTensor:
    if enc.d < 8:
        raise ValueError(f"text encoder dimension must be >= 8, got {enc.d}")
    table = tuple(
        tuple(render_prompt(z, j, binning.n) for j in range(binning.num_bins)) for z in categories.names
    )
    vals = np.empty((categories.m, binning.num_bins, enc.d), dtype=np.float64)
    for i, row in enumerate(table):
        for j, prompt in enumerate(row):
            v = np.asarray(enc.encode(prompt), dtype=np.float64).reshape(-1)
            if v.shape[0] != enc.d:
                raise ValueError(f"encoder returned {v.shape[0]} dims, declared {enc.d}")
            norm = np.linalg.norm(v)
            if not np.isfinite(norm) or norm == 0.0:
                raise ValueError(f"text encoder returned a zero vector for {prompt!r}")
            vals[i, j] = v / norm
    vals.flags.writeable = False
    return AnchorTensor(vals, table)


def build_rats_anchors(binning: CountBinning, enc: TextEncoder) -> AnchorTensor:
    """Class-agnostic ``1 x (n+1) x d`` anchors used to score teachers."""
    return build_anchor_tensor(CategorySet((RATS_CATEGORY,)), binning, enc)
