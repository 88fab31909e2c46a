"""Synthetic IHC-like tiles with exact point annotations.

Cells are anti-aliased discs in DAB-brown (positive) or hematoxylin-blue
(negative) over a smooth textured background. Every image is a pure function
of ``(config, index)``: each index seeds its own generator stream, placement
uses integer arithmetic, and pixel values are quantised to ``k / 255`` so a
PNG round-trip is lossless.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from countlab import kernels
from countlab.datamodel import (
    AnnotatedImage,
    PointAnnotation,
    annotation_record,
    dump_annotations,
)

NEGATIVE, POSITIVE = 0, 1
_MAX_TRIES = 400


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 112
    num_pos: tuple[int, int] = (0, 20)
    num_neg: tuple[int, int] = (0, 20)
    cell_radius: tuple[float, float] = (3.0, 5.0)
    overlap_fraction: float = 0.1
    pos_color: tuple[float, float, float] = (0.55, 0.33, 0.18)
    neg_color: tuple[float, float, float] = (0.30, 0.40, 0.70)
    background: tuple[float, float, float] = (0.93, 0.91, 0.89)
    texture_amplitude: float = 0.04
    color_jitter: float = 0.05
    seed: int = 0
    id_prefix: str = field(default="synth")

    def __post_init__(self):
        for name in ("num_pos", "num_neg", "cell_radius", "pos_color", "neg_color", "background"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("num_pos", "num_neg", "cell_radius"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range is empty or negative: {(lo, hi)}")
        if self.cell_radius[0] <= 0:
            raise ValueError("cell radius must be positive")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if np.allclose(self.pos_color, self.neg_color):
            raise ValueError("positive and negative stain colours must differ")
        if self.image_size < 1:
            raise ValueError("image_size must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _radius(gen, lo, hi):
    # sixteenths of a pixel keep placement arithmetic exact
    steps = int(round((hi - lo) * 16))
    return lo + int(gen.integers(0, steps + 1)) / 16.0


def _place_cells(gen, cfg, cats):
    S = cfg.image_size
    n = len(cats)
    radii = np.array([_radius(gen, *cfg.cell_radius) for _ in range(n)])
    n_overlap = int(round(cfg.overlap_fraction * n)) if n > 1 else 0
    overlapping = np.zeros(n, dtype=bool)
    if n_overlap:
        overlapping[1 + gen.permutation(n - 1)[:n_overlap]] = True
    xs = np.zeros(n, dtype=np.int64)
    ys = np.zeros(n, dtype=np.int64)
    for t in range(n):
        for _ in range(_MAX_TRIES):
            if overlapping[t]:
                j = int(gen.integers(0, t))
                reach = max(1, int(math.floor(radii[j])))
                x = xs[j] + int(gen.integers(-reach, reach + 1))
                y = ys[j] + int(gen.integers(-reach, reach + 1))
                if not (0 <= x < S and 0 <= y < S):
                    continue
                d2 = (xs[:t] - x) ** 2 + (ys[:t] - y) ** 2
                if (x - xs[j]) ** 2 + (y - ys[j]) ** 2 > radii[j] ** 2 or d2.min() == 0:
                    continue
            else:
                x = int(gen.integers(0, S))
                y = int(gen.integers(0, S))
                if t:
                    d2 = (xs[:t] - x) ** 2 + (ys[:t] - y) ** 2
                    if (d2 < (radii[:t] + radii[t]) ** 2).any():
                        continue
            xs[t], ys[t] = x, y
            break
        else:
            raise ValueError(
                f"cannot place {n} cells of radius >= {cfg.cell_radius[0]} in a {S}x{S} image"
            )
    return xs, ys, radii


def generate_image(cfg: SynthConfig, index: int) -> AnnotatedImage:
    gen = np.random.default_rng([int(cfg.seed), int(index)])
    S = cfg.image_size
    n_pos = int(gen.integers(cfg.num_pos[0], cfg.num_pos[1] + 1))
    n_neg = int(gen.integers(cfg.num_neg[0], cfg.num_neg[1] + 1))
    n = n_pos + n_neg
    area = n * math.pi * cfg.cell_radius[0] ** 2
    if area > 0.9 * S * S:
        raise ValueError(f"cell count {n} infeasible for a {S}x{S} image at minimum radius")
    cats = np.array([POSITIVE] * n_pos + [NEGATIVE] * n_neg, dtype=np.int64)
    cats = cats[gen.permutation(n)]

    texture = gaussian_filter(gen.standard_normal((S, S)), sigma=3.0, mode="wrap")
    texture /= max(texture.std(), 1e-12)
    canvas = np.asarray(cfg.background, dtype=np.float64)[None, None, :] + cfg.texture_amplitude * texture[
        :, :, None
    ] * np.array([1.0, 0.9, 1.1])

    xs, ys, radii = _place_cells(gen, cfg, cats)
    base = np.where(cats[:, None] == POSITIVE, np.asarray(cfg.pos_color), np.asarray(cfg.neg_color))
    colors = np.clip(base + gen.uniform(-cfg.color_jitter, cfg.color_jitter, size=(n, 3)), 0.0, 1.0)
    alpha = gen.uniform(0.85, 0.95, size=n)
    canvas = kernels.render_discs(canvas, xs, ys, radii, colors, alpha)
    pixels = (np.round(np.clip(canvas, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
    points = tuple(PointAnnotation(int(x), int(y), int(c)) for x, y, c in zip(xs, ys, cats))
    return AnnotatedImage(pixels, points, f"{cfg.id_prefix}-{cfg.seed}-{index:05d}")


def save_png(pixels: np.ndarray, path: str) -> None:
    from PIL import Image

    arr = np.round(np.clip(np.asarray(pixels), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def generate_dataset(cfg: SynthConfig, count: int, out_dir: str | None = None, *, start: int = 0) -> list[AnnotatedImage]:
    """Generate ``count`` images; with ``out_dir`` also write PNGs and ``annotations.json``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    images = [generate_image(cfg, start + i) for i in range(count)]
    if out_dir is not None:
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        records = []
        for im in images:
            rel = f"images/{im.id}.png"
            save_png(im.pixels, os.path.join(out_dir, rel))
            records.append(annotation_record(im, rel))
        dump_annotations(records, os.path.join(out_dir, "annotations.json"))
    return images
