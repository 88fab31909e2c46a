"""Core data types, annotation I/O and block-level counting targets."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from countlab import kernels

logger = logging.getLogger(__name__)

DEFAULT_CATEGORIES = ("negative tumor cell", "positive tumor cell")


class AnnotationError(ValueError):
    """Raised for malformed or inconsistent annotation data."""


@dataclass(frozen=True)
class CategorySet:
    names: tuple[str, ...] = DEFAULT_CATEGORIES

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 1:
            raise ValueError("need at least one category")
        if any(not isinstance(s, str) or not s for s in names):
            raise ValueError("category names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ValueError(f"category names must be distinct: {names}")

    @property
    def m(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class CountBinning:
    """Bins ``{0}, {1}, ..., {n-1}, [n, inf)`` with representatives ``0..n``."""

    n: int = 4

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")

    @property
    def num_bins(self) -> int:
        return self.n + 1

    @property
    def bins(self) -> list[tuple[int, float]]:
        """``(lo, hi)`` inclusive bounds; the open bin has ``hi = inf``."""
        return [(j, float(j)) for j in range(self.n)] + [(self.n, float("inf"))]

    @property
    def representatives(self) -> np.ndarray:
        return np.arange(self.n + 1, dtype=np.float64)

    def bin_of(self, count):
        return np.minimum(np.asarray(count), self.n)


class PointAnnotation(NamedTuple):
    x: int
    y: int
    category_index: int


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    pixels: np.ndarray
    points: tuple[PointAnnotation, ...] = ()
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be H x W x 3, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        px = px.view()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        pts = tuple(PointAnnotation(int(p[0]), int(p[1]), int(p[2])) for p in self.points)
        object.__setattr__(self, "points", pts)
        h, w = px.shape[:2]
        for p in pts:
            if not (0 <= p.x < w and 0 <= p.y < h):
                raise AnnotationError(f"point out of bounds: ({p.x}, {p.y}) in {w}x{h} image {self.id!r}")
            if p.category_index < 0:
                raise AnnotationError(f"negative category index in image {self.id!r}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def point_array(self) -> np.ndarray:
        """Points as an ``(N, 3)`` int64 array of ``(x, y, category)``."""
        if not self.points:
            return np.zeros((0, 3), dtype=np.int64)
        return np.asarray(self.points, dtype=np.int64)

    def category_counts(self, m: int) -> np.ndarray:
        pts = self.point_array()
        return np.bincount(pts[:, 2], minlength=m).astype(np.int64)[:m]


@dataclass(frozen=True, eq=False)
class BlockTargets:
    count_map: np.ndarray
    class_index_map: np.ndarray
    dropped: int = field(default=0)


def build_block_targets(
    points: Sequence[PointAnnotation] | np.ndarray,
    H: int,
    W: int,
    p: int,
    binning: CountBinning,
    m: int,
) -> BlockTargets:
    """Per-block, per-category point counts and their truncated bin indices.

    A point at pixel ``(x, y)`` goes to block ``(y // p, x // p)``. Points in
    the remainder strip beyond ``(H // p) * p`` or ``(W // p) * p`` are dropped
    with a warning.
    """
    if p <= 0:
        raise ValueError(f"patch size must be positive, got {p}")
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    if len(pts) and (pts[:, 2].max() >= m or pts[:, 2].min() < 0):
        raise AnnotationError(f"category index {int(pts[:, 2].max())} inconsistent with m={m}")
    hb, wb = H // p, W // p
    counts, dropped = kernels.block_counts(pts[:, 0], pts[:, 1], pts[:, 2], hb, wb, m, p)
    if dropped:
        logger.warning("%d point(s) in the uncovered remainder strip were dropped", dropped)
    return BlockTargets(counts, np.minimum(counts, binning.n), dropped)


# ---------------------------------------------------------------------------
# annotation files
# ---------------------------------------------------------------------------


def _line_of(text: str, needle: str) -> int:
    pos = text.find(needle)
    return text.count("\n", 0, pos) + 1 if pos >= 0 else 0


def _read_png(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def load_annotations(path: str | os.PathLike, *, load_pixels: bool = True, m: int | None = None) -> list[AnnotatedImage]:
    """Read a dataset annotation file.

    Image paths are resolved relative to the annotation file. With
    ``load_pixels=False`` the returned images carry a zero array of the
    declared size instead of decoded pixels.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"annotation file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        return []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise AnnotationError(f"{path}:1: expected an object with an 'images' list")

    root = os.path.dirname(os.path.abspath(path))
    out = []
    for k, rec in enumerate(doc["images"]):
        rid = rec.get("id") if isinstance(rec, dict) else None
        line = _line_of(text, json.dumps(rid)) if rid is not None else 0
        where = f"{path}:{line}: record {k}"
        try:
            h, w = int(rec["height"]), int(rec["width"])
            raw_points = rec["points"]
            pts = []
            for pt in raw_points:
                if len(pt) != 3:
                    raise AnnotationError(f"{where}: point {pt!r} is not [x, y, cat]")
                x, y, c = (int(v) for v in pt)
                if any(int(v) != v for v in pt):
                    raise AnnotationError(f"{where}: non-integer point {pt!r}")
                if not (0 <= x < w and 0 <= y < h):
                    raise AnnotationError(f"{where}: point out of bounds ({x}, {y}) for {w}x{h} image")
                if c < 0 or (m is not None and c >= m):
                    raise AnnotationError(f"{where}: category {c} out of range")
                pts.append(PointAnnotation(x, y, c))
            if load_pixels:
                pixels = _read_png(os.path.join(root, rec["path"]))
                if pixels.shape[:2] != (h, w):
                    raise AnnotationError(f"{where}: image is {pixels.shape[1]}x{pixels.shape[0]}, record says {w}x{h}")
            else:
                pixels = np.zeros((h, w, 3), dtype=np.float32)
        except AnnotationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{where}: malformed record ({exc})") from None
        out.append(AnnotatedImage(pixels, tuple(pts), str(rid)))
    return out


def dump_annotations(records: Sequence[dict], path: str | os.PathLike) -> None:
    """Write annotation records, one image per line, with stable key order."""
    lines = [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in records]
    body = ",\n".join(lines)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write('{"images":[\n' + body + ("\n" if lines else "") + "]}\n")


def annotation_record(image: AnnotatedImage, rel_path: str) -> dict:
    return {
        "id": image.id,
        "path": rel_path,
        "height": image.height,
        "width": image.width,
        "points": [[p.x, p.y, p.category_index] for p in image.points],
    }
