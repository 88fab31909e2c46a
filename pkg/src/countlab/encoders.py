"""Encoders behind one interface: the toy student, synthetic teachers, projectors.

Every encoder maps a batch of ``(B, M, M, 3)`` images in ``[0, 1]`` to an
:class:`EncoderOutput` holding a ``(B, M/p, M/p, d)`` token grid, a pooled
``(B, d)`` vector and the exposed intermediate layer outputs.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from countlab.anchors import AnchorTensor
from countlab.datamodel import CountBinning
from countlab.densityhead import DEFAULT_TEMPERATURE, density_bundle, expected_density, similarity_probs
from countlab.losses import LossConfig, count_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EncoderOutput:
    tokens: torch.Tensor  # (B, H', W', d)
    pooled: torch.Tensor  # (B, d)
    layers: tuple[torch.Tensor, ...]  # exposed layers, each (B, 1 + H'W', d) with the pooled slot first


def default_layer_ids(depth: int) -> tuple[int, ...]:
    """Final quarter of the blocks (at least one), 0-based."""
    q = max(1, depth // 4)
    return tuple(range(depth - q, depth))


def _check_images(x: torch.Tensor, M: int) -> torch.Tensor:
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != (M, M, 3):
        raise ValueError(f"expected images of shape (B, {M}, {M}, 3), got {tuple(x.shape)}")
    return x


class ToyViT(nn.Module):
    """Small pre-norm vision transformer with a class token."""

    def __init__(
        self,
        M: int = 112,
        p: int = 14,
        d_enc: int = 128,
        depth: int = 4,
        heads: int = 4,
        mlp_ratio: float = 2.0,
        layer_ids: Sequence[int] | None = None,
    ):
        super().__init__()
        if M % p:
            raise ValueError(f"image size {M} is not a multiple of patch size {p}")
        self.M, self.p, self.d_enc, self.depth = M, p, d_enc, depth
        self.grid = M // p
        ids = tuple(layer_ids) if layer_ids else default_layer_ids(depth)
        if any(not 0 <= i < depth for i in ids):
            raise ValueError(f"layer ids {ids} outside 0..{depth - 1}")
        self.layer_ids = ids
        self.patch_embed = nn.Conv2d(3, d_enc, kernel_size=p, stride=p)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d_enc))
        self.pos_embed = nn.Parameter(0.02 * torch.randn(1, 1 + self.grid**2, d_enc))
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_enc,
                heads,
                int(d_enc * mlp_ratio),
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(depth)
        )
        self.norm = nn.LayerNorm(d_enc)

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        x = _check_images(x, self.M)
        B = x.shape[0]
        h = self.patch_embed((x.permute(0, 3, 1, 2) - 0.5) / 0.25)
        h = h.flatten(2).transpose(1, 2)
        h = torch.cat([self.cls_token.expand(B, -1, -1), h], dim=1) + self.pos_embed
        layers = []
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            if i in self.layer_ids:
                layers.append(self.norm(h))
        out = self.norm(h)
        tokens = out[:, 1:].reshape(B, self.grid, self.grid, self.d_enc)
        return EncoderOutput(tokens, out[:, 0], tuple(layers))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Mean of the exposed layer token grids, ``(B, H', W', d_enc)``."""
        layers = self(x).layers
        grid = torch.stack([l[:, 1:] for l in layers]).mean(dim=0)
        return grid.reshape(grid.shape[0], self.grid, self.grid, self.d_enc)


def big_encoder(M: int = 112, p: int = 14, seed: int = 0) -> ToyViT:
    """Frozen randomly initialised ViT-S sized encoder used as a size reference."""
    g = torch.random.fork_rng()
    with g:
        torch.manual_seed(seed)
        enc = ToyViT(M=M, p=p, d_enc=384, depth=12, heads=6, mlp_ratio=4.0)
    enc.requires_grad_(False)
    return enc.eval()


def count_parameters(module: nn.Module) -> int:
    return sum(t.numel() for t in module.parameters())


class Projector(nn.Module):
    """Two-layer perceptron with a residual skip.

    ``y = skip(x) + W2 gelu(W1 x + b1) + b2``; the skip is the identity when
    widths agree and a linear map otherwise. ``W2``/``b2`` start at zero, so
    a fresh projector equals its skip path.
    """

    def __init__(self, d_in: int, d_out: int, hidden: int | None = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        h = hidden or max(d_in, d_out)
        self.skip = nn.Identity() if d_in == d_out else nn.Linear(d_in, d_out)
        self.fc1 = nn.Linear(d_in, h)
        self.fc2 = nn.Linear(h, d_out)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"projector expects width {self.d_in}, got {x.shape[-1]}")
        return self.skip(x) + self.fc2(F.gelu(self.fc1(x)))


# ---------------------------------------------------------------------------
# synthetic teachers
# ---------------------------------------------------------------------------


class SyntheticTeacher(nn.Module):
    """Frozen encoder that writes known counts into anchor-aligned features.

    A count ``t`` in ``[0, n]`` becomes the unit vector
    ``x = A^+ z + r v`` where ``A`` holds the class-agnostic anchors,
    ``z_j = rho * max(0, 1 - |j - t|)`` is a hat profile over the bins and
    ``v`` is a unit vector orthogonal to every anchor. Hence ``A x = z``: the
    anchor cosines are exactly ``z``. ``t`` is solved by bisection so that the
    softmax expectation over bins equals the requested count.

    The pooled vector encodes the patch total ``clip(C + N(0, s^2), 0, n)``;
    each token encodes its block total, with the positive fraction stored as
    the angle of ``v`` in a fixed two-dimensional null-space plane. Noise is a
    deterministic function of ``seed`` and the patch bytes. Block noise uses
    scale ``s / sqrt(H' W')`` so block noise summed over a patch has variance
    ``s^2``.
    """

    needs_metadata = True

    def __init__(
        self,
        anchors: AnchorTensor,
        binning: CountBinning,
        skill_noise: float = 0.0,
        seed: int = 0,
        M: int = 112,
        p: int = 14,
        temperature: float = DEFAULT_TEMPERATURE,
        rho: float = 0.8,
    ):
        super().__init__()
        if skill_noise < 0:
            raise ValueError("skill_noise must be >= 0")
        A = np.asarray(anchors.values, dtype=np.float64).reshape(-1, anchors.d)
        if A.shape[0] != binning.num_bins:
            raise ValueError("teacher anchors must be a single class-agnostic row of n+1 bins")
        d = A.shape[1]
        if d < A.shape[0] + 2:
            raise ValueError("anchor width too small for a two-dimensional null space")
        self.skill_noise = float(skill_noise)
        self.seed = int(seed)
        self.M, self.p, self.grid, self.d_enc = M, p, M // p, d
        self.binning = binning
        self.temperature = float(temperature)
        self.rho = float(rho)
        pinv = np.linalg.pinv(A)
        # orthonormal basis of the anchors' complement, fixed by the anchors alone
        q, _ = np.linalg.qr(np.concatenate([A.T, np.eye(d)], axis=1))
        null = q[:, A.shape[0] : A.shape[0] + 2].T
        self._A, self._pinv, self._null = A, pinv, null
        reps = np.asarray(binning.representatives, dtype=np.float64)
        self._reps = reps
        grid = np.linspace(0.0, binning.n, 4 * binning.n * 16 + 1)
        if np.linalg.norm(self._hat(grid) @ pinv.T, axis=-1).max() >= 1.0:
            raise ValueError("rho too large: anchor component exceeds unit norm")
        lo, hi = self._expect(np.array([0.0, float(binning.n)]))
        self.count_range = (float(lo), float(hi))
        # bracketing table for solve_profile; the running maximum keeps the
        # brackets valid where the expectation curve wiggles by round-off
        self._t_table = np.linspace(0.0, float(binning.n), 1024 * binning.n + 1)
        self._e_table = np.maximum.accumulate(self._expect(self._t_table))
        self.register_buffer("anchor_basis", torch.from_numpy(A.astype(np.float32)))

    def _hat(self, t):
        return self.rho * np.maximum(0.0, 1.0 - np.abs(self._reps[None, :] - t[:, None]))

    def _expect(self, t):
        z = self._hat(t) / self.temperature
        w = np.exp(z - z.max(axis=1, keepdims=True))
        return (w * self._reps).sum(axis=1) / w.sum(axis=1)

    def solve_profile(self, counts: np.ndarray) -> np.ndarray:
        """Hat position ``t`` whose softmax expectation equals ``counts`` (clipped to the reachable range)."""
        c = np.clip(np.asarray(counts, dtype=np.float64).ravel(), *self.count_range)
        k = np.clip(np.searchsorted(self._e_table, c) - 1, 0, len(self._t_table) - 2)
        lo, hi = self._t_table[k], self._t_table[k + 1]
        for _ in range(34):
            mid = 0.5 * (lo + hi)
            below = self._expect(mid) < c
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def embed(self, counts: np.ndarray, angle: np.ndarray | float = 0.0) -> np.ndarray:
        counts = np.asarray(counts, dtype=np.float64)
        t = self.solve_profile(counts)
        core = self._hat(t) @ self._pinv.T
        r = np.sqrt(np.clip(1.0 - (core**2).sum(axis=1), 0.0, None))
        ang = np.broadcast_to(np.asarray(angle, dtype=np.float64).ravel(), t.shape)
        v = np.cos(ang)[:, None] * self._null[0] + np.sin(ang)[:, None] * self._null[1]
        return (core + r[:, None] * v).reshape(*counts.shape, self.d_enc)

    def _noise(self, patch: np.ndarray, shape):
        if self.skill_noise == 0.0:
            return 0.0, np.zeros(shape)
        crc = zlib.crc32(np.ascontiguousarray(patch, dtype=np.float32).tobytes())
        gen = np.random.default_rng([self.seed, crc])
        pooled = self.skill_noise * gen.standard_normal()
        blocks = self.skill_noise / math.sqrt(shape[0] * shape[1]) * gen.standard_normal(shape)
        return pooled, blocks

    @torch.no_grad()
    def forward(self, x: torch.Tensor, block_counts=None) -> EncoderOutput:
        x = _check_images(x, self.M)
        if block_counts is None:
            raise ValueError("synthetic teachers need per-block count metadata for every patch")
        bc = np.asarray(block_counts.cpu() if torch.is_tensor(block_counts) else block_counts, dtype=np.float64)
        if bc.ndim == 3:
            bc = bc[None]
        B, g = x.shape[0], self.grid
        if bc.shape[:3] != (B, g, g) or bc.shape[3] != 2:
            raise ValueError(f"block counts must be (B, {g}, {g}, 2), got {bc.shape}")
        n = self.binning.n
        xs = x.detach().cpu().numpy()
        pooled_c = np.empty(B)
        block_c = np.empty((B, g, g))
        for b in range(B):
            pn, bn = self._noise(xs[b], (g, g))
            pooled_c[b] = np.clip(bc[b].sum() + pn, 0.0, n)
            block_c[b] = np.clip(bc[b].sum(axis=-1) + bn, 0.0, n)
        tot = bc.sum(axis=-1)
        frac = np.where(tot > 0, bc[..., 1] / np.where(tot > 0, tot, 1.0), 0.0)
        tokens = self.embed(block_c, 0.5 * math.pi * frac)
        pooled = self.embed(pooled_c)
        tok = torch.from_numpy(tokens.astype(np.float32))
        pool = torch.from_numpy(pooled.astype(np.float32))
        seq = torch.cat([pool[:, None], tok.reshape(B, g * g, -1)], dim=1)
        return EncoderOutput(tok, pool, (seq,))


def make_synthetic_teacher(skill_noise: float, seed: int, anchors: AnchorTensor, binning: CountBinning = CountBinning(4), **kw) -> SyntheticTeacher:
    teacher = SyntheticTeacher(anchors, binning, skill_noise, seed, **kw)
    teacher.requires_grad_(False)
    return teacher.eval()


class TeacherPool(nn.Module):
    """Ordered frozen teachers, each with a readout projector into anchor space."""

    def __init__(self, teachers: Sequence[nn.Module], projectors: Sequence[Projector] | None = None, d_anchor: int | None = None):
        super().__init__()
        if not teachers:
            raise ValueError("teacher pool is empty")
        self.teachers = nn.ModuleList(teachers)
        if projectors is None:
            projectors = [Projector(t.d_enc, d_anchor or t.d_enc) for t in teachers]
        if len(projectors) != len(teachers):
            raise ValueError("one projector per teacher is required")
        for t, pr in zip(teachers, projectors):
            if pr.d_in != t.d_enc:
                raise ValueError(f"projector width {pr.d_in} does not match teacher width {t.d_enc}")
        self.projectors = nn.ModuleList(projectors)
        self.requires_grad_(False)
        self.eval()

    def __len__(self) -> int:
        return len(self.teachers)

    def train(self, mode: bool = True):
        # teachers and their readouts stay in eval mode
        return super().train(False)


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------


class Student(nn.Module):
    """Toy encoder plus one projector per (teacher, exposed layer)."""

    def __init__(self, encoder: ToyViT, teacher_dims: Sequence[int]):
        super().__init__()
        self.encoder = encoder
        self.heads = nn.ModuleList(
            nn.ModuleList(Projector(encoder.d_enc, d_t) for _ in encoder.layer_ids) for d_t in teacher_dims
        )

    @property
    def M(self) -> int:
        return self.encoder.M

    def forward(self, x: torch.Tensor, teacher: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
        return student_forward(self, x, teacher)

    def forward_all(self, x: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Projected outputs for every teacher from a single encoder pass."""
        out = self.encoder(x)
        return [self._project(out, i) for i in range(len(self.heads))]

    def _project(self, out: EncoderOutput, teacher: int):
        heads = self.heads[teacher]
        seqs = torch.stack([h(l) for h, l in zip(heads, out.layers)]).mean(dim=0)
        B, g = seqs.shape[0], self.encoder.grid
        return seqs[:, 1:].reshape(B, g, g, -1), seqs[:, 0]


def student_forward(student: Student, image: torch.Tensor, teacher: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Projected token grid ``(B, H', W', d_t)`` and pooled vector for one teacher.

    Each exposed layer is projected by its own head and the projections are
    averaged. The pooled vector is the averaged projection of the class token.
    """
    single = image.ndim == 3
    out = student.encoder(image)
    tokens, pooled = student._project(out, teacher)
    if single:
        return tokens[0], pooled[0]
    return tokens, pooled


# ---------------------------------------------------------------------------
# projector pretraining
# ---------------------------------------------------------------------------


def readout_counts(pooled: torch.Tensor, projector: nn.Module, anchors: AnchorTensor, binning: CountBinning,
                   temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Expected count from pooled features matched against class-agnostic anchors."""
    P = similarity_probs(projector(pooled), anchors, temperature)[..., 0, :]
    return expected_density(P, binning)


def _pretrain_objective(teacher, projector, x, bc, anchors, rats_anchors, binning, cfg, temperature):
    out = teacher(x, bc)
    bundle = density_bundle(projector(out.tokens.double()), anchors, binning, temperature)
    bct = torch.as_tensor(bc)
    cls = torch.clamp(bct, max=binning.n)
    loss = count_loss(bundle.P, bundle.D, (bct, cls), cfg)
    pred = readout_counts(out.pooled.double(), projector, rats_anchors, binning, temperature)
    true = torch.clamp(bct.sum(dim=(1, 2, 3)).double(), max=float(binning.n))
    return loss + ((pred - true) ** 2).mean()


def pretrain_projector(
    teacher: SyntheticTeacher,
    dataset: tuple[np.ndarray, np.ndarray],
    anchors: AnchorTensor,
    epochs: int,
    *,
    rats_anchors: AnchorTensor,
    binning: CountBinning = CountBinning(4),
    projector: Projector | None = None,
    lr: float = 1e-4,
    batch_size: int = 32,
    seed: int = 0,
    cfg: LossConfig | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[Projector, list[float]]:
    """Fit a teacher's readout projector on ``(patches, block_counts)``.

    The objective is the category-aware counting loss on the projected tokens
    plus the squared error of the class-agnostic pooled readout, which keeps
    the projector usable for teacher ranking. Returns the projector and the
    full-dataset loss before training and after every epoch.
    """
    patches, blocks = dataset
    cfg = cfg or LossConfig(ot_iters=4000)
    if projector is None:
        projector = Projector(teacher.d_enc, anchors.d)
    projector = projector.double()
    x_all = torch.as_tensor(np.asarray(patches, dtype=np.float32))
    bc_all = np.asarray(blocks, dtype=np.int64)

    def full_loss():
        with torch.no_grad():
            parts = []
            for s in range(0, len(x_all), batch_size):
                xb, bb = x_all[s : s + batch_size], bc_all[s : s + batch_size]
                parts.append(float(_pretrain_objective(teacher, projector, xb, bb, anchors, rats_anchors, binning, cfg, temperature)) * len(xb))
            return sum(parts) / len(x_all)

    history = [full_loss()]
    if epochs <= 0:
        return projector.float(), history
    opt = torch.optim.Adam(projector.parameters(), lr=lr)
    gen = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = gen.permutation(len(x_all))
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            loss = _pretrain_objective(teacher, projector, x_all[idx], bc_all[idx], anchors, rats_anchors, binning, cfg, temperature)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"projector pretraining diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(full_loss())
        logger.info("pretrain epoch %d loss %.5f", epoch, history[-1])
    return projector.float(), history
