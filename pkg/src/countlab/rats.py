"""Rank-aware teacher selection and the agglomeration step.

For every batch of ranked patch groups each teacher predicts a count per
crop through its readout projector and the class-agnostic anchors. The
teacher whose predictions violate the nested-crop ordering least is the one
the student distils from on that batch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from countlab.anchors import AnchorTensor
from countlab.datamodel import CountBinning
from countlab.densityhead import DEFAULT_TEMPERATURE
from countlab.encoders import Student, TeacherPool, readout_counts
from countlab.losses import distill_loss, rank_loss
from countlab.patchgroup import RankedPatchGroup, group_count_order

logger = logging.getLogger(__name__)

STRATEGIES = ("rats", "equal", "tdrop")


@dataclass
class SelectionRecord:
    batch_id: int
    losses: list[float]
    selected_index: int
    tie_broken: bool
    group_selected: list[int] | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["group_selected"] is None:
            del d["group_selected"]
        return json.dumps(d, sort_keys=True)


def _stack(groups: Sequence[RankedPatchGroup]):
    if not groups:
        raise ValueError("empty batch")
    k = groups[0].k
    if any(g.k != k for g in groups):
        raise ValueError("all groups in a batch must have the same size k")
    x = torch.from_numpy(np.concatenate([g.patches for g in groups]).copy())
    bc = None
    if all(g.block_counts is not None for g in groups):
        bc = np.concatenate([g.block_counts for g in groups])
    return x, bc, k


def run_teacher(teacher, x, block_counts=None):
    """Forward ``x``; count metadata goes only to teachers that declare they need it."""
    if getattr(teacher, "needs_metadata", False):
        return teacher(x, block_counts)
    return teacher(x)


def predict_group_counts(teacher, projector, group: RankedPatchGroup, anchors: AnchorTensor,
                         binning: CountBinning = CountBinning(4), temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Expected count for each of the ``k`` crops of ``group``."""
    return _predict(teacher, projector, [group], anchors, binning, temperature)[0]


def _predict(teacher, projector, groups, anchors, binning, temperature):
    x, bc, k = _stack(groups)
    if anchors.num_bins != binning.num_bins:
        raise ValueError("anchor bins do not match the binning")
    with torch.no_grad():
        out = run_teacher(teacher, x, bc)
        counts = readout_counts(out.pooled, projector, anchors, binning, temperature)
    return counts.reshape(len(groups), k).double()


def _argmin_lowest(losses: np.ndarray) -> tuple[int, bool]:
    best = losses.min()
    winners = np.flatnonzero(losses == best)
    return int(winners[0]), len(winners) > 1


def select_teacher(pool: TeacherPool, groups: Sequence[RankedPatchGroup], anchors: AnchorTensor, *,
                   binning: CountBinning = CountBinning(4), batch_id: int = 0, epsilon: float = 0.0,
                   per_group: bool = False, temperature: float = DEFAULT_TEMPERATURE) -> SelectionRecord:
    """Score every teacher by its summed rank loss over the batch and pick the minimum.

    Ties go to the lowest pool index. With ``per_group`` the winning teacher of
    each group is also recorded.
    """
    if len(pool) == 0:
        raise ValueError("teacher pool is empty")
    if not groups:
        raise ValueError("empty batch")
    counts = torch.stack([_predict(t, pr, groups, anchors, binning, temperature)
                          for t, pr in zip(pool.teachers, pool.projectors)])
    return select_from_counts(counts, batch_id=batch_id, epsilon=epsilon, per_group=per_group)


def select_from_counts(counts, *, batch_id: int = 0, epsilon: float = 0.0, per_group: bool = False) -> SelectionRecord:
    """Selection from precomputed per-teacher crop counts of shape ``(T, G, k)``."""
    C = torch.as_tensor(counts, dtype=torch.float64)
    if C.ndim != 3 or C.shape[0] == 0 or C.shape[1] == 0:
        raise ValueError("counts must be a non-empty (teachers, groups, k) array")
    pairs = group_count_order(C.shape[2])
    per_teacher = np.array([[float(rank_loss(C[t, g], pairs, epsilon)) for g in range(C.shape[1])]
                            for t in range(C.shape[0])])
    totals = per_teacher.sum(axis=1)
    sel, tie = _argmin_lowest(totals)
    group_sel = [_argmin_lowest(per_teacher[:, g])[0] for g in range(per_teacher.shape[1])] if per_group else None
    return SelectionRecord(int(batch_id), [float(v) for v in totals], sel, tie, group_sel)


def teacher_counts(pool: TeacherPool, groups: Sequence[RankedPatchGroup], anchors: AnchorTensor, *,
                   binning: CountBinning = CountBinning(4), temperature: float = DEFAULT_TEMPERATURE,
                   chunk: int = 16) -> torch.Tensor:
    """Readout counts of every teacher on every group, ``(T, G, k)``; frozen teachers make this cacheable."""
    rows = []
    for t, pr in zip(pool.teachers, pool.projectors):
        parts = [_predict(t, pr, groups[i : i + chunk], anchors, binning, temperature) for i in range(0, len(groups), chunk)]
        rows.append(torch.cat(parts))
    return torch.stack(rows)


def split_batch(groups: Sequence[RankedPatchGroup], batch_size: int) -> list[list[RankedPatchGroup]]:
    """Chunk groups into batches of ``batch_size`` patches (``batch_size / k`` groups)."""
    if not groups:
        raise ValueError("empty batch")
    k = groups[0].k
    if batch_size % k:
        raise ValueError(f"batch size {batch_size} is not divisible by group size {k}")
    per = batch_size // k
    return [list(groups[i : i + per]) for i in range(0, len(groups), per)]


def _teacher_targets(pool, x, bc, i):
    out = run_teacher(pool.teachers[i], x, bc)
    return out.tokens, out.pooled


def _distill_to(student_out, target):
    (s_tok, s_pool), (t_tok, t_pool) = student_out, target
    return distill_loss(s_tok, t_tok) + distill_loss(s_pool, t_pool)


@dataclass
class StepResult:
    loss: float
    record: SelectionRecord | None
    teacher_losses: list[float] = field(default_factory=list)
    kept: list[int] = field(default_factory=list)


def agglomerate_step(student: Student, pool: TeacherPool, groups: Sequence[RankedPatchGroup], anchors: AnchorTensor,
                     optimizer: torch.optim.Optimizer, *, strategy: str = "rats", batch_id: int = 0,
                     binning: CountBinning = CountBinning(4), epsilon: float = 0.0, per_group: bool = False,
                     tdrop_keep: float = 0.5, rng: np.random.Generator | None = None,
                     temperature: float = DEFAULT_TEMPERATURE, record: SelectionRecord | None = None) -> StepResult:
    """One distillation update.

    ``rats`` distils from the selected teacher only; ``equal`` averages the
    losses of all teachers; ``tdrop`` always keeps the teacher with the largest
    loss and each other teacher with probability ``tdrop_keep``.
    With ``per_group`` each group distils from its own winning teacher. A
    precomputed ``record`` (see :func:`select_from_counts`) skips re-scoring.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    x, bc, k = _stack(groups)
    if strategy != "rats":
        record = None
    elif record is None:
        record = select_teacher(pool, groups, anchors, binning=binning, batch_id=batch_id, epsilon=epsilon,
                                per_group=per_group, temperature=temperature)
    if strategy == "rats" and per_group and record.group_selected is None:
        raise ValueError("per_group selection needs a record with group_selected")
    student.train()
    outs = student.forward_all(x)
    kept: list[int] = []
    if strategy == "rats" and not per_group:
        i = record.selected_index
        loss = _distill_to(outs[i], _teacher_targets(pool, x, bc, i))
        kept = [i]
        t_losses = []
    elif strategy == "rats":
        owner = np.repeat(np.asarray(record.group_selected), k)
        loss = x.new_zeros(())
        for i in sorted(set(owner.tolist())):
            rows = torch.from_numpy(np.flatnonzero(owner == i))
            tgt = _teacher_targets(pool, x[rows], None if bc is None else bc[rows.numpy()], i)
            part = _distill_to((outs[i][0][rows], outs[i][1][rows]), tgt)
            loss = loss + part * (len(rows) / len(owner))
        kept = sorted(set(owner.tolist()))
        t_losses = []
    else:
        per = [_distill_to(outs[i], _teacher_targets(pool, x, bc, i)) for i in range(len(pool))]
        t_losses = [float(v.detach()) for v in per]
        if strategy == "equal":
            kept = list(range(len(pool)))
        else:
            gen = rng if rng is not None else np.random.default_rng(batch_id)
            worst = int(np.argmax(t_losses))
            kept = [i for i in range(len(pool)) if i == worst or gen.random() < tdrop_keep]
        loss = torch.stack([per[i] for i in kept]).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite distillation loss in batch {batch_id}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepResult(float(loss.detach()), record, t_losses, kept)


def selection_histogram(records: Sequence[SelectionRecord], num_teachers: int) -> list[int]:
    hist = [0] * num_teachers
    for r in records:
        hist[r.selected_index] += 1
    return hist
