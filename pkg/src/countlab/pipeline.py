"""End-to-end stages shared by the command line and the acceptance runs.

Every stage is a pure function of the run config, the dataset and, where
relevant, a previous stage's model, so equal seeds give bit-identical
results on one machine (torch is pinned to ``cfg.threads`` threads).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from countlab import tensorio
from countlab.anchors import HashTextEncoder, build_anchor_tensor, build_rats_anchors
from countlab.config import RunConfig
from countlab.datamodel import AnnotatedImage, CategorySet, CountBinning, build_block_targets, load_annotations
from countlab.densityhead import DensityBundle, density_bundle, total_counts
from countlab.encoders import Projector, Student, TeacherPool, ToyViT, make_synthetic_teacher, pretrain_projector
from countlab.losses import loss_terms
from countlab.metrics import EvalRecord, confusion_matrix, count_report, qwk, tps_grade
from countlab.patchgroup import RankedPatchGroup, make_ranked_group
from countlab.rats import SelectionRecord, agglomerate_step, select_from_counts, split_batch, teacher_counts

logger = logging.getLogger(__name__)

CACHE_ENV = "COUNTLAB_CACHE"


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------


def seed_everything(cfg: RunConfig, salt: int = 0) -> None:
    torch.set_num_threads(max(1, int(cfg.threads)))
    torch.manual_seed(int(cfg.seed) * 1000 + salt)


@dataclass(frozen=True, eq=False)
class Heads:
    categories: CategorySet
    binning: CountBinning
    anchors: object  # fine-tuning AnchorTensor (m, n+1, d)
    rats_anchors: object  # class-agnostic AnchorTensor (1, n+1, d)


def build_heads(cfg: RunConfig) -> Heads:
    enc = HashTextEncoder(cfg.head.d_anchor)
    binning = CountBinning(cfg.head.n)
    cats = CategorySet(cfg.head.categories)
    return Heads(cats, binning, build_anchor_tensor(cats, binning, enc), build_rats_anchors(binning, enc))


def load_split(cfg: RunConfig, data_dir: str) -> tuple[list[AnnotatedImage], list[AnnotatedImage]]:
    """Train / held-out split: the last ``data.holdout`` records are held out."""
    images = load_annotations(os.path.join(data_dir, "annotations.json"), m=len(cfg.head.categories))
    if not images:
        raise ValueError(f"no images in {data_dir}")
    h = cfg.data.holdout if len(images) > cfg.data.holdout else 0
    cut = len(images) - h
    return images[:cut], images[cut:]


def build_groups(cfg: RunConfig, images: list[AnnotatedImage]) -> list[RankedPatchGroup]:
    gen = np.random.default_rng([cfg.seed, 1])
    m = len(cfg.head.categories)
    return [make_ranked_group(im, cfg.groups.M, cfg.groups.ratios, rng=gen, p=cfg.groups.p, m=m) for im in images]


def _cache_path(cfg: RunConfig, groups) -> str | None:
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    h = hashlib.sha256(json.dumps([cfg.to_dict()["teachers"], cfg.to_dict()["head"], cfg.seed], sort_keys=True).encode())
    for g in groups:
        h.update(g.source_id.encode())
    os.makedirs(root, exist_ok=True)
    return os.path.join(root, f"teachers-{h.hexdigest()[:16]}.ckpt")


def build_pool(cfg: RunConfig, heads: Heads, groups: list[RankedPatchGroup] | None = None) -> TeacherPool:
    """Synthetic teachers from ``cfg.teachers``; readout projectors optionally pretrained (and cached)."""
    M, p = cfg.groups.M, cfg.groups.p
    teachers = [
        make_synthetic_teacher(s, cfg.seed * 100 + i, heads.rats_anchors, heads.binning, M=M, p=p, temperature=cfg.head.temperature)
        for i, s in enumerate(cfg.teachers.noise)
    ]
    seed_everything(cfg, salt=7)
    projectors = [Projector(t.d_enc, cfg.head.d_anchor) for t in teachers]
    if cfg.teachers.pretrain_epochs > 0 and groups:
        path = _cache_path(cfg, groups)
        if path and os.path.exists(path):
            tensors, _ = tensorio.load(path)
            for i, pr in enumerate(projectors):
                pr.load_state_dict(tensorio.tensors_to_state(f"pool.{i}", tensors))
        else:
            patches = np.concatenate([g.patches for g in groups])
            blocks = np.concatenate([g.block_counts for g in groups])
            for i, (t, pr) in enumerate(zip(teachers, projectors)):
                projectors[i], hist = pretrain_projector(
                    t, (patches, blocks), heads.anchors, cfg.teachers.pretrain_epochs, rats_anchors=heads.rats_anchors,
                    binning=heads.binning, projector=pr, lr=cfg.teachers.pretrain_lr, batch_size=cfg.agglomerate.batch_size,
                    seed=cfg.seed, cfg=cfg.loss, temperature=cfg.head.temperature,
                )
                logger.info("teacher %d readout pretraining: %s", i, hist)
            if path:
                tensors = {}
                for i, pr in enumerate(projectors):
                    tensors.update(tensorio.state_to_tensors(f"pool.{i}", pr))
                tensorio.save(path, tensors, {"kind": "teacher-projectors"})
    return TeacherPool(teachers, projectors)


def build_student(cfg: RunConfig, num_teachers: int) -> Student:
    seed_everything(cfg, salt=1)
    s = cfg.student
    enc = ToyViT(M=cfg.groups.M, p=cfg.groups.p, d_enc=s.d_enc, depth=s.depth, heads=s.heads,
                 mlp_ratio=s.mlp_ratio, layer_ids=s.layer_ids or None)
    return Student(enc, [cfg.head.d_anchor] * num_teachers)


def build_decoder(cfg: RunConfig) -> Projector:
    seed_everything(cfg, salt=2)
    return Projector(cfg.student.d_enc, cfg.head.d_anchor)


def cosine_schedule(opt, sched, steps_per_epoch: int):
    """Linear warm-up then cosine decay from ``lr`` to ``min_lr``, stepped per batch."""
    total = max(1, sched.epochs * steps_per_epoch)
    warm = sched.warmup_epochs * steps_per_epoch
    ratio = sched.min_lr / sched.lr if sched.lr > 0 else 0.0

    def factor(step):
        if step < warm:
            return (step + 1) / warm
        prog = min(1.0, (step - warm) / max(1, total - warm))
        return ratio + 0.5 * (1.0 - ratio) * (1.0 + math.cos(math.pi * prog))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


# ---------------------------------------------------------------------------
# agglomeration
# ---------------------------------------------------------------------------


@dataclass
class AgglomerationResult:
    student: Student
    pool: TeacherPool
    records: list[SelectionRecord] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    histograms: list[list[int]] = field(default_factory=list)
    ties: int = 0


def agglomerate(cfg: RunConfig, images: list[AnnotatedImage], heads: Heads | None = None,
                log_path: str | None = None) -> AgglomerationResult:
    heads = heads or build_heads(cfg)
    groups = build_groups(cfg, images)
    pool = build_pool(cfg, heads, groups)
    student = build_student(cfg, len(pool))
    a = cfg.agglomerate
    result = AgglomerationResult(student, pool)
    log = open(log_path, "w") if log_path else None
    try:
        if a.epochs == 0:
            return result
        per = a.batch_size // cfg.groups.k
        if a.batch_size % cfg.groups.k:
            raise ValueError(f"batch size {a.batch_size} is not divisible by k = {cfg.groups.k}")
        counts = None
        if a.strategy == "rats":
            counts = teacher_counts(pool, groups, heads.rats_anchors, binning=heads.binning, temperature=cfg.head.temperature)
        opt = torch.optim.AdamW(student.parameters(), lr=a.lr, weight_decay=a.weight_decay)
        steps = math.ceil(len(groups) / per)
        sched = cosine_schedule(opt, a, steps)
        tdrop_rng = np.random.default_rng([cfg.seed, 3])
        batch_id = 0
        for epoch in range(a.epochs):
            order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(groups))
            hist = [0] * len(pool)
            losses = []
            for s in range(0, len(order), per):
                idx = order[s : s + per]
                batch = [groups[i] for i in idx]
                rec = None
                if counts is not None:
                    rec = select_from_counts(counts[:, idx], batch_id=batch_id, epsilon=cfg.loss.epsilon_rank, per_group=a.per_group)
                res = agglomerate_step(
                    student, pool, batch, heads.rats_anchors, opt, strategy=a.strategy, batch_id=batch_id,
                    binning=heads.binning, epsilon=cfg.loss.epsilon_rank, per_group=a.per_group, tdrop_keep=a.tdrop_keep,
                    rng=tdrop_rng, temperature=cfg.head.temperature, record=rec,
                )
                sched.step()
                losses.append(res.loss)
                for i in res.kept:
                    hist[i] += 1
                if res.record is not None:
                    result.records.append(res.record)
                    result.ties += int(res.record.tie_broken)
                    if log:
                        log.write(res.record.to_json() + "\n")
                batch_id += 1
            result.epoch_losses.append(float(np.mean(losses)))
            result.histograms.append(hist)
            logger.info("agglomerate epoch %d loss %.5f teachers used %s", epoch, result.epoch_losses[-1], hist)
    finally:
        if log:
            log.close()
    return result


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def window_targets(cfg: RunConfig, groups: list[RankedPatchGroup], heads: Heads):
    """Full-window patches and their block count maps (the ratio-1 crop of each group)."""
    x = np.stack([g.patches[-1] for g in groups])
    bc = np.stack([g.block_counts[-1] for g in groups])
    return x, bc


@torch.no_grad()
def encode_features(student: Student, x: np.ndarray, chunk: int = 64) -> torch.Tensor:
    student.eval()
    parts = [student.encoder.features(torch.from_numpy(np.ascontiguousarray(x[i : i + chunk]))) for i in range(0, len(x), chunk)]
    return torch.cat(parts)


def _mean_terms(terms_list, weights):
    w = np.asarray(weights, dtype=np.float64) / np.sum(weights)
    out = {}
    for key in ("total", "count", "se"):
        out[key] = float(sum(wi * t[key] for wi, t in zip(w, terms_list)))
    for key in ("ce", "dm"):
        out[key] = [float(sum(wi * t[key][c] for wi, t in zip(w, terms_list))) for c in range(len(terms_list[0][key]))]
    return out


def _detach_terms(t):
    f = lambda v: float(v.detach())  # noqa: E731
    return {"total": f(t["total"]), "count": f(t["count"]), "se": f(t["se"]),
            "ce": [f(v) for v in t["ce"]], "dm": [f(v) for v in t["dm"]]}


@dataclass
class FinetuneResult:
    student: Student
    decoder: Projector
    log: list[dict] = field(default_factory=list)


def finetune(cfg: RunConfig, student: Student, images: list[AnnotatedImage], heads: Heads | None = None) -> FinetuneResult:
    """Train the decoder projector with the total loss on frozen student features."""
    heads = heads or build_heads(cfg)
    f = cfg.finetune
    groups = build_groups(cfg, images)
    x, bc = window_targets(cfg, groups, heads)
    counts = torch.from_numpy(bc)
    cls = torch.clamp(counts, max=heads.binning.n)
    decoder = build_decoder(cfg)
    before = {k: v.clone() for k, v in student.state_dict().items()}
    student.requires_grad_(f.unfreeze)
    feats = None if f.unfreeze else encode_features(student, x)
    params = list(decoder.parameters()) + (list(student.encoder.parameters()) if f.unfreeze else [])
    opt = torch.optim.Adam(params, lr=f.lr, weight_decay=f.weight_decay)
    bs = f.batch_size
    steps = math.ceil(len(x) / bs)
    sched = cosine_schedule(opt, f, steps)

    def batch_terms(idx, train):
        if feats is not None:
            F_map = feats[idx]
        else:
            student.train(train)
            F_map = student.encoder.features(torch.from_numpy(np.ascontiguousarray(x[idx])))
        bundle = density_bundle(decoder(F_map), heads.anchors, heads.binning, cfg.head.temperature)
        return loss_terms(bundle.P, bundle.D, (counts[idx], cls[idx]), cfg.loss)

    log = []
    with torch.no_grad():
        chunks = [np.arange(s, min(s + bs, len(x))) for s in range(0, len(x), bs)]
        init = [_detach_terms(batch_terms(c, False)) for c in chunks]
    log.append({"epoch": "initial", **_mean_terms(init, [len(c) for c in chunks])})
    for epoch in range(f.epochs):
        order = np.random.default_rng([cfg.seed, 4, epoch]).permutation(len(x))
        terms, sizes = [], []
        for s in range(0, len(order), bs):
            idx = order[s : s + bs]
            t = batch_terms(idx, True)
            if not torch.isfinite(t["total"]):
                raise FloatingPointError(f"non-finite fine-tuning loss in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            t["total"].backward()
            opt.step()
            sched.step()
            terms.append(_detach_terms(t))
            sizes.append(len(idx))
        log.append({"epoch": epoch, **_mean_terms(terms, sizes)})
        logger.info("finetune epoch %d total %.5f", epoch, log[-1]["total"])
    if not f.unfreeze:
        after = student.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before), "frozen encoder changed during fine-tuning"
    student.requires_grad_(True)
    return FinetuneResult(student, decoder, log)


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict_windows(student: Student, decoder: Projector, x: np.ndarray, heads: Heads, temperature: float,
                    chunk: int = 64) -> DensityBundle:
    """Density bundle for a batch of ``(B, M, M, 3)`` windows."""
    student.eval()
    decoder.eval()
    Ps, Ds = [], []
    for i in range(0, len(x), chunk):
        F_map = student.encoder.features(torch.from_numpy(np.ascontiguousarray(x[i : i + chunk], dtype=np.float32)))
        b = density_bundle(decoder(F_map), heads.anchors, heads.binning, temperature)
        Ps.append(b.P)
        Ds.append(b.D)
    return DensityBundle(torch.cat(Ps), torch.cat(Ds))


def predict_image(student: Student, decoder: Projector, pixels: np.ndarray, heads: Heads, temperature: float) -> DensityBundle:
    """Tile an ``H x W`` image into ``M x M`` windows and stitch the block maps.

    Images whose sides are not multiples of ``M`` are padded with their median
    colour; blocks lying entirely in the padding are discarded.
    """
    M, p = student.encoder.M, student.encoder.p
    H, W = pixels.shape[:2]
    Hp, Wp = -(-H // M) * M, -(-W // M) * M
    canvas = np.empty((Hp, Wp, 3), dtype=np.float32)
    canvas[:] = np.median(pixels.reshape(-1, 3), axis=0)
    canvas[:H, :W] = pixels
    tiles = canvas.reshape(Hp // M, M, Wp // M, M, 3).transpose(0, 2, 1, 3, 4).reshape(-1, M, M, 3)
    b = predict_windows(student, decoder, tiles, heads, temperature)
    g = M // p
    ty, tx = Hp // M, Wp // M

    def stitch(t):
        t = t.reshape(ty, tx, g, g, *t.shape[3:])
        t = t.permute(0, 2, 1, 3, *range(4, t.ndim)).reshape(ty * g, tx * g, *t.shape[4:])
        return t[: -(-H // p), : -(-W // p)]

    return DensityBundle(stitch(b.P), stitch(b.D))


def evaluate(cfg: RunConfig, student: Student, decoder: Projector, images: list[AnnotatedImage],
             heads: Heads | None = None) -> tuple[dict, dict]:
    """Metrics report and per-image details (counts, TPS grades, confusion matrix)."""
    heads = heads or build_heads(cfg)
    m = heads.categories.m
    preds, gts = [], []
    for im in images:
        D = predict_image(student, decoder, im.pixels, heads, cfg.head.temperature).D
        preds.append(total_counts(D).double().numpy())
        gts.append(im.category_counts(m).astype(np.float64))
    rec = EvalRecord(np.array(preds), np.array(gts), [im.id for im in images])
    return report_from_record(cfg, rec)


def coactivation_fraction(student: Student, decoder: Projector, images: list[AnnotatedImage], heads: Heads,
                          tau: float, temperature: float) -> float:
    """Fraction of blocks where at least two category densities exceed ``tau``."""
    hits = total = 0
    for im in images:
        D = predict_image(student, decoder, im.pixels, heads, temperature).D
        active = (D > tau).sum(dim=-1) >= 2
        hits += int(active.sum())
        total += active.numel()
    return hits / total if total else 0.0


def report_from_record(cfg: RunConfig, rec: EvalRecord) -> tuple[dict, dict]:
    report = count_report(rec, cfg.loss.norm_floor)
    levels = len(cfg.eval.grade_edges) + 1
    gp = tps_grade(rec.tps_pred[0], cfg.eval.grade_edges)
    gg = tps_grade(rec.tps_gt[0], cfg.eval.grade_edges)
    kappa = qwk(gg, gp, levels)
    details = {
        "ids": rec.ids,
        "pred": rec.pred,
        "gt": rec.gt,
        "grade_pred": gp,
        "grade_gt": gg,
        "confusion": confusion_matrix(gg, gp, levels),
        "qwk": kappa,
    }
    return report, details


def constant_baseline(train: list[AnnotatedImage], test: list[AnnotatedImage], m: int) -> np.ndarray:
    """Per-category MAE of always predicting the training-mean count."""
    mean = np.mean([im.category_counts(m) for im in train], axis=0)
    gt = np.array([im.category_counts(m) for im in test], dtype=np.float64)
    return np.abs(gt - mean).mean(axis=0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, cfg: RunConfig, student: Student, *, pool: TeacherPool | None = None,
                    decoder: Projector | None = None, stage: str = "agglomerate", extra: dict | None = None) -> None:
    tensors = tensorio.state_to_tensors("student", student)
    if decoder is not None:
        tensors.update(tensorio.state_to_tensors("decoder", decoder))
    if pool is not None:
        for i, pr in enumerate(pool.projectors):
            tensors.update(tensorio.state_to_tensors(f"pool.{i}", pr))
    tensors["rng.torch"] = torch.get_rng_state()
    meta = {"stage": stage, "config": cfg.to_dict(), "rng": {"seed": cfg.seed}, **(extra or {})}
    tensorio.save(path, tensors, meta)


def load_checkpoint(path: str) -> tuple[RunConfig, Student, Projector | None, dict]:
    from countlab.config import from_dict

    tensors, meta = tensorio.load(path)
    cfg = from_dict(meta["config"])
    n_teachers = len(cfg.teachers.noise)
    student = build_student(cfg, n_teachers)
    student.load_state_dict(tensorio.tensors_to_state("student", tensors))
    decoder = None
    if any(k.startswith("decoder.") for k in tensors):
        decoder = build_decoder(cfg)
        decoder.load_state_dict(tensorio.tensors_to_state("decoder", tensors))
    return cfg, student, decoder, meta
