"""``countlab`` command line: data generation, training stages, evaluation, prediction, ablation."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from countlab import pipeline as pl
from countlab import tensorio
from countlab.config import RunConfig, load_config
from countlab.densityhead import extract_centroids, total_counts
from countlab.metrics import EvalRecord
from countlab.rats import STRATEGIES
from countlab.synthdata import generate_dataset, save_png

logger = logging.getLogger("countlab")

MARKER_COLORS = ((0.15, 0.35, 1.0), (1.0, 0.1, 0.1))  # negative blue, positive red


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise SystemExit(f"countlab {args.command}: missing {' '.join(missing)}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> str:
    cfg = load_config(args.config)
    synth = cfg.data.synth
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    generate_dataset(synth, cfg.data.count, args.out)
    _dump_json({"count": cfg.data.count, "synth": synth.to_dict()}, os.path.join(args.out, "dataset.json"))
    logger.info("wrote %d images to %s", cfg.data.count, args.out)
    return args.out


def cmd_agglomerate(args) -> str:
    _require(args, "data")
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    train, _ = pl.load_split(cfg, args.data)
    heads = pl.build_heads(cfg)
    log_path = os.path.join(args.out, "selection.ndjson")
    res = pl.agglomerate(cfg, train, heads, log_path=log_path)
    ckpt = os.path.join(args.out, "student.ckpt")
    pl.save_checkpoint(ckpt, cfg, res.student, pool=res.pool, stage="agglomerate")
    _dump_json(
        {"epoch_losses": res.epoch_losses, "teacher_use_per_epoch": res.histograms, "ties": res.ties,
         "batches": len(res.records), "strategy": cfg.agglomerate.strategy},
        os.path.join(args.out, "agglomerate.json"),
    )
    return ckpt


def cmd_finetune(args) -> str:
    _require(args, "data", "checkpoint")
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    _, student, _, _ = pl.load_checkpoint(args.checkpoint)
    train, _ = pl.load_split(cfg, args.data)
    res = pl.finetune(cfg, student, train)
    ckpt = os.path.join(args.out, "model.ckpt")
    pl.save_checkpoint(ckpt, cfg, res.student, decoder=res.decoder, stage="finetune")
    _dump_json(res.log, os.path.join(args.out, "finetune_log.json"))
    return ckpt


def write_evaluation(cfg: RunConfig, report: dict, details: dict, out: str) -> str:
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "metrics.json")
    _dump_json(report, path)
    with open(os.path.join(out, "per_image.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "pred_negative", "pred_positive", "gt_negative", "gt_positive", "grade_pred", "grade_gt"])
        for i, id_ in enumerate(details["ids"]):
            p, g = details["pred"][i], details["gt"][i]
            w.writerow([id_, repr(float(p[0])), repr(float(p[1])), repr(float(g[0])), repr(float(g[1])),
                        int(details["grade_pred"][i]), int(details["grade_gt"][i])])
    with open(os.path.join(out, "confusion.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        L = details["confusion"].shape[0]
        w.writerow(["gt\\pred"] + [f"grade{j}" for j in range(L)])
        for i in range(L):
            w.writerow([f"grade{i}"] + [int(v) for v in details["confusion"][i]])
    with open(os.path.join(out, "qwk.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rater_a", "rater_b", "qwk", "grade_edges"])
        w.writerow(["ground_truth", "model", repr(float(details["qwk"])), " ".join(repr(e) for e in cfg.eval.grade_edges)])
    return path


def load_per_image(path: str) -> EvalRecord:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    pred = [[float(r["pred_negative"]), float(r["pred_positive"])] for r in rows]
    gt = [[float(r["gt_negative"]), float(r["gt_positive"])] for r in rows]
    return EvalRecord(np.array(pred), np.array(gt), [r["id"] for r in rows])


def cmd_evaluate(args) -> str:
    _require(args, "data", "checkpoint")
    cfg = _config(args)
    _, student, decoder, _ = pl.load_checkpoint(args.checkpoint)
    if decoder is None:
        raise SystemExit("countlab evaluate: checkpoint has no fine-tuned decoder (run finetune first)")
    _, test = pl.load_split(cfg, args.data)
    report, details = pl.evaluate(cfg, student, decoder, test)
    return write_evaluation(cfg, report, details, args.out)


def _heatmap(channel: np.ndarray, p: int, vmax: float) -> np.ndarray:
    from matplotlib import colormaps

    norm = np.clip(channel / vmax, 0.0, 1.0)
    rgb = colormaps["magma"](norm)[..., :3]
    return np.kron(rgb, np.ones((p, p, 1)))


def _draw_marker(img, x, y, color, size=3):
    H, W = img.shape[:2]
    for d in range(-size, size + 1):
        for yy, xx in ((y + d, x), (y, x + d)):
            if 0 <= yy < H and 0 <= xx < W:
                img[yy, xx] = color


def cmd_predict(args) -> str:
    _require(args, "checkpoint", "image")
    cfg = _config(args)
    _, student, decoder, _ = pl.load_checkpoint(args.checkpoint)
    if decoder is None:
        raise SystemExit("countlab predict: checkpoint has no fine-tuned decoder (run finetune first)")
    from countlab.datamodel import _read_png

    pixels = _read_png(args.image)
    heads = pl.build_heads(cfg)
    bundle = pl.predict_image(student, decoder, pixels, heads, cfg.head.temperature)
    D = bundle.D.double().numpy()
    os.makedirs(args.out, exist_ok=True)
    tensorio.save(os.path.join(args.out, "density.bin"), {"D": D, "P": bundle.P.double().numpy()},
                  {"categories": list(cfg.head.categories), "layout": "D: (H', W', m); P: (H', W', m, n+1)"})
    p = cfg.groups.p
    H, W = pixels.shape[:2]
    overlay = pixels.astype(np.float64).copy()
    centroids = {}
    for i, name in enumerate(cfg.head.categories):
        save_png(_heatmap(D[..., i], p, float(cfg.head.n))[:H, :W], os.path.join(args.out, f"heatmap_{i}.png"))
        peaks = extract_centroids(D, i, cfg.eval.centroid_threshold, cfg.eval.centroid_min_distance)
        centroids[name] = [[(v + 0.5) * p, (u + 0.5) * p] for u, v in peaks]
        for x, y in centroids[name]:
            _draw_marker(overlay, int(x), int(y), MARKER_COLORS[i % len(MARKER_COLORS)])
    save_png(overlay, os.path.join(args.out, "centroids.png"))
    counts = total_counts(bundle.D).double().numpy()
    tot = float(counts.sum())
    out = {
        "image": os.path.basename(args.image),
        "counts": {name: float(counts[i]) for i, name in enumerate(cfg.head.categories)},
        "tps": float(counts[-1] / tot) if tot > 0 else 0.0,
        "centroids_xy": centroids,
        "density_shape": list(D.shape),
    }
    path = os.path.join(args.out, "counts.json")
    _dump_json(out, path)
    return path


def run_ablation(cfg: RunConfig, data_dir: str, out: str) -> list[dict]:
    train, test = pl.load_split(cfg, data_dir)
    rows = []
    for strategy in STRATEGIES:
        c = dataclasses.replace(cfg, agglomerate=dataclasses.replace(cfg.agglomerate, strategy=strategy))
        heads = pl.build_heads(c)
        ag = pl.agglomerate(c, train, heads)
        ft = pl.finetune(c, ag.student, train, heads)
        report, _ = pl.evaluate(c, ft.student, ft.decoder, test, heads)
        rows.append({"strategy": strategy, **report})
        logger.info("ablation %s: %s", strategy, report)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["strategy", "NM", "NR", "PM", "PR", "TM", "WM"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (v if k == "strategy" else repr(float(v))) for k, v in r.items()})
    _dump_json(rows, os.path.join(out, "ablation.json"))
    return rows


def cmd_ablate(args) -> str:
    _require(args, "data")
    run_ablation(_config(args), args.data, args.out)
    return os.path.join(args.out, "ablation.csv")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "agglomerate": cmd_agglomerate,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="countlab", description="Rank-aware agglomeration and anchor-guided cell counting.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override the run seed (gen-data: the data seed)")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--data", default=None, help="dataset directory (with annotations.json)")
    ap.add_argument("--checkpoint", default=None, help="checkpoint from a previous stage")
    ap.add_argument("--image", default=None, help="PNG image for predict")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"countlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(result)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
