"""End-to-end command tests on the tiny configuration.

Every stage runs in-process through ``countlab.cli.main`` on a couple of
dozen 56-pixel images, so the whole module finishes in about a minute.
"""

import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from countlab import cli, tensorio
from countlab import pipeline as pl
from countlab.config import load_config
from countlab.datamodel import load_annotations
from countlab.metrics import EvalRecord

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.toml"
REPORT_KEYS = {"NM", "NR", "PM", "PR", "TM", "WM"}


def variant(tmp, name, *replacements):
    """Copy the tiny config with literal text replacements."""
    text = TINY.read_text()
    for old, new in replacements:
        assert old in text, old
        text = text.replace(old, new, 1)
    path = Path(tmp) / f"{name}.toml"
    path.write_text(text)
    return str(path)


def run(*argv):
    assert cli.main([str(a) for a in argv]) == 0


def files_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Data, agglomerated student and fine-tuned model shared by the module."""
    root = tmp_path_factory.mktemp("tiny")
    data, ag, ft = root / "data", root / "ag", root / "ft"
    run("gen-data", "--config", TINY, "--out", data)
    run("agglomerate", "--config", TINY, "--data", data, "--out", ag)
    run("finetune", "--config", TINY, "--data", data, "--checkpoint", ag / "student.ckpt", "--out", ft)
    return root


class TestGenData:
    def test_files_exist_and_validate(self, work):
        cfg = load_config(TINY)
        images = load_annotations(work / "data" / "annotations.json", m=2)
        assert len(images) == cfg.data.count
        assert len(list((work / "data" / "images").glob("*.png"))) == cfg.data.count
        for im in images:
            assert im.pixels.shape == (56, 56, 3)
            assert all(0 <= q.x < 56 and 0 <= q.y < 56 and q.category_index in (0, 1) for q in im.points)
        meta = json.loads((work / "data" / "dataset.json").read_text())
        assert meta["count"] == cfg.data.count

    def test_rerun_identical_bytes(self, work, tmp_path):
        run("gen-data", "--config", TINY, "--out", tmp_path / "again")
        assert files_bytes(tmp_path / "again") == files_bytes(work / "data")

    def test_seed_override_changes_data(self, work, tmp_path):
        run("gen-data", "--config", TINY, "--seed", 1, "--out", tmp_path / "other")
        a = (tmp_path / "other" / "annotations.json").read_bytes()
        assert a != (work / "data" / "annotations.json").read_bytes()

    def test_empty_config_is_an_error(self, tmp_path, capsys):
        empty = tmp_path / "empty.toml"
        empty.write_text("")
        assert cli.main(["gen-data", "--config", str(empty), "--out", str(tmp_path / "x")]) == 1
        assert "configuration is empty" in capsys.readouterr().err

    def test_unknown_key_is_an_error(self, tmp_path, capsys):
        bad = variant(tmp_path, "bad", ("[loss]\n", "[loss]\nbogus = 1\n"))
        assert cli.main(["gen-data", "--config", bad, "--out", str(tmp_path / "x")]) == 1
        assert "unknown key(s) in [loss]: bogus" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["gen-data", "--config", str(tmp_path / "nope.toml")]) == 1


class TestAgglomerate:
    def test_selection_log_argmin(self, work):
        lines = (work / "ag" / "selection.ndjson").read_text().splitlines()
        summary = json.loads((work / "ag" / "agglomerate.json").read_text())
        assert len(lines) == summary["batches"] > 0
        ids = []
        for line in lines:
            rec = json.loads(line)
            losses = np.array(rec["losses"])
            assert len(losses) == 2
            assert rec["selected_index"] == int(np.flatnonzero(losses == losses.min())[0])
            assert rec["tie_broken"] == bool(np.sum(losses == losses.min()) > 1)
            ids.append(rec["batch_id"])
        assert ids == list(range(len(ids)))
        assert summary["ties"] == sum(json.loads(l)["tie_broken"] for l in lines)

    def test_equal_strategy_writes_no_selection_entries(self, work, tmp_path):
        cfg = variant(tmp_path, "equal", ('strategy = "rats"', 'strategy = "equal"'))
        run("agglomerate", "--config", cfg, "--data", work / "data", "--out", tmp_path / "eq")
        assert (tmp_path / "eq" / "selection.ndjson").read_text() == ""
        summary = json.loads((tmp_path / "eq" / "agglomerate.json").read_text())
        assert summary["batches"] == 0
        assert all(h[0] == h[1] > 0 for h in summary["teacher_use_per_epoch"])

    def test_zero_epochs_checkpoint_equals_initialization(self, work, tmp_path):
        cfg_path = variant(tmp_path, "zero", ('strategy = "rats"\nepochs = 2', 'strategy = "rats"\nepochs = 0'))
        run("agglomerate", "--config", cfg_path, "--data", work / "data", "--out", tmp_path / "z")
        tensors, _ = tensorio.load(tmp_path / "z" / "student.ckpt")
        fresh = pl.build_student(load_config(cfg_path), 2)
        ref = tensorio.state_to_tensors("student", fresh)
        for k, v in ref.items():
            assert tensors[k].tobytes() == v.tobytes(), k
        assert (tmp_path / "z" / "selection.ndjson").read_text() == ""

    def test_trained_student_differs_from_initialization(self, work):
        tensors, meta = tensorio.load(work / "ag" / "student.ckpt")
        ref = tensorio.state_to_tensors("student", pl.build_student(load_config(TINY), 2))
        assert meta["stage"] == "agglomerate"
        assert any(tensors[k].tobytes() != v.tobytes() for k, v in ref.items())

    def test_checkpoint_round_trip_bytes(self, work, tmp_path):
        src = work / "ag" / "student.ckpt"
        tensorio.save(tmp_path / "copy.ckpt", *tensorio.load(src))
        assert (tmp_path / "copy.ckpt").read_bytes() == src.read_bytes()

    def test_checkpoint_carries_config_and_rng(self, work):
        tensors, meta = tensorio.load(work / "ag" / "student.ckpt")
        assert meta["config"] == load_config(TINY).to_dict()
        assert "rng.torch" in tensors and meta["rng"]["seed"] == 0

    def test_missing_data_argument(self):
        with pytest.raises(SystemExit, match="--data"):
            cli.main(["agglomerate", "--config", str(TINY)])


class TestFinetune:
    def test_encoder_frozen_bitwise(self, work):
        before, _ = tensorio.load(work / "ag" / "student.ckpt")
        after, meta = tensorio.load(work / "ft" / "model.ckpt")
        assert meta["stage"] == "finetune"
        keys = [k for k in before if k.startswith("student.")]
        assert keys
        for k in keys:
            assert after[k].tobytes() == before[k].tobytes(), k
        assert any(k.startswith("decoder.") for k in after)

    def test_loss_log_descends(self, work):
        log = json.loads((work / "ft" / "finetune_log.json").read_text())
        assert log[0]["epoch"] == "initial"
        epochs = [e for e in log if e["epoch"] != "initial"]
        assert len(epochs) == load_config(TINY).finetune.epochs
        assert epochs[-1]["total"] < epochs[0]["total"]
        for e in log:
            assert set(e) == {"epoch", "total", "count", "se", "ce", "dm"}
            assert len(e["ce"]) == len(e["dm"]) == 2

    def test_gamma_only_changes_the_se_term(self, work, tmp_path):
        cfg0 = variant(tmp_path, "g0", ("gamma = 0.5", "gamma = 0.0"))
        run("finetune", "--config", cfg0, "--data", work / "data", "--checkpoint", work / "ag" / "student.ckpt",
            "--out", tmp_path / "g0")
        a = json.loads((work / "ft" / "finetune_log.json").read_text())[0]
        b = json.loads((tmp_path / "g0" / "finetune_log.json").read_text())[0]
        for key in ("count", "se", "ce", "dm"):
            assert a[key] == b[key], key
        assert b["total"] == pytest.approx(b["count"], abs=1e-9)
        # totals are float32 sums, so compare at single precision
        assert a["total"] == pytest.approx(b["total"] + 0.5 * a["se"], rel=1e-6)


class TestEvaluate:
    @pytest.fixture(scope="class")
    @staticmethod
    def evaluated(work):
        out = work / "ev"
        run("evaluate", "--config", TINY, "--data", work / "data", "--checkpoint", work / "ft" / "model.ckpt", "--out", out)
        return out

    def test_report_keys(self, evaluated):
        report = json.loads((evaluated / "metrics.json").read_text())
        assert set(report) == REPORT_KEYS
        assert all(np.isfinite(v) and v >= 0 for v in report.values())

    def test_recomputed_from_per_image_counts(self, evaluated):
        report = json.loads((evaluated / "metrics.json").read_text())
        rec = cli.load_per_image(evaluated / "per_image.csv")
        assert len(rec.ids) == load_config(TINY).data.holdout
        again, _ = pl.report_from_record(load_config(TINY), rec)
        for k in REPORT_KEYS:
            assert again[k] == pytest.approx(report[k], abs=1e-9)

    def test_grades_and_confusion_consistent(self, evaluated):
        with open(evaluated / "per_image.csv") as fh:
            rows = list(csv.DictReader(fh))
        with open(evaluated / "confusion.csv") as fh:
            conf = np.array([[int(v) for v in r[1:]] for r in list(csv.reader(fh))[1:]])
        assert conf.sum() == len(rows)
        for r in rows:
            conf[int(r["grade_gt"]), int(r["grade_pred"])] -= 1
        assert np.all(conf == 0)

    def test_deterministic_bytes(self, work, evaluated, tmp_path):
        run("evaluate", "--config", TINY, "--data", work / "data", "--checkpoint", work / "ft" / "model.ckpt",
            "--out", tmp_path)
        assert (tmp_path / "metrics.json").read_bytes() == (evaluated / "metrics.json").read_bytes()

    def test_perfect_predictions_give_zero_errors(self, work):
        images = load_annotations(work / "data" / "annotations.json", m=2)
        gt = np.array([im.category_counts(2) for im in images], dtype=np.float64)
        report, details = pl.report_from_record(load_config(TINY), EvalRecord(gt.copy(), gt, [im.id for im in images]))
        assert all(v == 0 for v in report.values())
        assert details["qwk"] == 1.0

    def test_agglomerate_checkpoint_rejected(self, work):
        with pytest.raises(SystemExit, match="no fine-tuned decoder"):
            cli.main(["evaluate", "--config", str(TINY), "--data", str(work / "data"),
                      "--checkpoint", str(work / "ag" / "student.ckpt")])


class TestPredict:
    @pytest.fixture(scope="class")
    @staticmethod
    def predicted(work):
        image = sorted((work / "data" / "images").glob("*.png"))[0]
        out = work / "pred"
        run("predict", "--config", TINY, "--checkpoint", work / "ft" / "model.ckpt", "--image", image, "--out", out)
        return image, out

    def test_outputs(self, predicted):
        _, out = predicted
        for name in ("density.bin", "heatmap_0.png", "heatmap_1.png", "centroids.png", "counts.json"):
            assert (out / name).is_file(), name

    def test_density_shape(self, predicted):
        _, out = predicted
        tensors, meta = tensorio.load(out / "density.bin")
        assert tensors["D"].shape == (4, 4, 2)
        assert tensors["P"].shape == (4, 4, 2, 5)
        np.testing.assert_allclose(tensors["P"].sum(-1), 1.0, atol=1e-5)
        counts = json.loads((out / "counts.json").read_text())
        assert counts["density_shape"] == [4, 4, 2]
        np.testing.assert_allclose(list(counts["counts"].values()), tensors["D"].sum(axis=(0, 1)), rtol=1e-6)

    def test_deterministic(self, work, predicted, tmp_path):
        image, out = predicted
        run("predict", "--config", TINY, "--checkpoint", work / "ft" / "model.ckpt", "--image", image, "--out", tmp_path)
        assert files_bytes(tmp_path) == files_bytes(out)

    def test_image_not_multiple_of_window(self, work, tmp_path):
        from countlab.datamodel import _read_png
        from countlab.synthdata import save_png

        image = sorted((work / "data" / "images").glob("*.png"))[1]
        big = np.concatenate([_read_png(image)] * 2, axis=1)[:50, :90]
        save_png(big, tmp_path / "odd.png")
        run("predict", "--config", TINY, "--checkpoint", work / "ft" / "model.ckpt", "--image", tmp_path / "odd.png",
            "--out", tmp_path / "o")
        tensors, _ = tensorio.load(tmp_path / "o" / "density.bin")
        assert tensors["D"].shape == (4, 7, 2)


class TestAblate:
    def test_one_row_per_strategy(self, work, tmp_path):
        cfg = variant(tmp_path, "abl", ("[finetune]\nepochs = 3", "[finetune]\nepochs = 1"))
        run("ablate", "--config", cfg, "--data", work / "data", "--out", tmp_path / "abl")
        with open(tmp_path / "abl" / "ablation.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["strategy"] for r in rows] == ["rats", "equal", "tdrop"]
        for r in rows:
            assert set(r) == {"strategy"} | REPORT_KEYS
            assert all(np.isfinite(float(r[k])) for k in REPORT_KEYS)

    def test_identical_initialisation_across_strategies(self):
        cfg = load_config(TINY)
        import dataclasses

        states = []
        for s in ("rats", "equal", "tdrop"):
            c = dataclasses.replace(cfg, agglomerate=dataclasses.replace(cfg.agglomerate, strategy=s))
            states.append(pl.build_student(c, 2).state_dict())
        for st in states[1:]:
            assert all(torch.equal(st[k], states[0][k]) for k in st)


class TestReproducibility:
    def test_full_run_identical_metrics(self, work, tmp_path):
        ag, ft, ev = tmp_path / "ag", tmp_path / "ft", tmp_path / "ev"
        run("agglomerate", "--config", TINY, "--data", work / "data", "--out", ag)
        assert (ag / "student.ckpt").read_bytes() == (work / "ag" / "student.ckpt").read_bytes()
        run("finetune", "--config", TINY, "--data", work / "data", "--checkpoint", ag / "student.ckpt", "--out", ft)
        assert (ft / "model.ckpt").read_bytes() == (work / "ft" / "model.ckpt").read_bytes()
        run("evaluate", "--config", TINY, "--data", work / "data", "--checkpoint", ft / "model.ckpt", "--out", ev)
        run("evaluate", "--config", TINY, "--data", work / "data", "--checkpoint", work / "ft" / "model.ckpt",
            "--out", tmp_path / "ev2")
        assert (ev / "metrics.json").read_bytes() == (tmp_path / "ev2" / "metrics.json").read_bytes()


class TestTeacherCache:
    def test_pretrained_readouts_cached(self, work, tmp_path, monkeypatch):
        monkeypatch.setenv(pl.CACHE_ENV, str(tmp_path / "cache"))
        cfg = load_config(variant(tmp_path, "pre", ("[teachers]\n", "[teachers]\npretrain_epochs = 1\n")))
        train, _ = pl.load_split(cfg, work / "data")
        heads = pl.build_heads(cfg)
        groups = pl.build_groups(cfg, train)
        first = pl.build_pool(cfg, heads, groups)
        cached = os.listdir(tmp_path / "cache")
        assert len(cached) == 1
        second = pl.build_pool(cfg, heads, groups)
        for a, b in zip(first.projectors, second.projectors):
            for p, q in zip(a.parameters(), b.parameters()):
                assert torch.equal(p, q)
