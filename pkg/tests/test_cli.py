import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image, ImageDraw

from rgbd_fusion.cli import main
from rgbd_fusion.dataset import CLASS_NAMES, load_coco
from rgbd_fusion.fusion import read_rgbd

TINY_TOML = """
[arch]
widths = [8, 8, 8]
strides = [2, 2, 2]
anchor_scales = [8.0, 16.0]
rpn_channels = 8
head_hidden = 16
roi_size = 4
"""


def tree_hashes(root: Path):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("synth", "--n", 8, "--seed", 1, "--out", d, "--width", 64, "--height", 48) == 0
    assert run("project", "--calib", d / "calib.json", "--clouds", d / "cloud", "--out", d / "depth") == 0
    assert run("pack", "--rgb", d / "rgb", "--depth", d / "depth", "--stats", d / "depth" / "depth_stats.json", "--out", d / "rgbd") == 0
    assert run("split", "--coco", d / "annotations.json", "--counts", "4,2,2", "--seed", 0) == 0
    return d


@pytest.fixture(scope="module")
def runs(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    cfg = out / "cfg.toml"
    cfg.write_text(TINY_TOML)
    assert run("train", "--config", cfg, "--data", data, "--out", out, "--max-epochs", 2, "--runs", 1, "--variant", "all") == 0
    return out


class TestSynth:
    def test_layout(self, data):
        assert len(list((data / "rgb").glob("*.png"))) == 8
        manifest = json.loads((data / "manifest.json").read_text())
        coco = json.loads((data / "annotations.json").read_text())
        assert sum(len(s["objects"]) for s in manifest["scenes"]) == len(coco["annotations"])

    def test_same_seed_same_tree(self, data, tmp_path):
        assert run("synth", "--n", 8, "--seed", 1, "--out", tmp_path, "--width", 64, "--height", 48) == 0
        ref = {k: v for k, v in tree_hashes(data).items() if k.split("/")[0] in ("rgb", "cloud") or "/" not in k and k != "split.json"}
        assert tree_hashes(tmp_path) == ref

    def test_zero(self, tmp_path):
        assert run("synth", "--n", 0, "--out", tmp_path) == 0
        coco = json.loads((tmp_path / "annotations.json").read_text())
        assert coco["images"] == [] and coco["annotations"] == [] and len(coco["categories"]) == 9
        assert len(load_coco(tmp_path / "annotations.json")) == 0

    def test_negative(self, tmp_path):
        assert run("synth", "--n", -1, "--out", tmp_path) == 2


class TestProjectPack:
    def test_one_map_per_cloud(self, data):
        assert sorted(p.stem for p in (data / "depth").glob("*.png")) == sorted(p.stem for p in (data / "cloud").iterdir())

    def test_missing_calib(self, data, tmp_path):
        assert run("project", "--calib", tmp_path / "nope.json", "--clouds", data / "cloud", "--out", tmp_path) == 2

    def test_pack_readback(self, data):
        img = read_rgbd(data / "rgbd" / "000000.png")
        with Image.open(data / "rgb" / "000000.png") as im:
            assert np.array_equal(img.rgb, np.array(im))
        assert img.depth.max() > 0

    def test_pack_deterministic(self, data, tmp_path):
        assert run("pack", "--rgb", data / "rgb", "--depth", data / "depth", "--stats", data / "depth" / "depth_stats.json", "--out", tmp_path) == 0
        assert tree_hashes(tmp_path) == tree_hashes(data / "rgbd")

    def test_dimension_mismatch(self, data, tmp_path):
        shutil.copytree(data / "rgb", tmp_path / "rgb")
        Image.fromarray(np.zeros((10, 10, 3), np.uint8)).save(tmp_path / "rgb" / "000000.png")
        code = run("pack", "--rgb", tmp_path / "rgb", "--depth", data / "depth", "--stats", data / "depth" / "depth_stats.json", "--out", tmp_path / "o")
        assert code == 2


class TestSplit:
    def test_counts(self, data):
        split = json.loads((data / "split.json").read_text())
        assert [len(split[k]) for k in ("train", "val", "test")] == [4, 2, 2]

    def test_mismatch(self, data, tmp_path):
        assert run("split", "--coco", data / "annotations.json", "--counts", "4,2,1", "--out", tmp_path / "s.json") == 2
        assert run("split", "--coco", data / "annotations.json", "--counts", "a,b", "--out", tmp_path / "s.json") == 2

    def test_deterministic(self, data, tmp_path):
        for name in ("a", "b"):
            assert run("split", "--coco", data / "annotations.json", "--counts", "4,2,2", "--seed", 0, "--out", tmp_path / name) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes() == (data / "split.json").read_bytes()

    def test_default_counts(self, tmp_path):
        assert run("synth", "--n", 301, "--out", tmp_path, "--width", 32, "--height", 24) == 0
        assert run("split", "--coco", tmp_path / "annotations.json", "--seed", 3) == 0
        split = json.loads((tmp_path / "split.json").read_text())
        assert [len(split[k]) for k in ("train", "val", "test")] == [226, 45, 30]


class TestTrainEval:
    def test_outputs(self, runs):
        for v in ("rgb", "depth", "rgbd"):
            rdir = runs / v / "run_00"
            assert (rdir / "checkpoint.ckpt").is_file() and (rdir / "history.csv").is_file()
            assert json.loads((runs / v / "aggregate.json").read_text())["n_runs"] == 1
        assert (runs / "channel_stats.json").is_file()

    def test_early_stop_terminates(self, data, tmp_path):
        (tmp_path / "cfg.toml").write_text(TINY_TOML)
        assert run("train", "--config", tmp_path / "cfg.toml", "--data", data, "--out", tmp_path, "--variant", "depth",
                   "--patience", 1, "--max-epochs", 40) == 0
        hist = json.loads((tmp_path / "depth" / "run_00" / "history.json").read_text())
        assert len(hist["epochs"]) < 40 and hist["best_epoch"] == len(hist["epochs"]) - 1

    def test_eval_twice_identical(self, data, runs, tmp_path):
        ck = runs / "rgbd" / "run_00" / "checkpoint.ckpt"
        for name in ("a", "b"):
            assert run("eval", "--checkpoint", ck, "--data", data, "--out", tmp_path / f"{name}.json",
                       "--detections-out", tmp_path / f"{name}_det.json") == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a_det.json").read_bytes() == (tmp_path / "b_det.json").read_bytes()
        assert json.loads((tmp_path / "a.json").read_text())["num_images"] == 2

    def test_bad_variant(self, data, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("train", "--data", data, "--out", tmp_path, "--variant", "thermal")
        assert exc.value.code == 2

    def test_missing_checkpoint(self, data, tmp_path):
        assert run("eval", "--checkpoint", tmp_path / "x.ckpt", "--data", data) == 2

    def test_corrupt_checkpoint(self, data, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"RGBDCKPT" + b"\0" * 64)
        assert run("eval", "--checkpoint", tmp_path / "x.ckpt", "--data", data) == 1


class TestReport:
    def test_published_values(self, tmp_path, capsys):
        doc = {"depth": {"map_50": 0.269, "mean_precision": 0.301}, "rgb": {"map_50": 0.425, "mean_precision": 0.424},
               "rgbd": {"map_50": 0.480, "mean_precision": 0.474}}
        (tmp_path / "agg.json").write_text(json.dumps(doc))
        assert run("report", "--aggregates", tmp_path / "agg.json", "--out", tmp_path) == 0
        md = capsys.readouterr().out
        assert "| RGB-D vs RGB-only | +12.9 | +11.8 |" in md and "| RGB-D vs Depth-only | +78.4 | +57.5 |" in md

    def test_runs_dir(self, tmp_path):
        for v, vals in (("rgb", (0.4, 0.6)), ("rgbd", (0.5, 0.7))):
            for i, m in enumerate(vals):
                d = tmp_path / v / f"run_{i:02d}"
                d.mkdir(parents=True)
                (d / "test_metrics.json").write_text(json.dumps({"map_50": m, "mean_precision": m}))
        assert run("report", "--runs-dir", tmp_path) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["rows"][0]["map_50"] == pytest.approx(0.5) and rep["rows"][0]["map_50_std"] == pytest.approx(0.1)
        assert rep["deltas"][0]["map_50"] == 20.0

    def test_zero_baseline(self, tmp_path):
        (tmp_path / "agg.json").write_text(json.dumps({"rgb": {"map_50": 0.0, "mean_precision": 0.1},
                                                      "rgbd": {"map_50": 0.2, "mean_precision": 0.2}}))
        assert run("report", "--aggregates", tmp_path / "agg.json", "--out", tmp_path) == 1


class TestOverlay:
    def image(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "img.png"
        Image.fromarray(rng.integers(0, 256, (60, 80, 3), dtype=np.uint8)).save(p)
        return p

    def test_empty_is_copy(self, tmp_path):
        img = self.image(tmp_path)
        (tmp_path / "d.json").write_text("[]")
        assert run("overlay", "--image", img, "--detections", tmp_path / "d.json", "--out", tmp_path / "o.png") == 0
        assert (tmp_path / "o.png").read_bytes() == img.read_bytes()

    def test_diff_confined_to_box_and_label(self, tmp_path):
        img = self.image(tmp_path)
        det = {"image_id": 1, "category_id": 2, "bbox": [10.2, 12.0, 40.0, 30.0], "score": 0.87}
        (tmp_path / "d.json").write_text(json.dumps([det]))
        assert run("overlay", "--image", img, "--detections", tmp_path / "d.json", "--out", tmp_path / "o.png") == 0
        before = np.array(Image.open(img))
        after = np.array(Image.open(tmp_path / "o.png"))
        changed = (before != after).any(axis=2)
        assert changed.any()

        x0, y0, x1, y1 = 10, 12, 50, 42
        mask = np.zeros_like(changed)
        mask[y0, x0:x1 + 1] = mask[y1, x0:x1 + 1] = True
        mask[y0:y1 + 1, x0] = mask[y0:y1 + 1, x1] = True
        tb = ImageDraw.Draw(Image.new("RGB", (80, 60))).textbbox((x0 + 2, y0 + 1), f"{CLASS_NAMES[1]} 0.87")
        mask[tb[1]:tb[3] + 1, tb[0]:tb[2] + 1] = True
        assert not (changed & ~mask).any()

    def test_min_score_filters(self, tmp_path):
        img = self.image(tmp_path)
        (tmp_path / "d.json").write_text(json.dumps([{"image_id": 1, "category_id": 1, "bbox": [1, 1, 5, 5], "score": 0.1}]))
        assert run("overlay", "--image", img, "--detections", tmp_path / "d.json", "--min-score", 0.5, "--out", tmp_path / "o.png") == 0
        assert (tmp_path / "o.png").read_bytes() == img.read_bytes()

    def test_bad_detections(self, tmp_path):
        img = self.image(tmp_path)
        (tmp_path / "d.json").write_text("{}")
        assert run("overlay", "--image", img, "--detections", tmp_path / "d.json", "--out", tmp_path / "o.png") == 2


class TestPrune:
    def test_prune(self, tmp_path, capsys):
        (tmp_path / "p.csv").write_text("pair_id,translation_error_m,rotation_error_deg\na,0.001,1\nb,0.01,1\nc,0.002,2\n")
        assert run("prune", "--pairs", tmp_path / "p.csv") == 0
        assert [l.split(",")[0] for l in capsys.readouterr().out.splitlines()] == ["a", "c"]
