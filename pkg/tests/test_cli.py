import csv
import json

import numpy as np
import pytest

from ovsplat import gradcheck
from ovsplat.cli import main
from ovsplat.diffcore import Parameter
from ovsplat.evalkit import QuerySet, evaluate_2d, evaluate_3d_select, metrics_csv
from ovsplat.synthscene import UNLABELED, load_pack
from ovsplat.trainer import load_checkpoint

TINY_SCENE = ["--n_instances", "3", "--n_classes", "3", "--n_views", "4", "--n_test_views", "1",
              "--image_size", "24", "--focal", "32", "--d_lang", "8"]
TINY_MODEL = ["--anchors_per_axis", "3", "--d_feature", "8", "--d_ins", "8", "--hidden", "16",
              "--lift_hidden", "16", "--n_codes", "4", "--pixel_budget", "32", "--d_lang", "8"]


def run(*argv):
    return main(["--quiet", *map(str, argv)])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "scene", *TINY_SCENE) == 0
    assert run("train1", "--scene", root / "scene", "--out", root / "t1", "--iters", 10,
               *TINY_MODEL) == 0
    assert run("train2", "--scene", root / "scene", "--ckpt", root / "t1" / "stage1.gala",
               "--out", root / "t2", "--iters", 10) == 0
    return root


def files_except_manifest(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


class TestSynth:
    def test_twice_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--seed", 7, "--out", tmp_path / name, *TINY_SCENE) == 0
        a, b = files_except_manifest(tmp_path / "a"), files_except_manifest(tmp_path / "b")
        assert a == b and len(a) > 3

    def test_missing_parent(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path / "no" / "such") == 1
        assert "does not exist" in capsys.readouterr().err

    def test_refuses_non_empty(self, tmp_path):
        (tmp_path / "s").mkdir()
        (tmp_path / "s" / "junk").write_text("x")
        assert run("synth", "--out", tmp_path / "s", *TINY_SCENE) == 1
        assert run("synth", "--out", tmp_path / "s", "--force", *TINY_SCENE) == 0

    def test_default_layout(self, tmp_path):
        assert run("synth", "--out", tmp_path / "d") == 0
        d = tmp_path / "d"
        assert len(list(d.glob("view_*.ppm"))) == 12
        assert len(list(d.glob("view_*.mask"))) == 12
        assert len(list(d.glob("heldout_*.ppm"))) == 2
        header = (d / "view_000.ppm").read_bytes()[:12]
        assert header.startswith(b"P6\n64 64\n")
        ids = set()
        for m in d.glob("*.mask"):
            raw = np.frombuffer(m.read_bytes(), np.uint8)
            assert raw.size == 64 * 64
            ids |= set(raw.tolist()) - {UNLABELED}
        assert ids == set(range(8))
        scene = json.loads((d / "scene.json").read_text())
        assert scene["format"] == "ovsplat-scene"

    def test_manifest_written(self, tmp_path):
        assert run("synth", "--out", tmp_path / "m", "--seed", 3, *TINY_SCENE) == 0
        man = json.loads((tmp_path / "m" / "manifest.json").read_text())
        assert man["command"] == "synth" and man["seed"] == 3
        assert man["scene_config"]["n_instances"] == 3
        assert man["version"] and man["started"]

    def test_env_default_out(self, tmp_path, monkeypatch):
        monkeypatch.setenv("OVSPLAT_OUT", str(tmp_path))
        assert run("synth", *TINY_SCENE) == 0
        assert (tmp_path / "scene" / "scene.json").exists()

    def test_config_file_and_override(self, tmp_path):
        (tmp_path / "c.cfg").write_text("n_instances = 4\nn_classes = 2\n")
        assert run("synth", "--config", tmp_path / "c.cfg", "--out", tmp_path / "s",
                   *TINY_SCENE[4:], "--n_classes=3") == 0
        pack = load_pack(tmp_path / "s")
        assert len(pack.scene.instances) == 4 and pack.table.n_classes == 3


class TestTraining:
    def test_stage1_csv(self, pipeline):
        rows = list(csv.reader((pipeline / "t1" / "losses_stage1.csv").open()))
        assert rows[0] == ["step", "L_RGB", "L_ins", "L_lang", "L_entropy", "total"]
        assert len(rows) == 11
        assert json.loads((pipeline / "t1" / "manifest.json").read_text())["outputs"]

    def test_stage2_csv(self, pipeline):
        rows = list(csv.reader((pipeline / "t2" / "losses_stage2.csv").open()))
        assert len(rows) == 11
        assert load_checkpoint(pipeline / "t2" / "stage2.gala").stage == 2

    def test_stage2_needs_stage1_checkpoint(self, pipeline, tmp_path, capsys):
        assert run("train2", "--scene", pipeline / "scene", "--out", tmp_path / "x") == 1
        assert run("train2", "--scene", pipeline / "scene", "--ckpt", tmp_path / "none.gala",
                   "--out", tmp_path / "x") == 1
        assert run("train2", "--scene", pipeline / "scene", "--ckpt",
                   pipeline / "scene" / "scene.json", "--out", tmp_path / "x") == 2
        assert "corrupt checkpoint" in capsys.readouterr().err

    def test_eval_needs_stage2(self, pipeline, tmp_path):
        assert run("eval2d", "--scene", pipeline / "scene", "--ckpt", pipeline / "t1" / "stage1.gala",
                   "--out", tmp_path / "e") == 1

    def test_unknown_key(self, pipeline, tmp_path, capsys):
        assert run("train1", "--scene", pipeline / "scene", "--out", tmp_path / "u", "--bogus", 3) == 1
        assert "bogus" in capsys.readouterr().err


class TestEval:
    def test_eval2d_matches_library(self, pipeline, tmp_path):
        assert run("eval2d", "--scene", pipeline / "scene", "--ckpt", pipeline / "t2" / "stage2.gala",
                   "--out", tmp_path / "e") == 0
        pack = load_pack(pipeline / "scene")
        model = load_checkpoint(pipeline / "t2" / "stage2.gala")
        miou, macc, rows = evaluate_2d(model, pack)
        expected = metrics_csv(rows, QuerySet.from_table(pack.table).labels, miou, macc)
        assert (tmp_path / "e" / "metrics.csv").read_text() == expected
        assert (tmp_path / "e" / "labels_000.ppm").exists()

    def test_eval3d_select_matches_library(self, pipeline, tmp_path):
        assert run("eval3d-select", "--scene", pipeline / "scene", "--ckpt",
                   pipeline / "t2" / "stage2.gala", "--out", tmp_path / "e", "--views", "all") == 0
        pack = load_pack(pipeline / "scene")
        model = load_checkpoint(pipeline / "t2" / "stage2.gala")
        miou, macc, rows = evaluate_3d_select(model, pack, pack.views)
        expected = metrics_csv(rows, QuerySet.from_table(pack.table).labels, miou, macc)
        assert (tmp_path / "e" / "metrics.csv").read_text() == expected

    def test_voxel_writes_pointcloud(self, pipeline, tmp_path):
        assert run("eval3d-voxel", "--scene", pipeline / "scene", "--ckpt",
                   pipeline / "t2" / "stage2.gala", "--out", tmp_path / "v") == 0
        text = (tmp_path / "v" / "metrics.csv").read_text().splitlines()
        assert text[0] == "query,label,iou,acc_hit" and text[-1].startswith("mean,all,")
        assert (tmp_path / "v" / "gaussians.ply").read_text().startswith("ply\n")

    def test_unknown_mode(self, pipeline, tmp_path, capsys):
        assert run("eval2d", "--scene", pipeline / "scene", "--ckpt", pipeline / "t2" / "stage2.gala",
                   "--out", tmp_path / "e", "--views", "bogus") == 1
        assert "invalid choice" in capsys.readouterr().err

    def test_render(self, pipeline, tmp_path):
        assert run("render", "--scene", pipeline / "scene", "--ckpt", pipeline / "t1" / "stage1.gala",
                   "--out", tmp_path / "r") == 0
        for name in ("color_000.ppm", "instance_000.ppm", "alpha_000.pgm"):
            assert (tmp_path / "r" / name).exists()

    def test_ablate_guidance(self, pipeline, tmp_path):
        assert run("ablate", "guidance", "--scene", pipeline / "scene", "--ckpt",
                   pipeline / "t1" / "stage1.gala", "--out", tmp_path / "a", "--iters2", 5) == 0
        rows = list(csv.DictReader((tmp_path / "a" / "ablation_guidance.csv").open()))
        assert len(rows) == 2
        assert {"config", "miou", "macc"} <= set(rows[0])


class TestMisc:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_no_subcommand(self, capsys):
        assert main([]) == 1

    def test_threads_flag_positions(self, tmp_path):
        assert main(["--threads", "1", "--quiet", "synth", "--out", str(tmp_path / "a"), *TINY_SCENE]) == 0
        assert main(["synth", "--threads", "1", "--quiet", "--out", str(tmp_path / "b"), *TINY_SCENE]) == 0


def broken_square(rng):
    x = Parameter(rng.uniform(1, 2, 3))
    from ovsplat import diffcore as dc

    return (lambda: dc.primitive("broken", (x,), x.data ** 2, lambda g: (g * x.data,)).sum()), [x]


class TestGradcheckCommand:
    def test_broken_op_named(self, monkeypatch, capsys):
        keep = [c for c in gradcheck.REGISTRY if c.name in ("exp", "matmul")]
        monkeypatch.setattr(gradcheck, "REGISTRY", keep + [gradcheck.GradCheck("broken_square", broken_square)])
        assert main(["gradcheck", "--seeds", "2"]) == 1
        out = capsys.readouterr()
        assert "broken_square" in out.err
        lines = out.out.strip().splitlines()
        assert [ln.split()[1] for ln in lines] == ["exp", "matmul", "broken_square"]

    def test_passing_subset(self, monkeypatch, capsys):
        keep = [c for c in gradcheck.REGISTRY if c.name in ("exp", "softmax_rows", "entropy")]
        monkeypatch.setattr(gradcheck, "REGISTRY", keep)
        assert main(["gradcheck", "--seeds", "2"]) == 0
        names = [ln.split()[1] for ln in capsys.readouterr().out.strip().splitlines()]
        assert sorted(names) == sorted(set(names)) == ["entropy", "exp", "softmax_rows"]
