import dataclasses

import numpy as np
import pytest

from ovsplat.synthscene import (ClassEmbeddingTable, TeacherInstance, TeacherScene, View,
                                camera_rig, make_masks_and_language)
from ovsplat.trainer import (LOSS_COLUMNS, CheckpointError, SceneModel, TrainingDiverged,
                             checkpoint_bytes, load_checkpoint, psnr, save_checkpoint,
                             train_stage1, train_stage2)
from ovsplat.evalkit import evaluate_2d

from conftest import TINY_TRAIN


def white_blob_pack():
    inst = TeacherInstance(0, 0, np.zeros(3), np.ones(3), np.zeros((1, 3)),
                           np.array([[1.0, 0, 0, 0]]), np.full((1, 3), 0.3), np.array([1.0]))
    cams = camera_rig(4, 24, 30.0, 4.0, 20.0)
    return make_masks_and_language(TeacherScene([inst], 1.0, 0.3), cams,
                                   ClassEmbeddingTable(np.eye(1, 8)))


def small_config(**kw):
    return dataclasses.replace(TINY_TRAIN, d_lang=8, **kw)


class TestStage1:
    def test_reconstructs_single_blob(self):
        pack = white_blob_pack()
        cfg = small_config(iters1=300, lambda_ins=0.0)
        model, log = train_stage1(pack, cfg)
        assert np.all(np.isnan(log.column("L_ins")))
        for v in pack.views:
            assert psnr(model.render(v.camera)[0].values.numpy(), v.image) >= 30.0

    def test_loss_trend(self, tiny_stage1):
        rgb = tiny_stage1[1].column("L_RGB")
        assert rgb[-5:].mean() < rgb[:5].mean()

    def test_log_shape(self, tiny_stage1):
        log = tiny_stage1[1]
        assert len(log.rows) == TINY_TRAIN.iters1
        text = log.to_csv().splitlines()
        assert text[0] == ",".join(LOSS_COLUMNS) and len(text) == TINY_TRAIN.iters1 + 1

    def test_deterministic(self, tiny_pack, tiny_stage1):
        _, log = train_stage1(tiny_pack, TINY_TRAIN)
        assert log.column("total")[-1] == tiny_stage1[1].column("total")[-1]
        assert log.to_csv() == tiny_stage1[1].to_csv()

    def test_divergence_is_reported(self, tiny_pack):
        bad = dataclasses.replace(tiny_pack, views=[
            View(v.camera, np.full_like(v.image, np.nan), v.labels) for v in tiny_pack.train_views])
        with pytest.raises(TrainingDiverged), np.errstate(invalid="ignore"):
            train_stage1(bad, dataclasses.replace(TINY_TRAIN, iters1=2))


class TestStage2:
    def test_needs_stage1(self, tiny_pack):
        with pytest.raises(ValueError):
            train_stage2(SceneModel(TINY_TRAIN), tiny_pack)

    def test_freezes_stage1(self, tiny_pack, tiny_stage1):
        before = {k: p.data.copy() for k, p in tiny_stage1[0].named_parameters().items()
                  if k.startswith(("anchor.", "decoder."))}
        model = tiny_stage1[0].fork()
        train_stage2(model, tiny_pack)
        for k, v in before.items():
            np.testing.assert_array_equal(model.named_parameters()[k].data, v)
            np.testing.assert_array_equal(tiny_stage1[0].named_parameters()[k].data, v)
        assert model.stage == 2

    def test_entropy_logged(self, tiny_stage2):
        log = tiny_stage2[1]
        ent = log.column("L_entropy")
        assert np.all(np.isfinite(ent)) and np.all(ent >= 0)
        np.testing.assert_allclose(log.column("total"),
                                   log.column("L_lang") + TINY_TRAIN.lambda_ent * ent, rtol=1e-12)

    def test_fork_keeps_geometry(self, tiny_stage1):
        with pytest.raises(ValueError):
            tiny_stage1[0].fork(d_ins=4)
        child = tiny_stage1[0].fork(n_codes=2, lambda_ent=0.0)
        assert child.codebooks.n_codes == 2 and child.stage == 1


class TestCheckpoint:
    def test_round_trip_bytes(self, tiny_stage2, tmp_path):
        model = tiny_stage2[0]
        save_checkpoint(model, tmp_path / "a.gala")
        back = load_checkpoint(tmp_path / "a.gala")
        save_checkpoint(back, tmp_path / "b.gala")
        assert (tmp_path / "a.gala").read_bytes() == (tmp_path / "b.gala").read_bytes()
        assert back.stage == 2 and back.cfg == model.cfg

    def test_truncated(self, tiny_stage1, tmp_path):
        raw = checkpoint_bytes(tiny_stage1[0])
        for cut in (3, 20, len(raw) // 2, len(raw) - 1):
            (tmp_path / "t.gala").write_bytes(raw[:cut])
            with pytest.raises(CheckpointError, match="corrupt"):
                load_checkpoint(tmp_path / "t.gala")

    def test_bit_flip(self, tiny_stage1, tmp_path):
        raw = bytearray(checkpoint_bytes(tiny_stage1[0]))
        raw[len(raw) // 2] ^= 0x10
        (tmp_path / "f.gala").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "f.gala")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.gala")

    def test_loaded_model_evaluates_identically(self, tiny_pack, tiny_stage2, tmp_path):
        save_checkpoint(tiny_stage2[0], tmp_path / "m.gala")
        back = load_checkpoint(tmp_path / "m.gala")
        assert evaluate_2d(back, tiny_pack) == evaluate_2d(tiny_stage2[0], tiny_pack)

    def test_resume_keeps_adam_state(self, tiny_stage1, tmp_path):
        save_checkpoint(tiny_stage1[0], tmp_path / "s.gala")
        back = load_checkpoint(tmp_path / "s.gala")
        for k, p in tiny_stage1[0].named_parameters().items():
            q = back.named_parameters()[k]
            np.testing.assert_array_equal(p.m, q.m)
            np.testing.assert_array_equal(p.v, q.v)
            assert p.step == q.step


def test_psnr():
    assert psnr(np.zeros(4), np.zeros(4)) == float("inf")
    assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)
