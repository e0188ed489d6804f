import csv
import io

import numpy as np
import pytest

from ovsplat import evalkit
from ovsplat.diffcore import Tensor
from ovsplat.evalkit import (QuerySet, metrics_csv, miou_macc_2d, pca_rgb, query_2d,
                             query_3d_select, voxel_eval_3d, voxelize_gaussians)
from ovsplat.rasterizer import FeatureMap


def queries(n=3, d=5):
    return QuerySet([f"q{i}" for i in range(n)], np.eye(n, d))


class TestQuery2D:
    def test_exact_rows(self, rng):
        q = queries()
        labels = rng.integers(0, 3, (4, 6))
        lang = q.embeddings[labels] * 2.0
        np.testing.assert_array_equal(query_2d(lang, None, q), labels)

    def test_single_query(self, rng):
        q = QuerySet(["only"], rng.normal(size=(1, 5)))
        valid = rng.uniform(size=(4, 4)) > 0.3
        out = query_2d(rng.normal(size=(4, 4, 5)), valid, q)
        np.testing.assert_array_equal(out, np.where(valid, 0, -1))

    def test_ties_to_lower(self):
        q = QuerySet(["a", "b"], np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert query_2d(np.array([[[1.0, 1.0]]]), None, q)[0, 0] == 0

    def test_bad_query_set(self):
        with pytest.raises(ValueError):
            QuerySet(["a"], np.zeros((2, 3)))


def counting_oracle(pred, gt, n):
    ious, accs = [], []
    for q in range(n):
        inter = union = g = 0
        first_hit = None
        for p_, g_ in zip(pred.reshape(-1), gt.reshape(-1)):
            inter += p_ == q and g_ == q
            union += p_ == q or g_ == q
            g += g_ == q
            if first_hit is None and p_ == q:
                first_hit = g_ == q
        if g:
            ious.append(inter / union)
            accs.append(bool(first_hit))
    return np.mean(ious), np.mean(accs)


class TestMiou2D:
    def test_perfect(self, rng):
        gt = rng.integers(0, 3, (5, 5))
        assert miou_macc_2d(gt, gt, 3) == (1.0, 1.0)

    def test_disjoint(self):
        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[1, 1], [0, 0]])
        assert miou_macc_2d(pred, gt, 2)[0] == 0.0

    def test_half_overlap(self):
        gt = np.zeros((4, 4), int)
        gt[:, 2:] = 1
        pred = gt.copy()
        pred[:2, 2:] = 0
        got = miou_macc_2d(pred, gt, 2)
        # class 0: 8 / 12, class 1: 4 / 8
        assert got[0] == pytest.approx((8 / 12 + 4 / 8) / 2)
        assert got == pytest.approx(counting_oracle(pred, gt, 2))

    def test_scores_pick_peak(self):
        gt = np.array([[0, 1]])
        pred = np.array([[1, 1]])
        scores = np.array([[[0.9, 0.1], [0.2, 0.8]]])
        _, macc = miou_macc_2d(pred, gt, 2, scores)
        assert macc == 1.0
        # without scores: query 0 predicts nothing, query 1 peaks on its first pixel (class 0)
        assert miou_macc_2d(pred, gt, 2)[1] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            miou_macc_2d(np.zeros((2, 2)), np.zeros((2, 3)), 2)


class TestSelect3D:
    def test_exact_features(self, rng):
        q = queries()
        cls = rng.integers(0, 3, 20)
        lang = q.embeddings[cls]
        for k in range(3):
            np.testing.assert_array_equal(query_3d_select(lang, q, k), cls == k)
            assert not query_3d_select(lang, q, k, threshold=1.0 + 1e-9).any()


class TestVoxel:
    def cube(self, offset, n=4):
        g = np.arange(n) + 0.5
        return np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) + offset

    def test_perfect(self, rng):
        pts = rng.uniform(0, 1, (200, 3))
        lab = rng.integers(0, 3, 200)
        assert voxel_eval_3d(pts, lab, pts, lab, edge=0.1) == (1.0, 1.0)

    def test_shuffled_is_worse(self, rng):
        pts = rng.uniform(0, 1, (300, 3))
        lab = rng.integers(0, 2, 300)
        assert voxel_eval_3d(pts, lab, pts, rng.permutation(lab), edge=0.05)[0] < 1.0

    def test_cube_pair_with_enumeration_oracle(self):
        a, b = self.cube(0.0), self.cube(10.0)
        gt_pts, gt_lab = np.vstack([a, b]), np.r_[np.zeros(64, int), np.ones(64, int)]
        pred_lab = np.zeros(128, int)  # second cube mislabeled
        got = voxel_eval_3d(gt_pts, gt_lab, gt_pts, pred_lab, edge=1.0, origin=[0, 0, 0])
        assert got == (0.25, 0.5)
        # explicit enumeration over the grid
        g, p = {}, {}
        for pts, lab, out in ((gt_pts, gt_lab, g), (gt_pts, pred_lab, p)):
            for x, label in zip(pts, lab):
                out[tuple(np.floor(x).astype(int))] = int(label)
        ious = []
        accs = []
        for c in (0, 1):
            gs = {k for k, v in g.items() if v == c}
            ps = {k for k, v in p.items() if v == c}
            ious.append(len(gs & ps) / len(gs | ps))
            accs.append(len(gs & ps) / len(gs))
        assert got == (np.mean(ious), np.mean(accs))

    def test_empty_gt(self):
        with pytest.raises(ValueError):
            voxel_eval_3d(np.zeros((0, 3)), [], np.zeros((1, 3)), [0])

    def test_voxelize_single_gaussian(self):
        s = 0.3
        pts, lab = voxelize_gaussians([[0.0, 0.0, 0.0]], [[1, 0, 0, 0]], [[s, s, s]], [1.0], [4],
                                      origin=[-1, -1, -1], edge=0.1, shape=(20, 20, 20))
        r = np.linalg.norm(pts, axis=1)
        assert np.all(r < s * np.sqrt(2 * np.log(2)))
        assert np.all(lab == 4)
        g = (np.arange(20) + 0.5) * 0.1 - 1
        cen = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        assert len(pts) == int((np.linalg.norm(cen, axis=1) < s * np.sqrt(2 * np.log(2))).sum())


class TestPca:
    def test_orthogonal_axes(self):
        x = np.vstack([np.eye(3) * 3, -np.eye(3) * 3])
        out = pca_rgb(x)
        assert out.min() == 0.0 and out.max() == 1.0
        # each channel separates one axis pair: values are 0, 0.5 or 1
        assert set(np.round(out, 12).ravel()) <= {0.0, 0.5, 1.0}

    def test_constant(self):
        np.testing.assert_array_equal(pca_rgb(np.ones((5, 4))), 0.5)

    def test_range(self, rng):
        out = pca_rgb(rng.normal(size=(50, 8)) * 100)
        assert out.min() >= 0 and out.max() <= 1


def test_metrics_csv():
    text = metrics_csv([(0, 0.5, True), (2, 0.25, False)], ["a", "b", "c"], 0.375, 0.5)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["query", "label", "iou", "acc_hit"]
    assert rows[1] == ["0", "a", "0.5", "1.0"] and rows[2] == ["2", "c", "0.25", "0.0"]
    assert rows[-1] == ["mean", "all", "0.375", "0.5"]


class OracleModel:
    """Renders the ground-truth class as a one-hot map and lifts it to the class embedding."""

    def __init__(self, pack):
        self.pack = pack
        self.by_cam = {id(v.camera): v for v in pack.views}

    def render(self, cam):
        v = self.by_cam[id(cam)]
        cls = self.pack.class_labels(v)
        onehot = np.zeros(cls.shape + (self.pack.table.n_classes,))
        ok = cls >= 0
        onehot[ok, cls[ok]] = 1.0
        return None, FeatureMap(Tensor(onehot), "instance"), None

    def language_rows(self, feats):
        return Tensor(np.asarray(feats) @ self.pack.table.vectors), None


def test_perfect_oracle_model(tiny_pack):
    miou, macc, rows = evalkit.evaluate_2d(OracleModel(tiny_pack), tiny_pack, tiny_pack.views)
    assert (miou, macc) == (1.0, 1.0)
    assert all(r[1] == 1.0 for r in rows)


def test_transfer_gap_is_finite(tiny_pack, tiny_stage2):
    gap = evalkit.transfer_gap(tiny_stage2[0], tiny_pack.test_views[0])
    assert np.isfinite(gap) and gap >= 0
