"""Open-vocabulary queries and segmentation metrics.

2D: each labeled pixel takes the query with the highest cosine. 3D select:
Gaussians whose language feature clears a cosine threshold for a query (and
prefer it over every other query) are rasterized alone; the covered pixels
form the predicted mask. Voxel protocol: both point sets are dropped into one
grid and per-voxel majority labels are compared.

mAcc in 2D is a localisation score: a query counts as a hit when its single
highest-scoring pixel falls inside the ground-truth region. In 3D it is the
per-class share of ground-truth voxels whose predicted majority matches.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import formats
from .diffcore import Tensor
from .gaussians import NeuralGaussianBatch
from .rasterizer import Camera, rasterize

__all__ = [
    "QuerySet",
    "cosine_scores",
    "query_2d",
    "miou_macc_masks",
    "miou_macc_2d",
    "query_3d_select",
    "render_selection",
    "voxel_eval_3d",
    "pca_rgb",
    "export_pointcloud",
    "metrics_csv",
    "sample_gaussian_points",
    "voxelize_gaussians",
    "evaluate_2d",
    "evaluate_3d_select",
    "evaluate_voxel",
    "transfer_gap",
]


@dataclass
class QuerySet:
    labels: list[str]
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.labels) != self.embeddings.shape[0]:
            raise ValueError("need one embedding row per label")
        if len(self.labels) == 0:
            raise ValueError("empty query set")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_table(cls, table) -> "QuerySet":
        return cls([f"class_{i}" for i in range(table.n_classes)], table.vectors)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def cosine_scores(features: np.ndarray, queries: QuerySet) -> np.ndarray:
    """Cosine of every feature row (any leading shape) against every query."""
    f = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if len(queries) == 0:
        raise ValueError("empty query set")
    return _unit(f) @ _unit(queries.embeddings).T


def query_2d(lang_map, valid, queries: QuerySet) -> np.ndarray:
    """Label map of query indices; ``-1`` outside ``valid``. Ties go to the lower index."""
    values = getattr(lang_map, "values", lang_map)
    values = values.data if isinstance(values, Tensor) else np.asarray(values)
    scores = cosine_scores(values, queries)
    labels = np.argmax(scores, axis=-1)
    valid = np.ones(labels.shape, bool) if valid is None else np.asarray(valid, bool)
    return np.where(valid, labels, -1)


def miou_macc_masks(pred: np.ndarray, gt: np.ndarray, scores: np.ndarray | None = None):
    """Core metric over per-query boolean masks of shape ``(Q, ...)``.

    Returns ``(miou, macc, per_query)`` where ``per_query`` holds
    ``(q, iou, hit)`` for every query with a nonempty ground-truth mask.
    ``scores`` (same shape) picks each query's peak pixel for mAcc; without
    it the peak is the first predicted pixel and an empty prediction misses.
    """
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    n_q = pred.shape[0]
    rows = []
    for q in range(n_q):
        g = gt[q].reshape(-1)
        if not g.any():
            continue
        p = pred[q].reshape(-1)
        iou = np.logical_and(p, g).sum() / np.logical_or(p, g).sum()
        if scores is None:
            hit = bool(p.any() and g[np.argmax(p)])
        else:
            s = np.asarray(scores[q], float).reshape(-1)
            hit = bool(g[np.argmax(s)])
        rows.append((q, float(iou), hit))
    if not rows:
        return float("nan"), float("nan"), rows
    return float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])), rows


def miou_macc_2d(pred: np.ndarray, gt: np.ndarray, n_queries: int, scores: np.ndarray | None = None):
    """``(mIoU, mAcc)`` for label maps of query indices (``-1`` = none).

    ``scores`` is an optional ``(..., Q)`` cosine volume used to locate each
    query's peak pixel.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    qs = np.arange(n_queries).reshape((-1,) + (1,) * pred.ndim)
    sc = None if scores is None else np.moveaxis(np.asarray(scores), -1, 0)
    miou, macc, _ = miou_macc_masks(pred[None] == qs, gt[None] == qs, sc)
    return miou, macc


def query_3d_select(lang3d, queries: QuerySet, query: int, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask of Gaussians whose cosine to ``query`` exceeds ``threshold``
    and is the largest among all queries (ties to the lower index)."""
    scores = cosine_scores(lang3d, queries)
    if scores.shape[0] == 0:
        return np.zeros(0, bool)
    return (np.argmax(scores, axis=1) == query) & (scores[:, query] > threshold)


def render_selection(batch: NeuralGaussianBatch, selected: np.ndarray, cam: Camera,
                     coverage_threshold: float = 0.5):
    """``(mask, coverage)``: only the selected Gaussians are composited."""
    idx = np.nonzero(np.asarray(selected, bool))[0]
    if len(idx) == 0:
        z = np.zeros((cam.height, cam.width))
        return z.astype(bool), z
    sub = batch.subset(idx)
    cov = rasterize(sub, cam, Tensor(np.ones((len(idx), 1)))).image.data[:, :, 0]
    return cov > coverage_threshold, cov


def _majority(keys: np.ndarray, labels: np.ndarray) -> dict[tuple, int]:
    """Most common label per voxel key; ties go to the smaller label."""
    if len(keys) == 0:
        return {}
    order = np.lexsort((labels, *keys.T[::-1]))
    keys, labels = keys[order], labels[order]
    out: dict[tuple, int] = {}
    start = 0
    n = len(keys)
    for i in range(1, n + 1):
        if i == n or not np.array_equal(keys[i], keys[start]):
            vals, counts = np.unique(labels[start:i], return_counts=True)
            out[tuple(keys[start])] = int(vals[np.argmax(counts)])
            start = i
    return out


def voxel_eval_3d(gt_points, gt_labels, pred_points, pred_labels, edge: float | None = None,
                  origin=None):
    """Voxel protocol ``(mIoU, mAcc)``.

    The grid origin defaults to the bounding-box minimum of both clouds
    together and ``edge`` to that box's diagonal over 64. For each class present
    in the ground truth, IoU counts voxels whose majority label is the class
    on either side; accuracy is the share of its ground-truth voxels whose
    predicted majority agrees. Both are averaged over those classes.
    """
    gp = np.asarray(gt_points, float).reshape(-1, 3)
    gl = np.asarray(gt_labels, int).reshape(-1)
    pp = np.asarray(pred_points, float).reshape(-1, 3)
    pl = np.asarray(pred_labels, int).reshape(-1)
    if len(gp) == 0:
        raise ValueError("empty ground-truth cloud")
    if len(gp) != len(gl) or len(pp) != len(pl):
        raise ValueError("one label per point is required")
    both = np.vstack([gp, pp])
    lo = both.min(axis=0) if origin is None else np.asarray(origin, float)
    if edge is None:
        diag = float(np.linalg.norm(both.max(axis=0) - lo))
        edge = diag / 64.0 if diag > 0 else 1.0
    if edge <= 0:
        raise ValueError("voxel edge must be positive")
    gmaj = _majority(np.floor((gp - lo) / edge).astype(np.int64), gl)
    pmaj = _majority(np.floor((pp - lo) / edge).astype(np.int64), pl)
    ious, accs = [], []
    for c in sorted(set(gmaj.values())):
        g = {k for k, v in gmaj.items() if v == c}
        p = {k for k, v in pmaj.items() if v == c}
        ious.append(len(g & p) / len(g | p))
        accs.append(len(g & p) / len(g))
    return float(np.mean(ious)), float(np.mean(accs))


def pca_rgb(features) -> np.ndarray:
    """Top three principal components scaled to ``[0, 1]`` per channel.

    Missing components (rank below three) and constant channels become 0.5.
    """
    x = np.asarray(getattr(features, "data", features), dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n = x.shape[0]
    if n < 3:
        raise ValueError("need at least three rows")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = max(n, x.shape[1]) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    out = np.full((n, 3), 0.5)
    for j in range(min(3, len(s))):
        if s[j] <= tol or s[j] == 0:
            continue
        comp = xc @ vt[j]
        lo, hi = comp.min(), comp.max()
        if hi > lo:
            out[:, j] = (comp - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def export_pointcloud(path, batch_or_points, colors) -> None:
    pts = batch_or_points.means.data if isinstance(batch_or_points, NeuralGaussianBatch) \
        else np.asarray(batch_or_points, float)
    formats.write_ply(path, pts, colors)


def metrics_csv(rows, labels: list[str], miou: float, macc: float) -> str:
    """``query,label,iou,acc_hit`` per query and a closing ``mean`` row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query", "label", "iou", "acc_hit"])
    for q, iou, hit in rows:
        w.writerow([q, labels[q], repr(float(iou)), repr(float(hit))])
    w.writerow(["mean", "all", repr(float(miou)), repr(float(macc))])
    return buf.getvalue()


def sample_gaussian_points(means, rotations, scales, weights, n_total: int,
                           rng: np.random.Generator, max_sigma: float = 2.0):
    """Points drawn from Gaussians (truncated at ``max_sigma``), counts
    proportional to ``weights``; returns ``(points, source index)``."""
    from .gaussians import quaternion_to_rotation

    means = np.asarray(means, float).reshape(-1, 3)
    w = np.clip(np.asarray(weights, float).reshape(-1), 0.0, None)
    if len(means) == 0 or w.sum() == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    counts = np.floor(n_total * w / w.sum()).astype(int)
    pts, src = [], []
    for i in np.nonzero(counts)[0]:
        z = rng.normal(size=(counts[i], 3))
        z = np.clip(z, -max_sigma, max_sigma)
        r = quaternion_to_rotation(rotations[i])
        pts.append(means[i] + (z * scales[i]) @ r.T)
        src.append(np.full(counts[i], i))
    return np.vstack(pts), np.concatenate(src)


def voxelize_gaussians(means, rotations, scales, opacities, labels, origin, edge: float,
                       shape, density_threshold: float = 0.5, chunk: int = 65536):
    """Occupied voxel centres and their labels for a labelled Gaussian set.

    Density at a centre is ``sum_i alpha_i exp(-d_i^T Sigma_i^-1 d_i / 2)``;
    the label is the class whose Gaussians contribute most (ties to the
    lower class id).
    """
    from .gaussians import build_covariance

    means = np.asarray(means, float).reshape(-1, 3)
    labels = np.asarray(labels, int).reshape(-1)
    origin = np.asarray(origin, float)
    nx, ny, nz = shape
    if len(means) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    classes = np.unique(labels)
    onehot = (labels[:, None] == classes[None, :]).astype(float) * np.asarray(opacities, float)[:, None]
    inv = np.array([np.linalg.inv(build_covariance(r, s)) for r, s in zip(rotations, scales)])
    idx = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), -1)
    centers = origin + (idx.reshape(-1, 3) + 0.5) * edge
    pts, labs = [], []
    for lo in range(0, len(centers), chunk):
        c = centers[lo:lo + chunk]
        d = c[:, None, :] - means[None, :, :]
        maha = np.einsum("pgi,gij,pgj->pg", d, inv, d)
        per_class = np.exp(-0.5 * maha) @ onehot
        occ = per_class.sum(axis=1) > density_threshold
        pts.append(c[occ])
        labs.append(classes[np.argmax(per_class[occ], axis=1)])
    return np.vstack(pts), np.concatenate(labs)


# ---------------------------------------------------------------------------
# model-level evaluation


def _lang_rows(model, features: np.ndarray) -> np.ndarray:
    lang, _ = model.language_rows(features.reshape(-1, features.shape[-1]))
    return lang.data.reshape(features.shape[:-1] + (lang.shape[-1],))


def evaluate_2d(model, pack, views=None):
    """Per-view 2D metrics over labeled pixels, averaged over views.

    Returns ``(miou, macc, per_query)`` with per-query IoU and hit rate also
    averaged over the views where the query's class is visible.
    """
    views = pack.test_views if views is None else views
    queries = QuerySet.from_table(pack.table)
    nq = len(queries)
    per_q: dict[int, list] = {}
    mious, maccs = [], []
    for v in views:
        feats = model.render(v.camera)[1].values.data
        lang = _lang_rows(model, feats)
        gt = pack.class_labels(v)
        valid = gt >= 0
        pred = query_2d(lang, valid, queries)
        scores = np.where(valid[..., None], cosine_scores(lang, queries), -np.inf)
        qs = np.arange(nq)[:, None, None]
        miou, macc, rows = miou_macc_masks(pred[None] == qs, gt[None] == qs,
                                           np.moveaxis(scores, -1, 0))
        if rows:
            mious.append(miou)
            maccs.append(macc)
        for q, iou, hit in rows:
            per_q.setdefault(q, []).append((iou, hit))
    rows = [(q, float(np.mean([r[0] for r in per_q[q]])), float(np.mean([r[1] for r in per_q[q]])))
            for q in sorted(per_q)]
    return float(np.mean(mious)), float(np.mean(maccs)), rows


def _reference_batch(model, pack) -> NeuralGaussianBatch:
    return model.spawn(pack.train_views[0].camera)


def evaluate_3d_select(model, pack, views=None, threshold: float = 0.5):
    """Select Gaussians per query in 3D, rasterize each selection, score per view.

    Per-Gaussian language features come straight from the instance features
    with no rendering; each view re-spawns so view-dependent opacity matches
    the 2D renders.
    """
    views = pack.test_views if views is None else views
    queries = QuerySet.from_table(pack.table)
    nq = len(queries)
    lang3d = None
    per_q: dict[int, list] = {}
    mious, maccs = [], []
    for v in views:
        batch = model.spawn(v.camera)
        if lang3d is None:
            lang3d = _lang_rows(model, batch.features.data)
        pred, cov = [], []
        for q in range(nq):
            m, c = render_selection(batch, query_3d_select(lang3d, queries, q, threshold), v.camera)
            pred.append(m)
            cov.append(c)
        gt = pack.class_labels(v)
        qs = np.arange(nq)[:, None, None]
        miou, macc, rows = miou_macc_masks(np.array(pred), gt[None] == qs, np.array(cov))
        if rows:
            mious.append(miou)
            maccs.append(macc)
        for q, iou, hit in rows:
            per_q.setdefault(q, []).append((iou, hit))
    rows = [(q, float(np.mean([r[0] for r in per_q[q]])), float(np.mean([r[1] for r in per_q[q]])))
            for q in sorted(per_q)]
    return float(np.mean(mious)), float(np.mean(maccs)), rows


def evaluate_voxel(model, pack, edge: float | None = None, density_threshold: float = 0.5,
                   min_opacity: float = 0.0):
    """Voxel protocol between the teacher and the model, both voxelized
    volume-aware on one lattice over the scene cube.

    Each voxel centre is occupied when the summed opacity-weighted density
    of a Gaussian set exceeds ``density_threshold`` and is labelled with the
    class contributing most. Model Gaussians take their best query's class;
    their view-dependent opacity and scale are averaged over the training
    cameras. ``edge`` defaults to the cube diagonal over 64.
    """
    if pack.scene is None:
        raise ValueError("the voxel protocol needs the teacher scene")
    b = pack.scene.bounds
    edge = 2.0 * b * np.sqrt(3.0) / 64.0 if edge is None else edge
    origin = np.full(3, -b)
    shape = tuple(int(np.ceil(2.0 * b / edge)) for _ in range(3))

    teacher = pack.scene.batch()
    t_lab = pack.class_of_instance[pack.scene.instance_of_gaussian()]
    gp, gl = voxelize_gaussians(teacher.means.data, teacher.rotations.data, teacher.scales.data,
                                teacher.opacities.data, t_lab, origin, edge, shape,
                                density_threshold)

    batches = [model.spawn(v.camera) for v in pack.train_views]
    base = batches[0]
    opacity = np.mean([x.opacities.data for x in batches], axis=0)
    scales = np.mean([x.scales.data for x in batches], axis=0)
    queries = QuerySet.from_table(pack.table)
    labels = np.argmax(cosine_scores(_lang_rows(model, base.features.data), queries), axis=1)
    keep = opacity >= min_opacity
    pp, pl = voxelize_gaussians(base.means.data[keep], base.rotations.data[keep], scales[keep],
                                opacity[keep], labels[keep], origin, edge, shape,
                                density_threshold)
    return voxel_eval_3d(gp, gl, pp, pl, edge, origin)


def transfer_gap(model, view) -> float:
    """Relative L2 gap between attend-then-render and render-then-attend on
    one view's covered pixels."""
    batch = model.spawn(view.camera)
    feats2d = model.render(view.camera)[1].values.data
    lang2d = _lang_rows(model, feats2d)
    lang3d = _lang_rows(model, batch.features.data)
    res = rasterize(batch, view.camera, Tensor(lang3d))
    covered = res.coverage > 0.5
    a = lang2d[covered]
    b = res.image.data[covered]
    den = np.linalg.norm(a)
    return float(np.linalg.norm(a - b) / den) if den > 0 else 0.0
