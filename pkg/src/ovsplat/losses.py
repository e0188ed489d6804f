"""Training objectives for both stages."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "SSIM_WINDOW",
    "SSIM_SIGMA",
    "ssim",
    "photometric_loss",
    "masks_from_labels",
    "instance_contrastive_loss",
    "cosine_rows",
    "language_cosine_loss",
    "stage1_total",
    "stage2_total",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


@lru_cache(maxsize=32)
def _blur_matrix(n: int) -> np.ndarray:
    """Valid-mode 1-D Gaussian filter as an ``(n - 10, n)`` matrix."""
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    k /= k.sum()
    out = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(out.shape[0]):
        out[i, i:i + SSIM_WINDOW] = k
    out.flags.writeable = False
    return out


def _ssim_terms(mu_a, mu_b, var_a, var_b, cov_ab) -> Tensor:
    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov_ab + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return num / den


def ssim(a, b) -> Tensor:
    """Mean SSIM of two ``H x W x C`` images with dynamic range 1.

    An 11x11 Gaussian window (sigma 1.5) is applied in valid mode; images
    smaller than the window fall back to whole-image statistics per channel.
    """
    a = dc.as_tensor(getattr(a, "values", a))
    b = dc.as_tensor(getattr(b, "values", b))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    a = dc.transpose(a, (2, 0, 1))
    b = dc.transpose(b, (2, 0, 1))
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        mu_a = a.mean(axis=(1, 2))
        mu_b = b.mean(axis=(1, 2))
        var_a = (a * a).mean(axis=(1, 2)) - mu_a * mu_a
        var_b = (b * b).mean(axis=(1, 2)) - mu_b * mu_b
        cov_ab = (a * b).mean(axis=(1, 2)) - mu_a * mu_b
        return _ssim_terms(mu_a, mu_b, var_a, var_b, cov_ab).mean()
    gh, gw = _blur_matrix(h), _blur_matrix(w).T

    def blur(x):
        return gh @ x @ gw

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov_ab = blur(a * b) - mu_a * mu_b
    return _ssim_terms(mu_a, mu_b, var_a, var_b, cov_ab).mean()


def photometric_loss(rendered, gt) -> Tensor:
    """``0.8 * mean|C - C_hat| + 0.2 * (1 - SSIM)``."""
    rendered = dc.as_tensor(getattr(rendered, "values", rendered))
    gt = dc.as_tensor(getattr(gt, "values", gt))
    l1 = dc.absolute(rendered - gt).mean()
    return 0.8 * l1 + 0.2 * (1.0 - ssim(rendered, gt))


def masks_from_labels(labels: np.ndarray, unlabeled: int = 255) -> list[np.ndarray]:
    """Split an instance-id image into flat pixel-index arrays, one per id present."""
    flat = np.asarray(labels).reshape(-1)
    ids = [i for i in np.unique(flat) if i != unlabeled]
    return [np.nonzero(flat == i)[0] for i in ids]


def instance_contrastive_loss(
    instance_map,
    masks,
    tau: float = 0.1,
    pixel_budget: int | None = 256,
    rng: np.random.Generator | None = None,
    exclude_positive: bool = False,
) -> Tensor:
    """InfoNCE between pixel features and mask means.

    ``masks`` is a list of flat pixel-index arrays (or boolean images). Mask
    means are taken over all of a mask's pixels and stay on the tape. For
    each mask at most ``pixel_budget`` pixels are sampled as anchors
    (``None`` uses every pixel). Each mask's pixel losses are averaged, then
    masks are averaged. ``exclude_positive`` drops the positive mask from the
    denominator.
    """
    values = dc.as_tensor(getattr(instance_map, "values", instance_map))
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = values.shape[-1]
    feats = values.reshape(-1, d)
    idx = [np.nonzero(np.asarray(m).reshape(-1))[0] if np.asarray(m).dtype == bool
           else np.asarray(m, dtype=np.intp) for m in masks]
    n_masks = len(idx)
    if n_masks < 2:
        raise ValueError("contrastive loss needs at least two masks")
    if any(len(i) == 0 for i in idx):
        raise ValueError("every mask needs at least one pixel")

    avg = np.zeros((n_masks, feats.shape[0]))
    for q, pix in enumerate(idx):
        avg[q, pix] = 1.0 / len(pix)
    means = avg @ feats                                    # (M, d)

    anchors, owner, weight = [], [], []
    for q, pix in enumerate(idx):
        if pixel_budget is not None and len(pix) > pixel_budget:
            rng = rng if rng is not None else np.random.default_rng(0)
            pix = np.sort(rng.choice(pix, size=pixel_budget, replace=False))
        anchors.append(pix)
        owner.append(np.full(len(pix), q))
        weight.append(np.full(len(pix), 1.0 / (n_masks * len(pix))))
    anchors = np.concatenate(anchors)
    owner = np.concatenate(owner)
    weight = np.concatenate(weight)

    logits = (dc.take(feats, anchors) @ means.T) * (1.0 / tau)   # (n, M)
    positive = logits[np.arange(len(anchors)), owner]
    if exclude_positive:
        mask = np.zeros(logits.shape)
        mask[np.arange(len(anchors)), owner] = -1e9
        denom = dc.logsumexp(logits + mask, axis=1)
    else:
        denom = dc.logsumexp(logits, axis=1)
    return ((denom - positive) * weight).sum()


def cosine_rows(a, b) -> Tensor:
    """Row-wise cosine similarity; rows with zero norm (either side) give 0 with zero gradient."""
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    ok = (na > 0) & (nb > 0)
    safe_a = np.where(ok, na, 1.0)
    safe_b = np.where(ok, nb, 1.0)
    dot = np.einsum("ij,ij->i", a.data, b.data)
    cos = np.where(ok, dot / (safe_a * safe_b), 0.0)

    def vjp(g):
        gg = (g * ok)[:, None]
        ga = gg * (b.data / (safe_a * safe_b)[:, None] - cos[:, None] * a.data / (safe_a**2)[:, None])
        gb = gg * (a.data / (safe_a * safe_b)[:, None] - cos[:, None] * b.data / (safe_b**2)[:, None])
        return ga, gb

    return dc.primitive("cosine_rows", (a, b), cos, vjp)


def language_cosine_loss(pred, gt, valid=None) -> Tensor:
    """Mean over valid rows of ``1 - cos(pred, gt)``."""
    pred, gt = dc.as_tensor(pred), dc.as_tensor(gt)
    if valid is not None:
        rows = np.nonzero(np.asarray(valid, dtype=bool).reshape(-1))[0]
        if len(rows) == 0:
            raise ValueError("no valid pixels")
        if len(rows) != pred.shape[0]:
            pred = dc.take(pred, rows)
            gt = dc.take(gt, rows)
    elif pred.shape[0] == 0:
        raise ValueError("no valid pixels")
    return (1.0 - cosine_rows(pred, gt)).mean()


def stage1_total(rgb_loss, ins_loss, lambda_ins: float = 0.001) -> Tensor:
    if lambda_ins < 0:
        raise ValueError("lambda_ins must be nonnegative")
    return dc.as_tensor(rgb_loss) + lambda_ins * dc.as_tensor(ins_loss)


def stage2_total(lang_loss, entropy_loss, lambda_ent: float = 10.0) -> Tensor:
    if lambda_ent < 0:
        raise ValueError("lambda_ent must be nonnegative")
    return dc.as_tensor(lang_loss) + lambda_ent * dc.as_tensor(entropy_loss)
