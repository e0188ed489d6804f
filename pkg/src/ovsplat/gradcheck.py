"""Registry of finite-difference gradient checks over every differentiable piece.

Each check builds its own small problem from a seed and returns the largest
relative error between tape and central-difference gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import losses
from .diffcore import Parameter, Tensor
from .gaussians import AttributeDecoder, NeuralGaussianBatch, covariances, init_anchor_grid, spawn_gaussians
from .rasterizer import Camera, render_maps
from .semantics import CodebookPair, GuidedAttention, guided_attention, lift_language, probability_entropy

__all__ = ["GradCheck", "REGISTRY", "register", "run_checks", "TOLERANCE", "small_scene"]

TOLERANCE = 1e-4
H = 1e-4


@dataclass
class GradCheck:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Parameter]]]
    max_coords: int | None = None


REGISTRY: list[GradCheck] = []


def register(name: str, max_coords: int | None = None):
    def deco(fn):
        REGISTRY.append(GradCheck(name, fn, max_coords))
        return fn
    return deco


def _p(rng, *shape, lo=-1.0, hi=1.0, away=0.0):
    x = rng.uniform(lo, hi, shape)
    if away:
        x = np.where(np.abs(x) < away, np.sign(x + 1e-300) * away, x)
    return Parameter(x)


def _weights(rng, shape):
    return rng.normal(size=shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops

def _unary(name, op, lo=-1.0, hi=1.0, away=0.0):
    @register(name)
    def build(rng):
        x = _p(rng, 3, 4, lo=lo, hi=hi, away=away)
        w = _weights(rng, (3, 4))
        return (lambda: (op(x) * w).sum()), [x]
    return build


_unary("neg", dc.neg)
_unary("exp", dc.exp)
_unary("log", dc.log, lo=0.2, hi=2.0)
_unary("sqrt", dc.sqrt, lo=0.2, hi=2.0)
_unary("sigmoid", dc.sigmoid, lo=-4.0, hi=4.0)
_unary("tanh", dc.tanh)
_unary("relu", dc.relu, away=0.05)
_unary("absolute", dc.absolute, away=0.05)
_unary("power", lambda x: dc.power(x, 2.5), lo=0.2, hi=2.0)


def _binary(name, op, lo=-1.0, hi=1.0):
    @register(name)
    def build(rng):
        a = _p(rng, 3, 4)
        b = _p(rng, 4, lo=lo, hi=hi)          # broadcast on purpose
        w = _weights(rng, (3, 4))
        return (lambda: (op(a, b) * w).sum()), [a, b]
    return build


_binary("add", dc.add)
_binary("sub", dc.sub)
_binary("mul", dc.mul)
_binary("div", dc.div, lo=0.5, hi=2.0)


@register("where")
def _where(rng):
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    cond = rng.uniform(size=(3, 4)) > 0.5
    w = _weights(rng, (3, 4))
    return (lambda: (dc.where(cond, a, b) * w).sum()), [a, b]


@register("matmul")
def _matmul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    w = _weights(rng, (3, 2))
    return (lambda: ((a @ b) * w).sum()), [a, b]


@register("matmul_batched")
def _bmm(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 2)
    w = _weights(rng, (2, 3, 2))
    return (lambda: ((a @ b) * w).sum()), [a, b]


@register("sum_mean_axes")
def _reduce(rng):
    x = _p(rng, 3, 4, 2)
    w = _weights(rng, (3, 2))
    return (lambda: (x.sum(axis=1) * w).sum() + x.mean(axis=(0, 2), keepdims=True).sum() * 0.7), [x]


@register("reshape_transpose")
def _shape(rng):
    x = _p(rng, 2, 3, 4)
    w = _weights(rng, (4, 6))
    return (lambda: (dc.transpose(x, (2, 0, 1)).reshape(4, 6) * w).sum()), [x]


@register("take_getitem")
def _index(rng):
    x = _p(rng, 5, 3)
    idx = np.array([0, 3, 3, 1])
    w = _weights(rng, (4, 3))
    return (lambda: (dc.take(x, idx) * w).sum() + (x[1:4, ::2] * 1.5).sum()), [x]


@register("concat_stack")
def _cat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 3)
    w1, w2 = _weights(rng, (4, 3)), _weights(rng, (2, 2, 3))
    return (lambda: (dc.concat([a, b]) * w1).sum() + (dc.stack([a, b], axis=1) * w2).sum()), [a, b]


@register("softmax_rows")
def _softmax(rng):
    x = _p(rng, 3, 4, lo=-2, hi=2)
    w = _weights(rng, (3, 4))
    return (lambda: (dc.softmax_rows(x) * w).sum()), [x]


@register("logsumexp")
def _lse(rng):
    x = _p(rng, 3, 4, lo=-2, hi=2)
    w = _weights(rng, (3,))
    return (lambda: (dc.logsumexp(x, axis=1) * w).sum()), [x]


@register("layer_norm")
def _ln(rng):
    x = _p(rng, 3, 5)
    g, b = _p(rng, 5), _p(rng, 5)
    w = _weights(rng, (3, 5))
    return (lambda: (dc.layer_norm(x, g, b) * w).sum()), [x, g, b]


# ---------------------------------------------------------------------------
# scene pieces

@register("covariance")
def _cov(rng):
    q = _p(rng, 3, 4)
    s = _p(rng, 3, 3, lo=0.2, hi=1.0)
    w = _weights(rng, (3, 3, 3))

    def f():
        qn = q / dc.sqrt((q * q).sum(axis=1, keepdims=True))
        return (covariances(qn, s) * w).sum()
    return f, [q, s]


def small_scene(rng, n: int = 5, size: int = 4, d_ins: int = 3):
    """A handful of Gaussians in front of a tiny camera, as trainable parameters."""
    cam = Camera.look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], 4.0, 4.0, size, size)
    params = {
        "means": Parameter(rng.uniform(-0.4, 0.4, (n, 3))),
        "opacity_raw": Parameter(rng.uniform(-1.0, 1.0, n)),
        "colors": Parameter(rng.uniform(0.1, 0.9, (n, 3))),
        "quats": Parameter(rng.normal(size=(n, 4))),
        "log_scales": Parameter(rng.uniform(np.log(0.3), np.log(0.6), (n, 3))),
        "features": Parameter(rng.normal(size=(n, d_ins))),
    }

    def batch() -> NeuralGaussianBatch:
        q = params["quats"]
        return NeuralGaussianBatch(
            means=params["means"],
            opacities=dc.sigmoid(params["opacity_raw"]),
            colors=params["colors"],
            rotations=q / dc.sqrt((q * q).sum(axis=1, keepdims=True)),
            scales=dc.exp(params["log_scales"]),
            features=params["features"],
            anchor_index=np.arange(n),
        )
    return cam, params, batch


@register("render_maps")
def _render(rng):
    cam, params, batch = small_scene(rng)
    wc = _weights(rng, (4, 4, 3))
    wf = _weights(rng, (4, 4, 3))

    def f():
        color, inst, _ = render_maps(batch(), cam, exact=True)
        return (color.values * wc).sum() + (inst.values * wf).sum()
    return f, list(params.values())


@register("spawn_gaussians", max_coords=6)
def _spawn(rng):
    anchors = init_anchor_grid(0.4, 2, 3, rng, d_geo=4, d_seg=4)
    dec = AttributeDecoder(3, 4, 4, 2, 6, rng)
    # unit-scale features and nonzero hidden biases keep ReLU inputs off the kink
    anchors.geo_features.assign(rng.normal(size=anchors.geo_features.shape))
    anchors.seg_features.assign(rng.normal(size=anchors.seg_features.shape))
    for head in dec.heads().values():
        head.b1.assign(rng.uniform(-0.5, 0.5, head.b1.shape))
    cam = np.array([0.3, -0.2, -3.0])
    ws = {k: _weights(rng, shp) for k, shp in
          (("means", (24, 3)), ("op", (24,)), ("col", (24, 3)), ("rot", (24, 4)), ("sc", (24, 3)),
           ("feat", (24, 2)))}

    def f():
        b = spawn_gaussians(anchors, dec, cam)
        return ((b.means * ws["means"]).sum() + (b.opacities * ws["op"]).sum()
                + (b.colors * ws["col"]).sum() + (b.rotations * ws["rot"]).sum()
                + (b.scales * ws["sc"]).sum() + (b.features * ws["feat"]).sum())
    return f, anchors.parameters() + dec.parameters()


@register("ssim")
def _ssim(rng):
    a = _p(rng, 12, 13, 3, lo=0, hi=1)
    b = rng.uniform(0, 1, (12, 13, 3))
    return (lambda: losses.ssim(a, b)), [a]


@register("ssim_global")
def _ssim_small(rng):
    a = _p(rng, 4, 4, 3, lo=0, hi=1)
    b = rng.uniform(0, 1, (4, 4, 3))
    return (lambda: losses.ssim(a, b)), [a]


@register("photometric")
def _photo(rng):
    a = _p(rng, 11, 11, 3, lo=0, hi=1)
    b = rng.uniform(0, 1, (11, 11, 3))
    return (lambda: losses.photometric_loss(a, b)), [a]


@register("contrastive")
def _nce(rng):
    x = _p(rng, 6, 6, 4)
    labels = rng.integers(0, 3, (6, 6))
    labels[0, 0], labels[0, 1], labels[0, 2] = 0, 1, 2
    masks = losses.masks_from_labels(labels)
    return (lambda: losses.instance_contrastive_loss(x, masks, tau=0.5, pixel_budget=None)), [x]


@register("contrastive_excl")
def _nce_excl(rng):
    x = _p(rng, 6, 6, 4)
    labels = rng.integers(0, 3, (6, 6))
    labels[0, 0], labels[0, 1], labels[0, 2] = 0, 1, 2
    masks = losses.masks_from_labels(labels)
    return (lambda: losses.instance_contrastive_loss(x, masks, tau=0.5, pixel_budget=None,
                                                     exclude_positive=True)), [x]


@register("cosine")
def _cos(rng):
    a = _p(rng, 5, 6)
    b = rng.normal(size=(5, 6))
    return (lambda: losses.language_cosine_loss(a, b)), [a]


@register("entropy")
def _ent(rng):
    x = _p(rng, 4, 6, lo=-2, hi=2)
    return (lambda: probability_entropy(dc.softmax_rows(x))), [x]


def _semantics(rng, n_codes=5, d=4, d_lang=7, **kw):
    cb = CodebookPair(n_codes, d, d, rng)
    ga = GuidedAttention(d, d, d_lang, 6, n_codes, rng, **kw)
    # move layer-norm affines off their identity init so their gradients matter
    for p in (*ga.ln_q, *ga.ln_k, *ga.ln_v):
        p.assign(p.data + rng.normal(0, 0.3, p.shape))
    return cb, ga


@register("guided_attention")
def _attn(rng):
    cb, ga = _semantics(rng)
    x = _p(rng, 3, 4)
    w = _weights(rng, (3, 4))

    def f():
        out = guided_attention(x, cb, ga)
        return (out.attended * w).sum()
    return f, [x] + cb.parameters() + [ga.w_q, *ga.ln_q, *ga.ln_k, *ga.ln_v]


@register("lift")
def _lift(rng):
    cb, ga = _semantics(rng)
    x = _p(rng, 3, 4)
    w = _weights(rng, (3, 7))
    return (lambda: (lift_language(x, ga) * w).sum()), [x] + ga.lift.parameters()


@register("stage1_graph", max_coords=8)
def _stage1(rng):
    cam, params, batch = small_scene(rng, n=5, size=4, d_ins=3)
    gt = rng.uniform(0, 1, (4, 4, 3))
    labels = np.repeat(np.array([0, 0, 1, 1]), 4).reshape(4, 4)
    masks = losses.masks_from_labels(labels)

    def f():
        color, inst, _ = render_maps(batch(), cam, exact=True)
        return losses.stage1_total(losses.photometric_loss(color, gt),
                                   losses.instance_contrastive_loss(inst, masks, 0.5, None), 0.3)
    return f, list(params.values())


@register("stage2_graph", max_coords=8)
def _stage2(rng):
    cam, params, batch = small_scene(rng, n=5, size=4, d_ins=4)
    cb, ga = _semantics(rng)
    gt = rng.normal(size=(16, 7))
    valid = rng.uniform(size=16) > 0.25
    valid[0] = True

    def f():
        _, inst, _ = render_maps(batch(), cam, exact=True)
        out = guided_attention(inst.values.reshape(16, 4), cb, ga)
        lang = lift_language(out.attended, ga)
        return losses.stage2_total(losses.language_cosine_loss(lang, gt, valid),
                                   probability_entropy(out.probs), 0.5)
    return f, list(params.values()) + cb.parameters() + ga.parameters()


def run_checks(seeds=range(10), names=None, h: float = H):
    """``{name: worst relative error over seeds}`` for the selected checks."""
    out = {}
    for chk in REGISTRY:
        if names is not None and chk.name not in names:
            continue
        worst = 0.0
        for s in seeds:
            rng = np.random.default_rng(1000 + s)
            f, params = chk.build(rng)
            worst = max(worst, dc.finite_diff_check(f, params, h=h, max_coords=chk.max_coords, seed=s))
        out[chk.name] = worst
    return out
