"""Dual codebooks and guided cross-attention into the language space.

Queries are projected instance features, keys are the instance codebook,
values are the language codebook; rows of the two codebooks correspond one
to one. The attended vector (plus a residual of the query) is lifted to the
language dimension by a small perceptron. The same map applies to rendered
pixels and to individual Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .gaussians import MLP, NeuralGaussianBatch

__all__ = [
    "CodebookPair",
    "GuidedAttention",
    "AttentionOutput",
    "unit_sphere_rows",
    "guided_attention",
    "lift_language",
    "language_field",
    "language_field_2d",
    "language_field_3d",
    "probability_entropy",
    "code_assignment",
]


def unit_sphere_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class CodebookPair:
    """Instance keys ``(n_codes, d_ins)`` and language values ``(n_codes, d_c)``."""

    def __init__(self, n_codes: int = 64, d_ins: int = 16, d_c: int = 16,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.instance = Parameter(unit_sphere_rows(rng, n_codes, d_ins), name="codebook.instance")
        self.language = Parameter(unit_sphere_rows(rng, n_codes, d_c), name="codebook.language")

    @property
    def n_codes(self) -> int:
        return self.instance.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.instance, self.language]


class GuidedAttention:
    """Query projection, layer norms, lifting perceptron and variant switches.

    ``strict_linear`` swaps the layer norms for identities and the softmax
    for a fixed row-stochastic vector ``softmax(frozen_logits)`` shared by
    all queries, which makes the attention affine in its input. The
    remaining switches select the ablation variants: ``use_attention``,
    ``use_residual`` and ``use_lift``.
    """

    def __init__(self, d_ins: int = 16, d_c: int = 16, d_lang: int = 512,
                 lift_hidden: int = 64, n_codes: int = 64,
                 rng: np.random.Generator | None = None, strict_linear: bool = False,
                 use_attention: bool = True, use_residual: bool = True, use_lift: bool = True,
                 eps: float = 1e-5):
        rng = rng if rng is not None else np.random.default_rng(0)
        if use_residual and use_attention and d_ins != d_c:
            raise ValueError("the residual connection needs d_ins == d_c")
        self.d_ins, self.d_c, self.d_lang = d_ins, d_c, d_lang
        self.strict_linear = strict_linear
        self.use_attention, self.use_residual, self.use_lift = use_attention, use_residual, use_lift
        self.eps = eps
        lim = np.sqrt(6.0 / (2 * d_ins))
        self.w_q = Parameter(rng.uniform(-lim, lim, (d_ins, d_ins)), name="attn.w_q")
        self.ln_q = (Parameter(np.ones(d_ins), name="attn.ln_q.gamma"),
                     Parameter(np.zeros(d_ins), name="attn.ln_q.beta"))
        self.ln_k = (Parameter(np.ones(d_ins), name="attn.ln_k.gamma"),
                     Parameter(np.zeros(d_ins), name="attn.ln_k.beta"))
        self.ln_v = (Parameter(np.ones(d_c), name="attn.ln_v.gamma"),
                     Parameter(np.zeros(d_c), name="attn.ln_v.beta"))
        self.frozen_logits = np.zeros(n_codes)
        lift_in = d_c if use_attention else d_ins
        self.lift = MLP(lift_in, lift_hidden, d_lang, rng, "attn.lift")

    def parameters(self) -> list[Parameter]:
        ps = [self.w_q, *self.ln_q, *self.ln_k, *self.ln_v]
        if self.use_lift:
            ps += self.lift.parameters()
        return ps

    def _norm(self, x, ln) -> Tensor:
        if self.strict_linear:
            return dc.as_tensor(x)
        return dc.layer_norm(x, ln[0], ln[1], self.eps)


@dataclass
class AttentionOutput:
    attended: Tensor          # (n, d_c) or (n, d_lang) for the attention-only variant
    probs: Tensor | None      # (n, n_codes), rows on the simplex
    query: Tensor             # (n, d_ins)


def guided_attention(features, cb: CodebookPair, ga: GuidedAttention) -> AttentionOutput:
    """``P = softmax(Q K^T / sqrt(d_ins))``, attended ``= P V + Q``."""
    features = dc.as_tensor(features)
    if features.ndim != 2 or features.shape[1] != ga.d_ins:
        raise ValueError(f"expected (n, {ga.d_ins}) features, got {features.shape}")
    if cb.instance.shape[1] != ga.d_ins:
        raise ValueError("instance codebook width does not match the query width")
    q = ga._norm(features @ ga.w_q, ga.ln_q)
    if not ga.use_attention:
        return AttentionOutput(q, None, q)
    k = ga._norm(cb.instance, ga.ln_k)
    v = ga._norm(cb.language, ga.ln_v)
    if ga.strict_linear:
        z = ga.frozen_logits - ga.frozen_logits.max()
        row = np.exp(z) / np.exp(z).sum()
        probs = Tensor(np.broadcast_to(row, (features.shape[0], cb.n_codes)))
    else:
        probs = dc.softmax_rows((q @ k.T) * (1.0 / np.sqrt(ga.d_ins)))
    attended = probs @ v
    if ga.use_residual:
        if attended.shape[1] != q.shape[1]:
            raise ValueError("the residual connection needs d_ins == d_c")
        attended = attended + q
    return AttentionOutput(attended, probs, q)


def lift_language(attended, ga: GuidedAttention) -> Tensor:
    """Row-wise two-layer perceptron to ``d_lang``; linear output layer."""
    return ga.lift(attended) if ga.use_lift else dc.as_tensor(attended)


def language_field(features, cb: CodebookPair, ga: GuidedAttention):
    """Attention followed by lifting; returns ``(language rows, probs)``."""
    out = guided_attention(features, cb, ga)
    return lift_language(out.attended, ga), out.probs


def language_field_2d(instance_map, cb: CodebookPair, ga: GuidedAttention) -> Tensor:
    """Per-pixel language map ``(H, W, d_lang)`` from a rendered instance map."""
    values = getattr(instance_map, "values", instance_map)
    values = dc.as_tensor(values)
    h, w, d = values.shape
    lang, _ = language_field(values.reshape(h * w, d), cb, ga)
    return lang.reshape(h, w, lang.shape[1])


def language_field_3d(batch: NeuralGaussianBatch, cb: CodebookPair, ga: GuidedAttention) -> Tensor:
    """Per-Gaussian language features straight from the instance features."""
    lang, _ = language_field(batch.features, cb, ga)
    return lang


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-1)


def probability_entropy(probs) -> Tensor:
    """Mean over queries of ``-sum_k p_k ln p_k`` (with ``0 ln 0 = 0``)."""
    probs = dc.as_tensor(probs)
    n = probs.shape[0]
    p = probs.data
    safe = np.where(p > 0, p, 1.0)
    value = _entropy_rows(p).mean() if n else 0.0
    return dc.primitive(
        "entropy",
        (probs,),
        np.asarray(value),
        lambda g: (-g * (np.log(safe) + 1.0) * (p > 0) / max(n, 1),),
    )


def code_assignment(features, cb: CodebookPair, ga: GuidedAttention) -> np.ndarray:
    """Index of the most probable code per row; ties go to the lower index."""
    probs = guided_attention(features, cb, ga).probs
    if probs is None:
        raise ValueError("code assignment needs the attention path")
    return np.argmax(probs.data, axis=1)
