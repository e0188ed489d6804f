"""Anchor-based neural Gaussians.

Each anchor carries a geometry feature, a segmentation feature, a per-axis
scale and ``K`` offsets. Small two-layer decoders turn an anchor into ``K``
Gaussians: appearance attributes depend on the viewing distance and
direction, instance features depend on the segmentation feature alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor

__all__ = [
    "AnchorSet",
    "MLP",
    "AttributeDecoder",
    "NeuralGaussianBatch",
    "quaternion_to_rotation",
    "build_covariance",
    "init_anchor_grid",
    "spawn_gaussians",
]


def quaternion_to_rotation(r) -> np.ndarray:
    """Rotation matrix of a quaternion ``(w, x, y, z)``; renormalised first."""
    r = np.asarray(r, dtype=np.float64)
    n = np.linalg.norm(r)
    if n == 0:
        raise ValueError("zero quaternion has no rotation")
    w, x, y, z = r / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def build_covariance(r, s) -> np.ndarray:
    """``R diag(s)^2 R^T`` for a quaternion ``r`` and positive scales ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    m = quaternion_to_rotation(r) * s[None, :]
    cov = m @ m.T
    return 0.5 * (cov + cov.T)


def rotation_matrices(quats: Tensor) -> Tensor:
    """Differentiable batched version of :func:`quaternion_to_rotation`.

    ``quats`` (M, 4) must already be unit length. Returns (M, 3, 3).
    """
    w, x, y, z = (quats[:, i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
        2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
        2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
    ]
    return dc.stack(rows, axis=1).reshape(-1, 3, 3)


def covariances(quats: Tensor, scales: Tensor) -> Tensor:
    """Batched ``R S S^T R^T``; (M, 3, 3)."""
    rs = rotation_matrices(quats) * scales.reshape(-1, 1, 3)
    return rs @ dc.transpose(rs, (0, 2, 1))


class MLP:
    """Linear -> ReLU -> Linear."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator,
                 name: str, out_bias: np.ndarray | float = 0.0, out_scale: float = 1.0):
        lim1 = np.sqrt(6.0 / (d_in + hidden))
        lim2 = np.sqrt(6.0 / (hidden + d_out)) * out_scale
        self.w1 = Parameter(rng.uniform(-lim1, lim1, (d_in, hidden)), name=f"{name}.w1")
        self.b1 = Parameter(np.zeros(hidden), name=f"{name}.b1")
        self.w2 = Parameter(rng.uniform(-lim2, lim2, (hidden, d_out)), name=f"{name}.w2")
        self.b2 = Parameter(np.broadcast_to(np.asarray(out_bias, float), (d_out,)).copy(),
                            name=f"{name}.b2")

    def __call__(self, x) -> Tensor:
        return dc.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class AnchorSet:
    """Anchor positions (fixed) plus learnable per-anchor features.

    ``log_scales`` stores ``log l_i`` so the anchor scale stays positive.
    """

    positions: np.ndarray
    geo_features: Parameter
    seg_features: Parameter
    log_scales: Parameter
    offsets: Parameter

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.positions.flags.writeable = False

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.data)

    def parameters(self) -> list[Parameter]:
        return [self.geo_features, self.seg_features, self.log_scales, self.offsets]


def init_anchor_grid(
    bounds: float,
    per_axis: int,
    k: int,
    rng: np.random.Generator,
    d_geo: int = 16,
    d_seg: int = 16,
    jitter: float = 0.25,
    offset_std: float = 0.5,
) -> AnchorSet:
    """Uniform jittered grid over the cube ``[-bounds, bounds]^3``.

    Jitter is a fraction of the grid spacing; anchor scale starts at half
    the spacing on every axis. Features start at zero, as in Scaffold-GS,
    except for a small seeded perturbation on the geometry features so the
    decoders see distinct inputs from the first step.
    """
    spacing = 2.0 * bounds / per_axis
    ticks = -bounds + spacing * (np.arange(per_axis) + 0.5)
    grid = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), -1).reshape(-1, 3)
    grid = grid + rng.uniform(-jitter, jitter, grid.shape) * spacing
    n = grid.shape[0]
    return AnchorSet(
        positions=grid,
        geo_features=Parameter(rng.normal(0.0, 0.01, (n, d_geo)), name="anchor.geo"),
        seg_features=Parameter(rng.normal(0.0, 0.01, (n, d_seg)), name="anchor.seg"),
        log_scales=Parameter(np.full((n, 3), np.log(0.5 * spacing)), name="anchor.log_scale"),
        offsets=Parameter(rng.normal(0.0, offset_std, (n, k, 3)), name="anchor.offsets"),
    )


class AttributeDecoder:
    """Per-attribute heads on ``(f_g, distance, direction)`` and an instance head on ``f_s``.

    Every head is a two-layer perceptron emitting ``K`` attribute sets per
    anchor.
    """

    def __init__(self, k: int = 3, d_geo: int = 16, d_seg: int = 16, d_ins: int = 16,
                 hidden: int = 32, rng: np.random.Generator | None = None,
                 opacity_bias: float = -1.0, scale_bias: float = -0.7):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k, self.d_ins = k, d_ins
        d_in = d_geo + 4
        ident = np.tile([1.0, 0.0, 0.0, 0.0], k)
        self.opacity = MLP(d_in, hidden, k, rng, "dec.opacity", out_bias=opacity_bias)
        self.color = MLP(d_in, hidden, 3 * k, rng, "dec.color")
        self.rotation = MLP(d_in, hidden, 4 * k, rng, "dec.rotation", out_bias=ident,
                            out_scale=0.1)
        self.scale = MLP(d_in, hidden, 3 * k, rng, "dec.scale", out_bias=scale_bias,
                         out_scale=0.1)
        self.instance = MLP(d_seg, hidden, d_ins * k, rng, "dec.instance")

    def heads(self) -> dict[str, MLP]:
        return {
            "opacity": self.opacity,
            "color": self.color,
            "rotation": self.rotation,
            "scale": self.scale,
            "instance": self.instance,
        }

    def geometry_parameters(self) -> list[Parameter]:
        return [p for name, h in self.heads().items() if name != "instance" for p in h.parameters()]

    def instance_parameters(self) -> list[Parameter]:
        return self.instance.parameters()

    def parameters(self) -> list[Parameter]:
        return self.geometry_parameters() + self.instance_parameters()


@dataclass
class NeuralGaussianBatch:
    means: Tensor           # (M, 3)
    opacities: Tensor       # (M,)
    colors: Tensor          # (M, 3)
    rotations: Tensor       # (M, 4) unit quaternions
    scales: Tensor          # (M, 3)
    features: Tensor        # (M, d_ins)
    anchor_index: np.ndarray
    degenerate_view: bool = field(default=False)

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def from_arrays(cls, means, opacities, colors, rotations, scales, features=None,
                    anchor_index=None) -> "NeuralGaussianBatch":
        means = np.asarray(means, float).reshape(-1, 3)
        m = means.shape[0]
        rot = np.asarray(rotations, float).reshape(m, 4)
        rot = rot / np.linalg.norm(rot, axis=1, keepdims=True) if m else rot
        if features is None:
            feats = np.zeros((m, 0))
        else:
            feats = np.asarray(features, float)
            feats = feats.reshape(m, feats.shape[-1] if feats.ndim == 2 else -1)
        return cls(
            means=Tensor(means),
            opacities=Tensor(np.asarray(opacities, float).reshape(m)),
            colors=Tensor(np.asarray(colors, float).reshape(m, 3)),
            rotations=Tensor(rot),
            scales=Tensor(np.asarray(scales, float).reshape(m, 3)),
            features=Tensor(feats),
            anchor_index=np.arange(m) if anchor_index is None else np.asarray(anchor_index),
        )

    def subset(self, index) -> "NeuralGaussianBatch":
        index = np.asarray(index, dtype=np.intp)
        return NeuralGaussianBatch(
            means=dc.take(self.means, index),
            opacities=dc.take(self.opacities, index),
            colors=dc.take(self.colors, index),
            rotations=dc.take(self.rotations, index),
            scales=dc.take(self.scales, index),
            features=dc.take(self.features, index),
            anchor_index=self.anchor_index[index],
            degenerate_view=self.degenerate_view,
        )


def spawn_gaussians(anchors: AnchorSet, decoder: AttributeDecoder, camera_center) -> NeuralGaussianBatch:
    """Decode every anchor into ``K`` neural Gaussians for one viewpoint.

    ``mu_{i,k} = v_i + O_{i,k} * l_i`` (elementwise). If the camera sits on
    an anchor the direction is replaced by ``(0, 0, 1)`` and the batch is
    flagged through ``degenerate_view``.
    """
    n, k = anchors.n, decoder.k
    rel = anchors.positions - np.asarray(camera_center, dtype=np.float64)[None, :]
    dist = np.linalg.norm(rel, axis=1, keepdims=True)
    degenerate = dist[:, 0] == 0
    direction = np.where(degenerate[:, None], [[0.0, 0.0, 1.0]], rel / np.where(dist == 0, 1.0, dist))
    view_in = dc.concat([anchors.geo_features, Tensor(np.hstack([dist, direction]))], axis=1)

    scale_l = dc.exp(anchors.log_scales)                              # (N, 3)
    means = anchors.positions[:, None, :] + anchors.offsets * scale_l.reshape(n, 1, 3)

    opac = dc.sigmoid(decoder.opacity(view_in))                     # (N, K)
    color = dc.sigmoid(decoder.color(view_in))                      # (N, 3K)
    rot = decoder.rotation(view_in).reshape(n * k, 4)
    rot = rot / dc.sqrt((rot * rot).sum(axis=1, keepdims=True))
    scale = dc.exp(decoder.scale(view_in)).reshape(n, k, 3) * scale_l.reshape(n, 1, 3)
    feats = decoder.instance(anchors.seg_features)                  # (N, K*d_ins)

    return NeuralGaussianBatch(
        means=means.reshape(n * k, 3),
        opacities=opac.reshape(n * k),
        colors=color.reshape(n * k, 3),
        rotations=rot,
        scales=scale.reshape(n * k, 3),
        features=feats.reshape(n * k, decoder.d_ins),
        anchor_index=np.repeat(np.arange(n), k),
        degenerate_view=bool(degenerate.any()),
    )
