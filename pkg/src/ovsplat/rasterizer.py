"""Differentiable CPU splatting of colours and feature payloads.

Pipeline per view: pinhole projection with an EWA screen covariance,
3-sigma bounding boxes to enumerate (pixel, Gaussian) pairs, a stable depth
sort per pixel, then front-to-back compositing. The compositor is a single
fused tape primitive with a hand-written backward pass; everything upstream
of it is built from ordinary tape ops.

``brute_force_reference`` re-implements the same maths with plain loops and
no shortcuts and is used as the correctness oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gaussians import NeuralGaussianBatch, build_covariance, covariances

__all__ = [
    "NEAR_PLANE",
    "COV_REGULARIZATION",
    "EARLY_STOP_T",
    "Camera",
    "FeatureMap",
    "Splat2D",
    "Projection",
    "RenderResult",
    "project_gaussian",
    "project",
    "evaluate_opacity",
    "composite_pixel",
    "rasterize",
    "render_maps",
    "brute_force_reference",
]

NEAR_PLANE = 0.01
COV_REGULARIZATION = 0.3
EARLY_STOP_T = 1e-4
SUPPORT_SIGMAS = 3.0


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera.

    Camera axes: x right, y down, z forward. Pixel ``(row, col)`` has its
    centre at screen coordinates ``(col, row)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("image must be at least 1x1")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, float).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx: float, fy: float, width: int, height: int,
                cx: float | None = None, cy: float | None = None) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
        z = target - eye
        z = z / np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(
            fx=fx, fy=fy,
            cx=(width - 1) / 2.0 if cx is None else cx,
            cy=(height - 1) / 2.0 if cy is None else cy,
            rotation=rot, translation=-rot @ eye, height=height, width=width,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "height": self.height, "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "rotation", "translation",
                                         "height", "width")})


@dataclass
class FeatureMap:
    """An ``H x W x d`` rendered plane tagged with what its channels mean."""

    values: Tensor
    kind: str  # "color" | "instance" | "language"

    @property
    def shape(self):
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values.data


@dataclass
class Splat2D:
    mean: np.ndarray          # (2,) pixels
    cov: np.ndarray           # (2, 2) regularised screen covariance
    depth: float
    opacity: float
    index: int


def _jacobian(p_cam: np.ndarray, cam: Camera) -> np.ndarray:
    x, y, z = p_cam
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def project_gaussian(mean, rotation, scale, opacity: float, cam: Camera,
                     index: int = 0) -> Splat2D | None:
    """Project one Gaussian; ``None`` when it lies on or behind the near plane."""
    p = cam.rotation @ np.asarray(mean, float) + cam.translation
    if p[2] <= NEAR_PLANE:
        return None
    cov3 = build_covariance(rotation, scale)
    j = _jacobian(p, cam)
    cov2 = j @ cam.rotation @ cov3 @ cam.rotation.T @ j.T
    cov2 = 0.5 * (cov2 + cov2.T) + COV_REGULARIZATION * np.eye(2)
    mean2 = np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
    return Splat2D(mean=mean2, cov=cov2, depth=float(p[2]), opacity=float(opacity), index=index)


def evaluate_opacity(splat: Splat2D, u) -> float:
    """``alpha * exp(-0.5 d^T cov^-1 d)`` at screen point ``u``."""
    det = np.linalg.det(splat.cov)
    if not det > 0:
        raise np.linalg.LinAlgError("singular screen covariance")
    d = np.asarray(u, float) - splat.mean
    return float(splat.opacity * np.exp(-0.5 * d @ np.linalg.solve(splat.cov, d)))


def composite_pixel(sigmas, payloads, depths=None, early_stop: bool = True):
    """Front-to-back blend of one pixel's contributions.

    Returns ``(blended payload, remaining transmittance)``. ``depths``, if
    given, must be ascending.
    """
    sigmas = np.asarray(sigmas, float)
    payloads = np.asarray(payloads, float).reshape(len(sigmas), -1)
    if depths is not None:
        assert np.all(np.diff(np.asarray(depths, float)) >= 0), "splats must be depth-sorted"
    out = np.zeros(payloads.shape[1])
    t = 1.0
    for s, p in zip(sigmas, payloads):
        if early_stop and t < EARLY_STOP_T:
            break
        out += t * s * p
        t *= 1.0 - s
    return out, t


@dataclass
class Projection:
    """Differentiable screen-space quantities of the Gaussians in front of the camera."""

    index: np.ndarray        # original batch indices of kept Gaussians
    mean2d: Tensor           # (m, 2)
    conic: Tensor            # (m, 3) entries (A, B, C) of the inverse covariance
    opacity: Tensor          # (m,)
    depth: np.ndarray        # (m,)
    radius: np.ndarray       # (m,) 3-sigma support radius in pixels


def project(batch: NeuralGaussianBatch, cam: Camera) -> Projection:
    rot = cam.rotation
    p_all = batch.means.data @ rot.T + cam.translation
    keep = np.nonzero(p_all[:, 2] > NEAR_PLANE)[0]
    means = dc.take(batch.means, keep)
    p = means @ rot.T + cam.translation
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    iz = 1.0 / z
    mean2d = dc.stack([cam.fx * x * iz + cam.cx, cam.fy * y * iz + cam.cy], axis=1)

    cov = covariances(dc.take(batch.rotations, keep), dc.take(batch.scales, keep))
    cov_cam = rot @ cov @ rot.T
    zero = Tensor(np.zeros(len(keep)))
    jac = dc.stack(
        [cam.fx * iz, zero, -cam.fx * x * iz * iz, zero, cam.fy * iz, -cam.fy * y * iz * iz],
        axis=1,
    ).reshape(-1, 2, 3)
    cov2 = jac @ cov_cam @ dc.transpose(jac, (0, 2, 1))
    a = cov2[:, 0, 0] + COV_REGULARIZATION
    b = 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0])
    c = cov2[:, 1, 1] + COV_REGULARIZATION
    det = a * c - b * b
    conic = dc.stack([c / det, -b / det, a / det], axis=1)

    ad, bd, cd = a.data, b.data, c.data
    lam = 0.5 * (ad + cd) + np.sqrt(0.25 * (ad - cd) ** 2 + bd * bd)
    return Projection(
        index=keep,
        mean2d=mean2d,
        conic=conic,
        opacity=dc.take(batch.opacities, keep),
        depth=p.data[:, 2].copy(),
        radius=SUPPORT_SIGMAS * np.sqrt(lam),
    )


def _pairs(proj: Projection, cam: Camera, windowed: bool):
    """Enumerate (gaussian, pixel) pairs; gaussian indices refer to ``proj``."""
    m = len(proj.index)
    h, w = cam.height, cam.width
    if m == 0:
        e = np.zeros(0, dtype=np.intp)
        return e, e, e
    if windowed:
        mx, my = proj.mean2d.data[:, 0], proj.mean2d.data[:, 1]
        r = proj.radius
        x0 = np.clip(np.ceil(mx - r), 0, w).astype(np.intp)
        x1 = np.clip(np.floor(mx + r), -1, w - 1).astype(np.intp)
        y0 = np.clip(np.ceil(my - r), 0, h).astype(np.intp)
        y1 = np.clip(np.floor(my + r), -1, h - 1).astype(np.intp)
    else:
        x0 = np.zeros(m, np.intp)
        y0 = np.zeros(m, np.intp)
        x1 = np.full(m, w - 1, np.intp)
        y1 = np.full(m, h - 1, np.intp)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    g = np.repeat(np.arange(m, dtype=np.intp), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(total, dtype=np.intp) - np.repeat(starts, counts)
    px = x0[g] + local % nx[g]
    py = y0[g] + local // nx[g]
    return g, px, py


def _composite(sigma: Tensor, payload: Tensor, g: np.ndarray, pix: np.ndarray,
               npix: int, early_stop: bool):
    """Fused front-to-back compositor over pairs already sorted by (pixel, depth, index).

    Returns the (npix, D) image tensor and the remaining transmittance per
    pixel. The backward pass uses the suffix recursion
    ``B_i = sigma_{i+1} q_{i+1} + (1 - sigma_{i+1}) B_{i+1}`` so no division
    by ``1 - sigma`` is ever needed.
    """
    d = payload.shape[1]
    trans = np.ones(npix)
    if len(g) == 0:
        return dc.primitive("composite", (sigma, payload), np.zeros((npix, d)),
                            lambda gr: (np.zeros(0), np.zeros(payload.shape))), trans
    uniq, starts, counts = np.unique(pix, return_index=True, return_counts=True)
    slot = np.repeat(np.arange(len(uniq)), counts)
    rank = np.arange(len(pix)) - starts[slot]
    depth_max = int(counts.max())
    s = np.zeros((len(uniq), depth_max))
    s[slot, rank] = sigma.data
    one_minus = 1.0 - s
    t = np.ones_like(s)
    if depth_max > 1:
        t[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    active = t >= EARLY_STOP_T if early_stop else np.ones_like(s, dtype=bool)
    weights = t * s * active
    w_pair = weights[slot, rank]
    pay = payload.data[g]
    contrib = np.add.reduceat(w_pair[:, None] * pay, starts, axis=0)
    out = np.zeros((npix, d))
    out[uniq] = contrib
    trans[uniq] = np.prod(np.where(active, one_minus, 1.0), axis=1)

    def vjp(grad):
        gu = grad[uniq]
        g_at = gu[slot]
        g_pay = None
        if payload.requires_grad:
            g_pay = np.zeros(payload.shape)
            np.add.at(g_pay, g, w_pair[:, None] * g_at)
        q = np.zeros_like(s)
        q[slot, rank] = np.einsum("ij,ij->i", g_at, pay)
        b = np.zeros_like(s)
        for i in range(depth_max - 2, -1, -1):
            b[:, i] = active[:, i + 1] * (s[:, i + 1] * q[:, i + 1] + one_minus[:, i + 1] * b[:, i + 1])
        ds = t * (q - b) * active
        return ds[slot, rank], g_pay

    return dc.primitive("composite", (sigma, payload), out, vjp), trans


@dataclass
class RenderResult:
    image: Tensor                  # (H, W, D)
    transmittance: np.ndarray      # (H, W)
    n_pairs: int

    @property
    def coverage(self) -> np.ndarray:
        return 1.0 - self.transmittance


def rasterize(batch: NeuralGaussianBatch, cam: Camera, payload: Tensor | None = None,
              exact: bool = False) -> RenderResult:
    """Composite ``payload`` (defaults to colours) over every pixel.

    ``exact=True`` drops the 3-sigma support window and early termination,
    which is the mode compared against :func:`brute_force_reference`.
    """
    h, w = cam.height, cam.width
    payload = batch.colors if payload is None else dc.as_tensor(payload)
    d = payload.shape[1]
    if len(batch) == 0:
        return RenderResult(Tensor(np.zeros((h, w, d))), np.ones((h, w)), 0)
    proj = project(batch, cam)
    gi, px, py = _pairs(proj, cam, windowed=not exact)
    pix = py * w + px
    order = np.lexsort((proj.index[gi], proj.depth[gi], pix))
    gi, px, py, pix = gi[order], px[order], py[order], pix[order]

    mean = dc.take(proj.mean2d, gi)
    con = dc.take(proj.conic, gi)
    dx = px.astype(float) - mean[:, 0]
    dy = py.astype(float) - mean[:, 1]
    power = -0.5 * (con[:, 0] * dx * dx + con[:, 2] * dy * dy) - con[:, 1] * dx * dy
    sigma = dc.take(proj.opacity, gi) * dc.exp(power)

    pay = dc.take(payload, proj.index)
    img, trans = _composite(sigma, pay, gi, pix, h * w, early_stop=not exact)
    return RenderResult(img.reshape(h, w, d), trans.reshape(h, w), len(gi))


def render_maps(batch: NeuralGaussianBatch, cam: Camera, exact: bool = False):
    """Colour and instance-feature maps from a single compositing pass."""
    d_ins = batch.features.shape[1]
    res = rasterize(batch, cam, dc.concat([batch.colors, batch.features], axis=1), exact=exact)
    color = res.image[:, :, :3]
    feats = res.image[:, :, 3:3 + d_ins]
    return FeatureMap(color, "color"), FeatureMap(feats, "instance"), res.transmittance


def brute_force_reference(batch: NeuralGaussianBatch, cam: Camera, payload=None):
    """Loop-based oracle: every Gaussian at every pixel, no window, no early stop.

    Returns ``(color, features, transmittance)`` as arrays, or
    ``(payload_image, transmittance)`` when an explicit ``payload`` is given.
    """
    h, w = cam.height, cam.width
    m = len(batch)
    means = batch.means.data
    rots = batch.rotations.data
    scales = batch.scales.data
    alphas = batch.opacities.data
    if payload is None:
        pay = np.hstack([batch.colors.data, batch.features.data]) if m else np.zeros((0, 3 + batch.features.shape[1]))
    else:
        pay = np.asarray(payload, float).reshape(m, -1)
    splats = []
    for i in range(m):
        sp = project_gaussian(means[i], rots[i], scales[i], alphas[i], cam, index=i)
        if sp is not None:
            splats.append(sp)
    splats.sort(key=lambda sp: (sp.depth, sp.index))

    cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    out = np.zeros((h, w, pay.shape[1]))
    trans = np.ones((h, w))
    for sp in splats:
        inv = np.linalg.inv(sp.cov)
        dx = cols - sp.mean[0]
        dy = rows - sp.mean[1]
        maha = inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        sigma = sp.opacity * np.exp(-0.5 * maha)
        out += (trans * sigma)[:, :, None] * pay[sp.index]
        trans = trans * (1.0 - sigma)
    if payload is not None:
        return out, trans
    return out[:, :, :3], out[:, :, 3:], trans
