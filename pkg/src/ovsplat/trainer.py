"""Two-stage optimisation and the checkpoint container.

Stage 1 fits anchors and decoders to the ground-truth images while the
contrastive term shapes the instance features. Stage 2 freezes all of that,
renders each view's instance map once, and fits the codebooks, the
attention and the lift to the per-pixel language targets.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import losses
from .config import config_hash, substream
from .diffcore import NonFiniteError, Parameter, Tape
from .formats import atomic_write_bytes
from .gaussians import AnchorSet, AttributeDecoder, NeuralGaussianBatch, init_anchor_grid, spawn_gaussians
from .rasterizer import Camera, render_maps
from .semantics import CodebookPair, GuidedAttention, language_field, probability_entropy
from .synthscene import SupervisionPack, View

__all__ = [
    "TrainConfig",
    "LOSS_COLUMNS",
    "SceneModel",
    "LossLog",
    "CheckpointError",
    "TrainingDiverged",
    "train_stage1",
    "train_stage2",
    "fit_language_rows",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "psnr",
    "feature_consistency",
    "render_instance_features",
]

MAGIC = b"GALA"
VERSION = 1
LOSS_COLUMNS = ("step", "L_RGB", "L_ins", "L_lang", "L_entropy", "total")


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 7
    iters1: int = 3000
    iters2: int = 1500
    lambda_ins: float = 0.001
    lambda_ent: float = 10.0
    # decoders; per-anchor segmentation features; codebooks + attention + lift
    lr_decoder: float = 5e-4
    lr_seg_feature: float = 5e-5
    lr_codebook: float = 1e-3
    # remaining anchor attributes
    lr_geo_feature: float = 0.0075
    lr_offset: float = 0.01
    lr_scale: float = 0.007
    k: int = 3
    n_codes: int = 64
    d_feature: int = 16
    d_ins: int = 16
    d_lang: int = 512
    hidden: int = 32
    lift_hidden: int = 64
    anchors_per_axis: int = 6
    anchor_bounds: float = 1.0
    tau: float = 0.1
    pixel_budget: int = 256
    exclude_positive: bool = False
    strict_linear: bool = False
    use_attention: bool = True
    use_residual: bool = True
    use_lift: bool = True

    def __post_init__(self):
        for name in ("lr_decoder", "lr_seg_feature", "lr_codebook", "lr_geo_feature",
                     "lr_offset", "lr_scale", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iters1 < 1 or self.iters2 < 1:
            raise ValueError("stage iterations must be at least 1")
        if self.lambda_ins < 0 or self.lambda_ent < 0:
            raise ValueError("loss weights must be nonnegative")


class SceneModel:
    """Everything trainable, plus the stage tag and the config that built it."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.stage = 0
        init = substream(cfg.seed, "init")
        self.anchors: AnchorSet = init_anchor_grid(
            cfg.anchor_bounds, cfg.anchors_per_axis, cfg.k, init, cfg.d_feature, cfg.d_feature)
        self.decoder = AttributeDecoder(cfg.k, cfg.d_feature, cfg.d_feature, cfg.d_ins,
                                        cfg.hidden, init)
        sem = substream(cfg.seed, "semantics")
        # without the lift, language values must already live in d_lang
        d_c = cfg.d_ins if cfg.use_lift else cfg.d_lang
        self.codebooks = CodebookPair(cfg.n_codes, cfg.d_ins, d_c, sem)
        self.attention = GuidedAttention(
            cfg.d_ins, d_c, cfg.d_lang, cfg.lift_hidden, cfg.n_codes, sem,
            strict_linear=cfg.strict_linear, use_attention=cfg.use_attention,
            use_residual=cfg.use_residual, use_lift=cfg.use_lift)

    # parameter groups -----------------------------------------------------
    def stage1_groups(self) -> list[tuple[list[Parameter], float]]:
        c, a = self.cfg, self.anchors
        return [
            ([a.geo_features], c.lr_geo_feature),
            ([a.seg_features], c.lr_seg_feature),
            ([a.offsets], c.lr_offset),
            ([a.log_scales], c.lr_scale),
            (self.decoder.parameters(), c.lr_decoder),
        ]

    def stage2_groups(self) -> list[tuple[list[Parameter], float]]:
        return [(self.codebooks.parameters() + self.attention.parameters(), self.cfg.lr_codebook)]

    def named_parameters(self) -> dict[str, Parameter]:
        out = {
            "anchor.geo": self.anchors.geo_features,
            "anchor.seg": self.anchors.seg_features,
            "anchor.log_scale": self.anchors.log_scales,
            "anchor.offsets": self.anchors.offsets,
        }
        for head, mlp in self.decoder.heads().items():
            for part in ("w1", "b1", "w2", "b2"):
                out[f"decoder.{head}.{part}"] = getattr(mlp, part)
        out["codebook.instance"] = self.codebooks.instance
        out["codebook.language"] = self.codebooks.language
        ga = self.attention
        out["attention.w_q"] = ga.w_q
        for tag, (g, b) in (("q", ga.ln_q), ("k", ga.ln_k), ("v", ga.ln_v)):
            out[f"attention.ln_{tag}.gamma"] = g
            out[f"attention.ln_{tag}.beta"] = b
        for part in ("w1", "b1", "w2", "b2"):
            out[f"attention.lift.{part}"] = getattr(ga.lift, part)
        return out

    def fork(self, **overrides) -> "SceneModel":
        """Copy of the stage-1 state with fresh semantics built from ``overrides``.

        Only fields that do not change geometry may be overridden.
        """
        geometry = {"seed", "k", "d_feature", "d_ins", "hidden", "anchors_per_axis", "anchor_bounds"}
        bad = geometry & overrides.keys()
        if bad:
            raise ValueError(f"cannot change geometry fields {sorted(bad)} after stage 1")
        child = SceneModel(dataclasses.replace(self.cfg, **overrides))
        child.anchors.positions = self.anchors.positions
        mine = self.named_parameters()
        for name, p in child.named_parameters().items():
            if name.startswith(("anchor.", "decoder.")):
                p.assign(mine[name].data)
                p.m, p.v, p.step = mine[name].m.copy(), mine[name].v.copy(), mine[name].step
        child.stage = min(self.stage, 1)
        return child

    # forward helpers --------------------------------------------------------
    def spawn(self, cam: Camera) -> NeuralGaussianBatch:
        return spawn_gaussians(self.anchors, self.decoder, cam.center)

    def render(self, cam: Camera):
        return render_maps(self.spawn(cam), cam)

    def language_rows(self, features):
        return language_field(features, self.codebooks, self.attention)


@dataclass
class LossLog:
    rows: list[tuple] = field(default_factory=list)

    def add(self, step: int, l_rgb=float("nan"), l_ins=float("nan"), l_lang=float("nan"),
            l_ent=float("nan"), total=float("nan")) -> None:
        self.rows.append((step, l_rgb, l_ins, l_lang, l_ent, total))

    def column(self, name: str) -> np.ndarray:
        i = LOSS_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in self.rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        return buf.getvalue()

    def write(self, path) -> None:
        atomic_write_bytes(path, self.to_csv().encode())


def _guard(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {step}")


def _view_schedule(n_views: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded round-robin: every view once per epoch, epochs independently shuffled."""
    epochs = -(-iters // n_views)
    return np.concatenate([rng.permutation(n_views) for _ in range(epochs)])[:iters]


def train_stage1(pack: SupervisionPack, cfg: TrainConfig = TrainConfig(),
                 model: SceneModel | None = None,
                 progress: Callable[[int, float], None] | None = None):
    """Returns ``(model, LossLog)``; the model is tagged stage 1."""
    views = pack.train_views
    if not views:
        raise ValueError("the supervision pack has no training views")
    model = model if model is not None else SceneModel(cfg)
    rng = substream(cfg.seed, "sampling-stage1")
    order = _view_schedule(len(views), cfg.iters1, rng)
    masks = [losses.masks_from_labels(v.labels) for v in views]
    groups = model.stage1_groups()
    log = LossLog()
    for step, vi in enumerate(order):
        view = views[vi]
        try:
            with Tape() as tape:
                color, inst, _ = model.render(view.camera)
                l_rgb = losses.photometric_loss(color, view.image)
                if cfg.lambda_ins > 0 and len(masks[vi]) >= 2:
                    l_ins = losses.instance_contrastive_loss(
                        inst, masks[vi], cfg.tau, cfg.pixel_budget, rng, cfg.exclude_positive)
                    total = losses.stage1_total(l_rgb, l_ins, cfg.lambda_ins)
                    ins_val = l_ins.item()
                else:
                    total = l_rgb
                    ins_val = float("nan")
            dc.backward(tape, total)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at stage-1 step {step}: {exc}") from exc
        _guard(total.item(), step)
        for params, lr in groups:
            dc.adam_step(params, lr)
        log.add(step, l_rgb=l_rgb.item(), l_ins=ins_val, total=total.item())
        if progress is not None:
            progress(step, total.item())
    model.stage = 1
    return model, log


def render_instance_features(model: SceneModel, view: View) -> np.ndarray:
    """Frozen instance map of one view as a plain array, ``(H, W, d_ins)``."""
    return model.render(view.camera)[1].values.numpy()


def fit_language_rows(codebooks: CodebookPair, attention: GuidedAttention,
                      feats: list[np.ndarray], targets: list[np.ndarray], iters: int,
                      lambda_ent: float, lr: float, rng: np.random.Generator,
                      progress: Callable[[int, float], None] | None = None) -> LossLog:
    """Adam on codebooks, attention and lift; one feature/target group per step."""
    order = _view_schedule(len(feats), iters, rng)
    params = codebooks.parameters() + attention.parameters()
    log = LossLog()
    for step, vi in enumerate(order):
        try:
            with Tape() as tape:
                lang, probs = language_field(feats[vi], codebooks, attention)
                l_lang = losses.language_cosine_loss(lang, targets[vi])
                if probs is not None and lambda_ent > 0:
                    l_ent = probability_entropy(probs)
                    total = losses.stage2_total(l_lang, l_ent, lambda_ent)
                    ent_val = l_ent.item()
                else:
                    total = l_lang
                    ent_val = probability_entropy(probs).item() if probs is not None else float("nan")
            dc.backward(tape, total)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at stage-2 step {step}: {exc}") from exc
        _guard(total.item(), step)
        dc.adam_step(params, lr)
        log.add(step, l_lang=l_lang.item(), l_ent=ent_val, total=total.item())
        if progress is not None:
            progress(step, total.item())
    return log


def train_stage2(model: SceneModel, pack: SupervisionPack, cfg: TrainConfig | None = None,
                 progress: Callable[[int, float], None] | None = None):
    """Fit codebooks, attention and lift on frozen instance maps.

    Only ``cfg`` fields that concern stage 2 are read (iterations, loss
    weight, learning rate, attention variant); geometry comes from ``model``.
    """
    if model.stage < 1:
        raise ValueError("stage 2 needs a stage-1 model")
    cfg = cfg if cfg is not None else model.cfg
    if cfg is not model.cfg:
        model.cfg = dataclasses.replace(
            model.cfg, iters2=cfg.iters2, lambda_ent=cfg.lambda_ent, lr_codebook=cfg.lr_codebook)
    views = [v for v in pack.train_views if v.valid.any()]
    if not views:
        raise ValueError("no training view has labeled pixels")
    feats = []
    targets = []
    for v in views:
        f = render_instance_features(model, v)
        ok = v.valid.reshape(-1)
        feats.append(f.reshape(-1, f.shape[-1])[ok])
        targets.append(pack.language_map(v).reshape(-1, pack.table.dim)[ok])
    rng = substream(cfg.seed, "sampling-stage2")
    log = fit_language_rows(model.codebooks, model.attention, feats, targets, cfg.iters2,
                            cfg.lambda_ent, cfg.lr_codebook, rng, progress)
    model.stage = 2
    return model, log


# ---------------------------------------------------------------------------
# metrics used by training-quality checks


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def feature_consistency(features: np.ndarray, labels: np.ndarray, unlabeled: int = 255):
    """``(within, between)``: mean pairwise cosine inside each mask averaged over
    masks, and mean cosine between distinct mask-mean features."""
    d = features.shape[-1]
    flat = features.reshape(-1, d)
    lab = np.asarray(labels).reshape(-1)
    ids = [i for i in np.unique(lab) if i != unlabeled]
    within, means = [], []
    for i in ids:
        f = flat[lab == i]
        n = np.linalg.norm(f, axis=1, keepdims=True)
        u = f / np.where(n > 0, n, 1.0)
        if len(u) > 1:
            s = u.sum(axis=0)
            within.append((s @ s - (u * u).sum()) / (len(u) * (len(u) - 1)))
        means.append(f.mean(axis=0))
    means = np.array(means)
    mn = means / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-300)
    cos = mn @ mn.T
    off = cos[~np.eye(len(ids), dtype=bool)]
    return float(np.mean(within)), float(np.mean(off)) if off.size else 0.0


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: magic, u32 version, u32 section count, then per section
# u32 name length, name, u8 kind (0 float64 tensor, 1 utf-8 text),
# u32 ndim, u32 dims..., u64 payload length, payload; trailer u32 crc32 of
# everything before it.


def _pack_section(name: str, value) -> bytes:
    key = name.encode()
    if isinstance(value, str):
        body = value.encode()
        head = struct.pack("<I", len(key)) + key + struct.pack("<BI", 1, 0)
    else:
        arr = np.ascontiguousarray(value, dtype="<f8")
        body = arr.tobytes()
        head = struct.pack("<I", len(key)) + key + struct.pack("<BI", 0, arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<Q", len(body)) + body


def checkpoint_bytes(model: SceneModel) -> bytes:
    sections: list[tuple[str, object]] = [
        ("meta", json.dumps({"stage": model.stage, "config_hash": config_hash(model.cfg)},
                            sort_keys=True)),
        ("config", json.dumps(dataclasses.asdict(model.cfg), sort_keys=True)),
        ("anchor.positions", model.anchors.positions),
        ("attention.frozen_logits", model.attention.frozen_logits),
    ]
    for name, p in model.named_parameters().items():
        sections += [
            (f"param/{name}", p.data),
            (f"adam.m/{name}", p.m),
            (f"adam.v/{name}", p.v),
            (f"adam.step/{name}", np.array(float(p.step))),
        ]
    body = MAGIC + struct.pack("<II", VERSION, len(sections))
    body += b"".join(_pack_section(n, v) for n, v in sections)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: SceneModel, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def _parse(raw: bytes) -> dict[str, object]:
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError("corrupt checkpoint: checksum mismatch or truncated file")
    version, count = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    pos = 12
    out: dict[str, object] = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + klen].decode()
            pos += klen
            kind, ndim = struct.unpack_from("<BI", raw, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            (n,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            payload = raw[pos:pos + n]
            if len(payload) != n:
                raise CheckpointError("corrupt checkpoint: truncated section")
            pos += n
            out[name] = payload.decode() if kind == 1 else \
                np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(raw) - 4:
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return out


def load_checkpoint(path) -> SceneModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    sec = _parse(path.read_bytes())
    cfg = TrainConfig(**json.loads(sec["config"]))
    meta = json.loads(sec["meta"])
    if meta["config_hash"] != config_hash(cfg):
        raise CheckpointError("corrupt checkpoint: config hash mismatch")
    model = SceneModel(cfg)
    model.stage = int(meta["stage"])
    model.anchors.positions = sec["anchor.positions"]
    model.anchors.__post_init__()
    model.attention.frozen_logits = np.array(sec["attention.frozen_logits"])
    for name, p in model.named_parameters().items():
        try:
            p.assign(sec[f"param/{name}"])
            p.m = np.array(sec[f"adam.m/{name}"])
            p.v = np.array(sec[f"adam.v/{name}"])
            p.step = int(np.asarray(sec[f"adam.step/{name}"]).reshape(-1)[0])
        except KeyError as exc:
            raise CheckpointError(f"corrupt checkpoint: missing section {exc}") from exc
    return model
