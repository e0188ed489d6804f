"""Procedural teacher scenes and the supervision derived from them.

A teacher scene is a handful of well separated blobs, each made of a few
Gaussians sharing an instance id, a colour and a class. Rendering the
teacher gives ground-truth images; compositing one-hot instance payloads
gives hard instance masks; class embeddings (seeded random unit vectors)
stand in for text-encoder features.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .config import substream
from .gaussians import NeuralGaussianBatch
from .rasterizer import Camera, brute_force_reference

__all__ = [
    "SceneGenerationError",
    "SceneConfig",
    "TeacherInstance",
    "TeacherScene",
    "ClassEmbeddingTable",
    "View",
    "SupervisionPack",
    "generate_scene",
    "camera_rig",
    "render_ground_truth",
    "make_masks_and_language",
    "build_pack",
    "save_pack",
    "load_pack",
    "UNLABELED",
]

UNLABELED = 255
SCENE_FORMAT = "ovsplat-scene"
SCENE_VERSION = 1


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 7
    n_instances: int = 8
    n_classes: int = 8
    bounds: float = 1.0
    blob_radius: float = 0.25
    gaussians_per_instance: int = 4
    n_views: int = 12
    n_test_views: int = 2
    image_size: int = 64
    focal: float = 84.0
    camera_distance: float = 4.0
    elevation_deg: float = 30.0
    d_lang: int = 512
    mask_threshold: float = 0.5


@dataclass
class TeacherInstance:
    instance_id: int
    class_id: int
    center: np.ndarray
    color: np.ndarray
    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray


@dataclass
class TeacherScene:
    instances: list[TeacherInstance]
    bounds: float
    blob_radius: float

    @property
    def n_classes(self) -> int:
        return max((i.class_id for i in self.instances), default=-1) + 1

    def instance_of_gaussian(self) -> np.ndarray:
        return np.concatenate([np.full(len(i.means), i.instance_id) for i in self.instances]) \
            if self.instances else np.zeros(0, dtype=int)

    def class_of_instance(self) -> np.ndarray:
        return np.array([i.class_id for i in self.instances], dtype=int)

    def batch(self) -> NeuralGaussianBatch:
        if not self.instances:
            return NeuralGaussianBatch.from_arrays(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                                                   np.zeros((0, 4)), np.zeros((0, 3)))
        cat = lambda name: np.concatenate([getattr(i, name) for i in self.instances])  # noqa: E731
        colors = np.concatenate([np.tile(i.color, (len(i.means), 1)) for i in self.instances])
        return NeuralGaussianBatch.from_arrays(cat("means"), cat("opacities"), colors,
                                               cat("rotations"), cat("scales"))

    def to_dict(self) -> dict:
        return {
            "bounds": self.bounds,
            "blob_radius": self.blob_radius,
            "instances": [
                {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(i).items()}
                for i in self.instances
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherScene":
        insts = []
        for e in d["instances"]:
            insts.append(TeacherInstance(
                instance_id=int(e["instance_id"]), class_id=int(e["class_id"]),
                **{k: np.asarray(e[k], dtype=float) for k in
                   ("center", "color", "means", "rotations", "scales", "opacities")},
            ))
        return cls(insts, float(d["bounds"]), float(d["blob_radius"]))


def _distinct_colors(n: int, rng: np.random.Generator) -> np.ndarray:
    start = rng.uniform(0.0, 1.0)
    hues = (start + np.arange(n) / n) % 1.0
    order = rng.permutation(n)
    return np.array([colorsys.hsv_to_rgb(hues[o], 0.75, 0.9) for o in order])


def generate_scene(seed: int = 7, n_instances: int = 8, n_classes: int | None = None,
                   bounds: float = 1.0, blob_radius: float = 0.25,
                   gaussians_per_instance: int = 4, max_tries: int = 200) -> TeacherScene:
    """Blobs whose centres are at least three blob radii apart.

    Raises :class:`SceneGenerationError` when no layout is found within
    ``max_tries`` restarts.
    """
    if n_instances < 2:
        raise ValueError("need at least two instances")
    n_classes = n_instances if n_classes is None else n_classes
    if not 1 <= n_classes <= n_instances:
        raise ValueError("need 1 <= n_classes <= n_instances")
    rng = substream(seed, "scene")
    half = bounds - blob_radius
    if half <= 0:
        raise SceneGenerationError("bounds smaller than a blob")
    min_dist = 3.0 * blob_radius
    centers = None
    for _ in range(max_tries):
        placed: list[np.ndarray] = []
        for _ in range(50 * n_instances):
            c = rng.uniform(-half, half, 3)
            if all(np.linalg.norm(c - p) >= min_dist for p in placed):
                placed.append(c)
                if len(placed) == n_instances:
                    break
        if len(placed) == n_instances:
            centers = np.array(placed)
            break
    if centers is None:
        raise SceneGenerationError(
            f"could not place {n_instances} blobs of radius {blob_radius} in bounds {bounds}")

    colors = _distinct_colors(n_instances, rng)
    classes = np.concatenate([np.arange(n_classes),
                              rng.integers(0, n_classes, n_instances - n_classes)])
    classes = classes[rng.permutation(n_instances)]
    g = gaussians_per_instance
    instances = []
    for i in range(n_instances):
        offs = rng.normal(0.0, 0.4 * blob_radius, (g, 3))
        norms = np.linalg.norm(offs, axis=1, keepdims=True)
        offs = np.where(norms > 0.45 * blob_radius, offs * (0.45 * blob_radius / norms), offs)
        q = rng.normal(size=(g, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        instances.append(TeacherInstance(
            instance_id=i,
            class_id=int(classes[i]),
            center=centers[i],
            color=colors[i],
            means=centers[i] + offs,
            rotations=q,
            scales=rng.uniform(0.35, 0.6, (g, 3)) * blob_radius,
            opacities=np.full(g, 0.95),
        ))
    return TeacherScene(instances, bounds, blob_radius)


@dataclass
class ClassEmbeddingTable:
    """Unit class vectors with small pairwise cosines, rounded to float32 precision."""

    vectors: np.ndarray

    @classmethod
    def generate(cls, seed: int, n_classes: int, d: int = 512, max_abs_cos: float = 0.2,
                 max_tries: int = 10_000) -> "ClassEmbeddingTable":
        rng = substream(seed, "class-embeddings")
        rows: list[np.ndarray] = []
        tries = 0
        while len(rows) < n_classes:
            tries += 1
            if tries > max_tries:
                raise SceneGenerationError("could not sample near-orthogonal class embeddings")
            v = rng.normal(size=d)
            v = (v / np.linalg.norm(v)).astype(np.float32).astype(np.float64)
            if all(abs(v @ r) < max_abs_cos for r in rows):
                rows.append(v)
        return cls(np.array(rows).reshape(n_classes, d))

    @property
    def n_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def camera_rig(n_views: int, image_size: int, focal: float, distance: float,
               elevation_deg: float, phase: float = 0.0) -> list[Camera]:
    """Cameras on a circle around the origin, all looking at it."""
    el = np.deg2rad(elevation_deg)
    cams = []
    for k in range(n_views):
        az = 2.0 * np.pi * (k + phase) / n_views
        eye = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], focal, focal,
                                   image_size, image_size))
    return cams


def render_ground_truth(scene: TeacherScene, cameras: list[Camera]) -> list[np.ndarray]:
    batch = scene.batch()
    return [brute_force_reference(batch, cam)[0] for cam in cameras]


@dataclass
class View:
    camera: Camera
    image: np.ndarray      # (H, W, 3) in [0, 1], 8-bit quantised
    labels: np.ndarray     # (H, W) uint8 instance ids, 255 = unlabeled
    split: str = "train"

    @property
    def valid(self) -> np.ndarray:
        return self.labels != UNLABELED


@dataclass
class SupervisionPack:
    views: list[View]
    class_of_instance: np.ndarray
    table: ClassEmbeddingTable
    scene: TeacherScene | None = None
    config: SceneConfig = field(default_factory=SceneConfig)

    @property
    def train_views(self) -> list[View]:
        return [v for v in self.views if v.split == "train"]

    @property
    def test_views(self) -> list[View]:
        return [v for v in self.views if v.split == "test"]

    def class_labels(self, view: View) -> np.ndarray:
        """Per-pixel class ids, -1 where unlabeled."""
        out = np.full(view.labels.shape, -1, dtype=int)
        ok = view.valid
        out[ok] = self.class_of_instance[view.labels[ok]]
        return out

    def language_map(self, view: View) -> np.ndarray:
        """``(H, W, d_lang)`` targets: the instance's class embedding, zeros where invalid."""
        cls = self.class_labels(view)
        out = np.zeros(cls.shape + (self.table.dim,))
        ok = cls >= 0
        out[ok] = self.table.vectors[cls[ok]]
        return out


def make_masks_and_language(scene: TeacherScene, cameras: list[Camera],
                            table: ClassEmbeddingTable, threshold: float = 0.5,
                            images: list[np.ndarray] | None = None,
                            splits: list[str] | None = None) -> SupervisionPack:
    """Hard masks: a pixel belongs to the instance with the largest composited
    weight, provided that weight exceeds ``threshold``."""
    batch = scene.batch()
    inst = scene.instance_of_gaussian()
    n_inst = len(scene.instances)
    onehot = np.eye(n_inst)[inst] if n_inst else np.zeros((0, 1))
    views = []
    for k, cam in enumerate(cameras):
        if n_inst:
            weights, _ = brute_force_reference(batch, cam, payload=onehot)
            best = np.argmax(weights, axis=2)
            keep = np.take_along_axis(weights, best[:, :, None], axis=2)[:, :, 0] > threshold
            labels = np.where(keep, best, UNLABELED).astype(np.uint8)
        else:
            labels = np.full((cam.height, cam.width), UNLABELED, dtype=np.uint8)
        img = images[k] if images is not None else brute_force_reference(batch, cam)[0]
        img = formats.to_uint8(img) / 255.0
        views.append(View(cam, img, labels, splits[k] if splits else "train"))
    return SupervisionPack(views, scene.class_of_instance(), table, scene)


def build_pack(cfg: SceneConfig = SceneConfig()) -> SupervisionPack:
    """Scene, ground-truth renders and supervision for a config; pure in ``cfg``."""
    scene = generate_scene(cfg.seed, cfg.n_instances, cfg.n_classes, cfg.bounds,
                           cfg.blob_radius, cfg.gaussians_per_instance)
    table = ClassEmbeddingTable.generate(cfg.seed, cfg.n_classes, cfg.d_lang)
    cams = camera_rig(cfg.n_views, cfg.image_size, cfg.focal, cfg.camera_distance,
                      cfg.elevation_deg)
    splits = ["train"] * len(cams)
    if cfg.n_test_views:
        cams += camera_rig(cfg.n_test_views, cfg.image_size, cfg.focal, cfg.camera_distance,
                           cfg.elevation_deg, phase=0.5 * cfg.n_test_views / cfg.n_views)
        splits += ["test"] * cfg.n_test_views
    pack = make_masks_and_language(scene, cams, table, cfg.mask_threshold, splits=splits)
    pack.config = cfg
    return pack


def save_pack(pack: SupervisionPack, out_dir) -> Path:
    """Write ``scene.json`` plus per-view PPM / mask / language files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    counters = {"train": 0, "test": 0}
    for v in pack.views:
        prefix = "view" if v.split == "train" else "heldout"
        stem = f"{prefix}_{counters[v.split]:03d}"
        counters[v.split] += 1
        formats.write_ppm(out / f"{stem}.ppm", v.image)
        formats.write_mask(out / f"{stem}.mask", v.labels)
        formats.write_language_map(out / f"{stem}.lang", pack.language_map(v))
        views.append({
            "name": stem, "split": v.split, "camera": v.camera.to_dict(),
            "image": f"{stem}.ppm", "mask": f"{stem}.mask", "language": f"{stem}.lang",
        })
    formats.write_language_map(out / "classes.lang", pack.table.vectors[None])
    manifest = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "config": asdict(pack.config),
        "class_of_instance": pack.class_of_instance.tolist(),
        "class_embeddings": "classes.lang",
        "teacher": pack.scene.to_dict() if pack.scene is not None else None,
        "views": views,
    }
    (out / "scene.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_pack(scene_dir) -> SupervisionPack:
    root = Path(scene_dir)
    path = root / "scene.json"
    if not path.exists():
        raise FileNotFoundError(f"{root} has no scene.json")
    meta = json.loads(path.read_text())
    if meta.get("format") != SCENE_FORMAT:
        raise ValueError(f"{path}: not a scene manifest")
    if meta.get("version") != SCENE_VERSION:
        raise ValueError(f"{path}: unsupported scene version {meta.get('version')}")
    table = ClassEmbeddingTable(formats.read_language_map(root / meta["class_embeddings"])[0])
    views = []
    for e in meta["views"]:
        cam = Camera.from_dict(e["camera"])
        img = formats.read_ppm(root / e["image"])
        labels = formats.read_mask(root / e["mask"], cam.height, cam.width)
        views.append(View(cam, img, labels, e["split"]))
    teacher = TeacherScene.from_dict(meta["teacher"]) if meta.get("teacher") else None
    cfg = SceneConfig(**meta["config"])
    return SupervisionPack(views, np.asarray(meta["class_of_instance"], dtype=int), table,
                           teacher, cfg)
