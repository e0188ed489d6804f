"""Instance-consistent Gaussian feature fields with a guided-attention language head.

Stage 1 distills per-Gaussian instance features from 2D masks with a
contrastive loss; stage 2 maps them to a language space through cross
attention over paired codebooks. Everything runs on a small NumPy autodiff
engine (:mod:`ovsplat.diffcore`).
"""

__version__ = "0.1.0"

from .rasterizer import Camera, FeatureMap, render_maps  # noqa: E402
from .synthscene import SceneConfig, SupervisionPack, build_pack, load_pack, save_pack  # noqa: E402
from .trainer import (SceneModel, TrainConfig, load_checkpoint, save_checkpoint,  # noqa: E402
                      train_stage1, train_stage2)

__all__ = [
    "__version__",
    "Camera",
    "FeatureMap",
    "render_maps",
    "SceneConfig",
    "SupervisionPack",
    "build_pack",
    "load_pack",
    "save_pack",
    "SceneModel",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "train_stage1",
    "train_stage2",
]
