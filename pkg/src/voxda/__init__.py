"""Single-view 3D voxel reconstruction with unsupervised domain adaptation.

Modules: ``tensor`` (reverse-mode autodiff), ``losses`` (reconstruction, CORAL,
MMD, domain and voxel-class terms), ``model`` (encoder/decoder/refiner and
heads), ``data`` (synthetic two-domain dataset), ``metrics`` (IoU, domain
confusion, PCA), ``trainer`` and ``cli``.
"""
from .estimator import PCAEmbedding, VoxelDAReconstructor
from .losses import LossWeights
from .metrics import EvalConfig, iou
from .model import NetworkConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, method_weights, train

__version__ = "0.1.0"

__all__ = [
    "EvalConfig", "LossWeights", "NetworkConfig", "PCAEmbedding", "TrainConfig", "VoxelDAReconstructor",
    "evaluate", "iou", "load_checkpoint", "method_weights", "save_checkpoint", "train",
]
