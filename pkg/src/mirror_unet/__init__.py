"""Twin-branch 3D U-Net with tied stages and auxiliary tasks for multimodal tumour segmentation."""
from .config import LossWeights, ModelConfig, TrainConfig
from .model import BranchOutputs, MirrorUNet, build_model, classify, forward, fuse_logits, shared_representation

__all__ = [
    "BranchOutputs",
    "LossWeights",
    "MirrorUNet",
    "ModelConfig",
    "TrainConfig",
    "build_model",
    "classify",
    "forward",
    "fuse_logits",
    "shared_representation",
]
