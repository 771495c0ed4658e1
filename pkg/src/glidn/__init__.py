"""Graph attention over local (per-frame) and global (whole-video) human-object graphs,
with distillation between the two contexts."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, grad_check, no_grad
from .context import ClassifierHead, GraphMask, Node, Frame, VideoSample, global_mask, local_mask
from .distill import DistillConfig, distill_loss, kl_distill, l2_distill
from .estimators import DistilledGLIDNClassifier, GLIDNClassifier, MutualLearningClassifier
from .gat import GatParams, attention, gat_layer, gat_stack
from .metrics import accuracy, average_precision, confusion_matrix, mean_average_precision
from .synthdata import GenConfig, Rng, generate, read_jsonl, splitmix64, write_jsonl
from .train import TrainConfig, loocv, train_dml, train_student, train_teacher

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad",
    "ClassifierHead", "GraphMask", "Node", "Frame", "VideoSample", "global_mask", "local_mask",
    "DistillConfig", "distill_loss", "kl_distill", "l2_distill",
    "GLIDNClassifier", "DistilledGLIDNClassifier", "MutualLearningClassifier",
    "GatParams", "attention", "gat_layer", "gat_stack",
    "accuracy", "average_precision", "confusion_matrix", "mean_average_precision",
    "GenConfig", "Rng", "generate", "read_jsonl", "splitmix64", "write_jsonl",
    "TrainConfig", "loocv", "train_dml", "train_student", "train_teacher",
]
