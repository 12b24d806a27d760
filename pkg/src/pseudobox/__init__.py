"""Pseudo bounding-box labels from caption Grad-CAM, and an open-vocabulary detector trained on them."""

from .boxes import Box, InvalidInputError, iou, nms
from .evaluation import Detection, GroundTruthSet, average_precision, generalized_eval
from .pseudo_label import ObjectVocabulary, PseudoBoxLabel, select_box
from .vlm_core import ModelConfig, ToyVLM

__version__ = "0.1.0"

__all__ = [
    "Box", "InvalidInputError", "iou", "nms", "Detection", "GroundTruthSet",
    "average_precision", "generalized_eval", "ObjectVocabulary", "PseudoBoxLabel",
    "select_box", "ModelConfig", "ToyVLM", "__version__",
]
