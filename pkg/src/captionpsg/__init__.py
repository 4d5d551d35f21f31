"""Panoptic scene graphs from image captions.

Caption parsing, hierarchical region grouping, thresholded region/entity
grounding, low-rank segment merging, prompt-based labeling and the
triplet-recall evaluation harness, all on numpy.
"""

from .config import Config
from .grounder import fine_contrastive_loss, ground
from .grouper import ImageFeatures, group_forward
from .merger import lrr_recover, spectral_cluster
from .sgeval import PanopticSceneGraph, evaluate, match_recall
from .textgraph import TextGraph, parse_caption

__version__ = "0.1.0"

__all__ = [
    "Config",
    "ImageFeatures",
    "PanopticSceneGraph",
    "TextGraph",
    "evaluate",
    "fine_contrastive_loss",
    "ground",
    "group_forward",
    "lrr_recover",
    "match_recall",
    "parse_caption",
    "spectral_cluster",
]
