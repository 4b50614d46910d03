"""Non-neural core of a top-down aerial human pose estimation system."""
from .geometry import Box, NwdConfig, PatchTransform, ContractError, iou, giou, nwd
from .keypoints import KeypointSet
from .heatmap import CodecConfig, HeatmapStack

__version__ = "0.1.0"
