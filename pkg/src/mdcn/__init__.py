"""Multi-scale detection with inception units in the deep layers of SSD."""

from .config import Config, parse_config
from .detect import Detector, postprocess
from .kitti import evaluate_detections, evaluate_model
from .multibox import generate_anchors, match, multibox_loss
from .netbuilder import assemble_model, count_parameters, receptive_field, summarize
from .network import Network
from .tensor import Tensor, load_mdt, save_mdt
from .trainer import Schedule, load_checkpoint, make_synthetic_dataset, save_checkpoint, train

__all__ = [
    "Config",
    "Detector",
    "Network",
    "Schedule",
    "Tensor",
    "assemble_model",
    "count_parameters",
    "evaluate_detections",
    "evaluate_model",
    "generate_anchors",
    "load_checkpoint",
    "load_mdt",
    "make_synthetic_dataset",
    "match",
    "multibox_loss",
    "parse_config",
    "postprocess",
    "receptive_field",
    "save_checkpoint",
    "save_mdt",
    "summarize",
    "train",
]
