"""Star, deformable-attention and EMA fruit detector in pure numpy."""
from .boxes import Detection, GroundTruthBox, iou, nms
from .errors import ConfigError, ContractError, DatasetError, ShapeError, WeightFormatError
from .metrics import EvalReport, evaluate, evaluate_dataset, f1, map_range, mean_ap
from .network import (
    Model, NetworkSpec, LAYER_TABLE, backbone_forward, build_model, detect, gradcam,
    head_decode, init_weights, neck_forward, param_count,
)
from .tensor import Tensor, backward
from .weights import WeightStore, load_weights, save_weights

__version__ = "0.1.0"
