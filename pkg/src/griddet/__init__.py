"""griddet: a self-contained grid-based single-class object detection kit.

numpy-backed tensors with tape autograd, a 16-conv Mish/ReLU detector,
GIoU box losses, SGD with momentum and per-epoch learning-rate decay, an
offline 11x augmentation pipeline, centroid-based evaluation metrics, a
synthetic dataset generator, and a CLI tying it all together.
"""

from .activations import ActivationKind, mish, mish_grad, relu, relu_grad, sigmoid, softplus
from .boxes import BBox, giou, giou_loss, iou, nms
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, FormatError, GridDetError, UsageError
from .evaluation import ConfusionCounts, GroundTruthRegion, MetricReport, dice, evaluate, f1, f2, match_frame, precision, sensitivity
from .model import Network, NetworkConfig, build_network, decode_predictions, detect, forward, load_network_config, parse_network_config
from .tensor import Tape, Tensor, backward, conv2d, finite_difference_gradient, fully_connected, maxpool2d, softmax
from .training import LossBreakdown, RunConfig, SgdState, cross_entropy, detection_loss, lr_multiplier, sgd_step, train

__version__ = "0.1.0"
