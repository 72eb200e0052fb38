"""Switchable atrous convolution and recursive feature pyramids, self-contained.

A small tape-based autodiff core (rank-4 NCHW tensors over numpy) carries a
per-location switchable dual-rate convolution, a feedback-unrolled feature
pyramid, a toy bottleneck backbone with checkpoint conversion, and a
synthetic dense-prediction training harness.
"""

from .backbone import Backbone, BackboneConfig, Block, Stage, backbone_forward, convert_backbone_to_sac
from .checkpoint import LoadReport, load_checkpoint, load_state, save_checkpoint, state_dict
from .errors import (CheckpointError, ConfigError, DimensionError, GeometryError,
                     TrainingDiverged, UsageError)
from .harness import (DensePredictor, Metrics, SyntheticScene, TrainConfig, build_model,
                      evaluate, export_switch_map, gen_dataset, train)
from .ops import (ConvParams, add, avg_pool, bce_with_logits, concat_channels, conv2d,
                  effective_kernel_size, global_avg_pool, lerp, mul, relu, sigmoid, sub,
                  sum_all, upsample)
from .optim import SGD, sgd_step
from .rfp import (AsppConnector, Fpn, FusionModule, RfpModel, aspp_connect, fpn_forward,
                  fuse_features, rfp_forward)
from .sac import (GlobalContext, SacConv, SwitchFunction, capture_switch_maps,
                  convert_conv_to_sac, global_context_apply, sac_forward, switch_eval)
from .tensor import Tape, Tensor, active_tape, backward, fresh_tape, no_grad

__version__ = "0.1.0"
