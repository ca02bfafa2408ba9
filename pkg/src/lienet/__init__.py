"""Ultra-light low-light image enhancement built on dynamic shifted convolutions."""

from lienet.dsconv import DSConvParams, dsconv_backward, dsconv_forward, init_params
from lienet.loss import LossBreakdown, LossWeights, total_loss
from lienet.network import (
    Network,
    NetworkConfig,
    build_network,
    load_checkpoint,
    net_backward,
    net_forward,
    net_param_count,
    save_checkpoint,
)
from lienet.tensor import StructuralError

__version__ = "0.1.0"
