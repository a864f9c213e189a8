"""Weakly supervised trend change detection in plain numpy.

A Siamese U-shaped network is trained from binary change labels alone.  The
common branch yields a change map through the softmatch distance; the two
independent branches learn a fixed background channel, and comparing which
channel each time step highlights recovers appear / disappear / transform
trends without ever seeing a trend label.
"""

from .config import RunConfig, load_config
from .distances import DistanceMap, cosine_dist, distance, euclid_dist, softmatch
from .errors import ConfigError, DataError, DimensionError, DivergenceError, GenerationError, TrendMatchError
from .metrics import Confusion, MetricRow, accumulate, finalize, per_trend
from .network import NetConfig, TrendNet, forward, init_model, parameter_count
from .supervision import LossReport, background_loss, bce_map_loss, total_loss
from .synthdata import SamplePair, SceneSpec, augment, generate, read_dataset, write_dataset
from .tensor import Tensor, no_grad
from .trend import decode_change, decode_trend, trend_to_change

__version__ = "0.1.0"

__all__ = [
    "Confusion", "ConfigError", "DataError", "DimensionError", "DistanceMap", "DivergenceError", "GenerationError",
    "LossReport", "MetricRow", "NetConfig", "RunConfig", "SamplePair", "SceneSpec", "Tensor", "TrendMatchError",
    "TrendNet", "accumulate", "augment", "background_loss", "bce_map_loss", "cosine_dist", "decode_change",
    "decode_trend", "distance", "euclid_dist", "finalize", "forward", "generate", "init_model", "load_config",
    "no_grad", "parameter_count", "per_trend", "read_dataset", "softmatch", "total_loss", "trend_to_change",
    "write_dataset",
]
