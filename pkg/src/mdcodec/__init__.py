"""mdcodec: a trainable two-description image codec.

The codec compresses an image into two mutually redundant bitstreams
("descriptions").  Either one alone decodes to an acceptable side
reconstruction; both together decode to a better central reconstruction,
which makes the format robust to losing one stream in transit.
"""

__version__ = "0.1.0"

from .metrics import (  # noqa: F401
    MR_SSIM_WEIGHTS,
    MS_SSIM_WEIGHTS,
    LossBreakdown,
    mr_ssim,
    ms_ssim,
    ssim,
    total_loss,
)
from .networks import MDCodec, ModelConfig, load_model, save_checkpoint  # noqa: F401
from .quant import ScalarQuantizer  # noqa: F401
from .training import TrainConfig, train_loop  # noqa: F401
