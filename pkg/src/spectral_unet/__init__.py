"""Spectral U-Net: DTCWT down/up-sampling blocks and a numpy toy segmentation network."""

from .errors import DivergenceError, HD95Undefined, ShapeError
from .network import DownKind, ModelParams, NetworkConfig, UpKind, count_params_flops, init_params
from .trainer import TrainConfig, ablate, train
from .wavelets import WaveletKind, dtcwt_forward, dtcwt_inverse

__version__ = "0.1.0"

__all__ = [
    "DivergenceError", "HD95Undefined", "ShapeError",
    "DownKind", "ModelParams", "NetworkConfig", "UpKind", "count_params_flops", "init_params",
    "TrainConfig", "ablate", "train",
    "WaveletKind", "dtcwt_forward", "dtcwt_inverse",
]
