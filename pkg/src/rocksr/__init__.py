"""Super-resolution of grayscale rock micro-CT slices with SR-Resnet, EDSR and WDSR.

Everything (layers, reverse-mode gradients, Adam, resampling) is plain
NumPy/SciPy; arrays are float NCHW, images are 2-D floats in ``[0, 1]``.
"""
from .imaging import BicubicUpsampler, SamplePair, make_lr, resize
from .io import read_image, write_image
from .metrics import mse, psnr
from .models import ModelSpec, build_model, count_parameters, forward
from .trainer import TrainConfig, fit, lr_at, validate

__all__ = [
    "BicubicUpsampler", "ModelSpec", "SamplePair", "TrainConfig", "build_model",
    "count_parameters", "fit", "forward", "lr_at", "make_lr", "mse", "psnr", "read_image",
    "resize", "validate", "write_image",
]
__version__ = "0.1.0"
