"""From-scratch UNet binary segmentation on a small numpy autodiff core."""

from .errors import UNetSegError
from .losses import LossConfig, dice_coefficient, mixed_loss
from .tensor import Tape, Tensor, backward, default_dtype, grad_check
from .unet import UNetConfig, UNetModel, build_unet, load_weights, save_weights, unet_forward, validate_depth

__version__ = "0.1.0"

__all__ = [
    "LossConfig",
    "Tape",
    "Tensor",
    "UNetConfig",
    "UNetModel",
    "UNetSegError",
    "backward",
    "build_unet",
    "default_dtype",
    "dice_coefficient",
    "grad_check",
    "load_weights",
    "mixed_loss",
    "save_weights",
    "unet_forward",
    "validate_depth",
]
