"""
UNet with size-adaptive depth and resize-based skip connections.

Encoder level ``i`` (0-based) applies conv-bn-relu twice at
``base * 2**i`` channels, keeps the result as the skip tensor and
max-pools. The bottleneck is one more double-conv block at depth D (named
``enc{D}``). Each decoder level upsamples with a 2x2 stride-2 transposed
convolution, resizes (or center-crops) the skip tensor to the decoder's
spatial size, concatenates ``[skip, upsampled]`` and applies another
double-conv. A 1x1 convolution and a sigmoid produce per-pixel foreground
probabilities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import layers
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import DepthTooDeepError, FormatError, InvalidConfigError, ShapeMismatchError
from .tensor import Tensor, get_default_dtype

SKIP_MODES = ("resize", "center_crop")
BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 64
    depth: int = 4
    skip_mode: str = "resize"
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise InvalidConfigError("base_channels and in_channels must be >= 1")
        if self.out_channels != 1:
            raise InvalidConfigError("only a single-channel binary head is supported")
        if self.skip_mode not in SKIP_MODES:
            raise InvalidConfigError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfigError(str(exc)) from None


def max_depth(h: int, w: int) -> int:
    """Largest depth admissible for an h x w input."""
    d = 0
    while (2 ** (d + 1)) <= min(h, w) and h % 2 ** (d + 1) == 0 and w % 2 ** (d + 1) == 0:
        d += 1
    return d


def validate_depth(h: int, w: int, depth: int) -> None:
    """Raise DepthTooDeepError unless ``depth`` halvings fit the input.

    Requires 2**depth <= min(h, w), i.e. depth <= floor(log2(min(h, w))),
    and both sides divisible by 2**depth so every max-pool sees even sizes.
    """
    if h < 1 or w < 1:
        raise InvalidConfigError(f"image size must be positive, got {h}x{w}")
    if depth < 1:
        raise InvalidConfigError(f"depth must be >= 1, got {depth}")
    f = 2 ** depth
    if f > min(h, w) or h % f or w % f:
        limit = max_depth(h, w)
        raise DepthTooDeepError(
            f"depth {depth} too deep for {h}x{w} input (maximum admissible depth is {limit})", limit
        )


def parameter_names(config: UNetConfig) -> list[str]:
    """Every tensor name of a model with this config, in canonical order."""
    def block(prefix):
        names = []
        for k in (1, 2):
            names += [f"{prefix}.conv{k}.weight", f"{prefix}.conv{k}.bias"]
            names += [f"{prefix}.bn{k}.{f}" for f in BN_FIELDS]
        return names

    names = []
    for i in range(config.depth + 1):
        names += block(f"enc{i}")
    for i in reversed(range(config.depth)):
        names.append(f"up{i}.deconv.weight")
        names += block(f"dec{i}")
    names += ["head.weight", "head.bias"]
    return names


def parameter_shapes(config: UNetConfig) -> dict[str, tuple]:
    shapes = {}

    def block(prefix, cin, cout):
        shapes[f"{prefix}.conv1.weight"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.conv1.bias"] = (cout,)
        shapes[f"{prefix}.conv2.weight"] = (cout, cout, 3, 3)
        shapes[f"{prefix}.conv2.bias"] = (cout,)
        for k in (1, 2):
            for f in BN_FIELDS:
                shapes[f"{prefix}.bn{k}.{f}"] = (cout,)

    cin = config.in_channels
    for i in range(config.depth + 1):
        block(f"enc{i}", cin, config.channels(i))
        cin = config.channels(i)
    for i in reversed(range(config.depth)):
        shapes[f"up{i}.deconv.weight"] = (config.channels(i + 1), config.channels(i), 2, 2)
        block(f"dec{i}", 2 * config.channels(i), config.channels(i))
    shapes["head.weight"] = (1, config.base_channels, 1, 1)
    shapes["head.bias"] = (1,)
    return {name: shapes[name] for name in parameter_names(config)}


class UNetModel:
    """A config plus its named tensors (learnable parameters and batch-norm running stats)."""

    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def bn_state(self, prefix: str) -> layers.BatchNorm2dState:
        p = self.params
        return layers.BatchNorm2dState(
            gamma=p[f"{prefix}.gamma"], beta=p[f"{prefix}.beta"],
            running_mean=p[f"{prefix}.running_mean"], running_var=p[f"{prefix}.running_var"],
        )

    def __call__(self, x, training: bool = False) -> Tensor:
        return unet_forward(self, x, training)


def _is_running_stat(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def build_unet(config: UNetConfig, seed: int = 0, dtype=None) -> UNetModel:
    """Fresh model: He-normal conv weights, zero biases, identity batch norm."""
    dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            if name.startswith("up"):
                fan_in = shape[0] * shape[2] * shape[3]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".gamma") or name.endswith(".running_var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=not _is_running_stat(name), name=name)
    return UNetModel(config, params)


def _double_conv(model: UNetModel, prefix: str, x: Tensor, training: bool) -> Tensor:
    p = model.params
    for k in (1, 2):
        x = layers.conv2d(x, p[f"{prefix}.conv{k}.weight"], p[f"{prefix}.conv{k}.bias"], stride=1, padding=1)
        x = layers.batchnorm2d(x, model.bn_state(f"{prefix}.bn{k}"), training)
        x = layers.relu(x)
    return x


def unet_forward(model: UNetModel, x, training: bool = False,
                 skip_hook: Optional[Callable[[int, Tensor], Tensor]] = None) -> Tensor:
    """Run the network; returns probabilities of shape (N, 1, H, W).

    ``skip_hook(level, skip)`` may replace a skip tensor before it is merged;
    it exists for instrumentation (e.g. checking that skips are live).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeMismatchError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
    validate_depth(x.shape[2], x.shape[3], cfg.depth)

    skips = []
    for i in range(cfg.depth):
        x = _double_conv(model, f"enc{i}", x, training)
        skips.append(x)
        x = layers.maxpool2d(x)
    x = _double_conv(model, f"enc{cfg.depth}", x, training)

    for i in reversed(range(cfg.depth)):
        x = layers.conv_transpose2d(x, model.params[f"up{i}.deconv.weight"], stride=2)
        skip = skips[i]
        if skip_hook is not None:
            skip = skip_hook(i, skip)
        h, w = x.shape[2:]
        if cfg.skip_mode == "resize":
            skip = layers.resize_bilinear(skip, h, w)
        else:
            skip = layers.center_crop(skip, h, w)
        x = layers.concat_channels(skip, x)
        x = _double_conv(model, f"dec{i}", x, training)

    x = layers.conv2d(x, model.params["head.weight"], model.params["head.bias"])
    return layers.sigmoid(x)


def save_weights(model: UNetModel, path, extra_tensors: Optional[dict] = None, **meta) -> None:
    """Write model tensors (plus optional extra tensors) and metadata to ``path``."""
    tensors = dict(model.state_arrays())
    if extra_tensors:
        tensors.update(extra_tensors)
    header = {"kind": "unetseg", "config": model.config.to_dict(), **meta}
    write_checkpoint(path, tensors, header)


def model_from_arrays(config: UNetConfig, arrays: dict[str, np.ndarray]) -> UNetModel:
    """Materialize a model from named arrays, checking names and shapes against ``config``."""
    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in arrays:
            raise ShapeMismatchError(f"missing tensor {name!r} (expected shape {shape})")
        if tuple(arrays[name].shape) != shape:
            raise ShapeMismatchError(f"tensor {name!r} has shape {tuple(arrays[name].shape)}, expected {shape}")
    model_names = set(expected)
    for name in arrays:
        if name not in model_names and not name.endswith((".adam_m", ".adam_v")):
            raise ShapeMismatchError(f"unexpected tensor {name!r} not defined by the config")
    params = {
        name: Tensor(arrays[name].copy(), requires_grad=not _is_running_stat(name), name=name)
        for name in expected
    }
    return UNetModel(config, params)


def load_weights(path, expected_config: Optional[UNetConfig] = None) -> UNetModel:
    """Load a model written by :func:`save_weights` (or a training checkpoint)."""
    meta, arrays = read_checkpoint(path)
    try:
        stored = UNetConfig.from_dict(meta["config"])
    except (KeyError, TypeError, InvalidConfigError) as exc:
        raise FormatError(f"{path}: missing or invalid model config ({exc})") from None
    config = expected_config or stored
    if expected_config is not None and expected_config != stored:
        for key, value in expected_config.to_dict().items():
            if stored.to_dict()[key] != value:
                raise ShapeMismatchError(f"config field {key!r}: file has {stored.to_dict()[key]!r}, expected {value!r}")
    return model_from_arrays(config, arrays)
