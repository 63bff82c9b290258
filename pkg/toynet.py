"""
Toy network module for boxboost
Two small convolutional segmentation networks with hand-written forward and backward passes
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from errors import ConfigError, NumericalError, ShapeError, UsageError
from losses import FeatureMap
from mask_core import ProbMap

logger = logging.getLogger(__name__)

ARCH_IDS = ("A", "B")


@dataclass(frozen=True)
class NetworkConfig:
    """
    Architecture of one network

    Stage s (s > 0 starts with 2x2 average pooling) applies one tanh convolution with
    kernels[s], dilations[s] and widths[s] output channels, then a 1x1 head to one
    channel. Head outputs are upsampled to input resolution and summed into the logits.
    """

    arch_id: str = "A"
    widths: Tuple[int, ...] = (8, 16, 16)
    kernels: Tuple[int, ...] = (3, 3, 3)
    dilations: Tuple[int, ...] = (1, 1, 1)
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.arch_id not in ARCH_IDS:
            raise ConfigError(f"arch_id must be one of {ARCH_IDS}, got {self.arch_id!r}")
        if not (len(self.widths) == len(self.kernels) == len(self.dilations) >= 1):
            raise ConfigError("widths, kernels and dilations need one entry per stage")
        if any(w < 1 for w in self.widths) or self.in_channels < 1:
            raise ConfigError("Channel counts must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"Kernel sizes must be odd, got {self.kernels}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"Dilations must be positive, got {self.dilations}")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.depth - 1)

    @classmethod
    def arch_a(cls, seed: int = 0) -> "NetworkConfig":
        """Three stages of small 3x3 kernels"""
        return cls("A", (8, 16, 16), (3, 3, 3), (1, 1, 1), 1, seed)

    @classmethod
    def arch_b(cls, seed: int = 0) -> "NetworkConfig":
        """Two stages: a wide 5x5 kernel, then a dilated 3x3 kernel"""
        return cls("B", (12, 12), (5, 3), (1, 2), 1, seed)

    @classmethod
    def preset(cls, arch_id: str, seed: int = 0) -> "NetworkConfig":
        if arch_id == "A":
            return cls.arch_a(seed)
        if arch_id == "B":
            return cls.arch_b(seed)
        raise ConfigError(f"Unknown architecture {arch_id!r}")

    def with_seed(self, seed: int) -> "NetworkConfig":
        return NetworkConfig(self.arch_id, self.widths, self.kernels, self.dilations,
                             self.in_channels, seed)

    def to_dict(self) -> Dict:
        data = asdict(self)
        for key in ("widths", "kernels", "dilations"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkConfig":
        known = {"arch_id", "widths", "kernels", "dilations", "in_channels", "seed"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown network config keys: {sorted(unknown)}")
        return cls(**data)


def receptive_radius(cfg: NetworkConfig) -> int:
    """Largest Chebyshev distance between an output pixel and an input pixel that can affect it"""
    radius, jump, worst = 0, 1, 0
    for s in range(cfg.depth):
        if s > 0:
            jump *= 2
        radius += cfg.dilations[s] * (cfg.kernels[s] - 1) // 2 * jump
        worst = max(worst, radius + jump - 1)
    return worst


def are_distinct(a: NetworkConfig, b: NetworkConfig) -> bool:
    """True when the two architectures differ in depth and receptive field"""
    return a.depth != b.depth and receptive_radius(a) != receptive_radius(b)


def param_names(cfg: NetworkConfig) -> List[str]:
    names = []
    for s in range(cfg.depth):
        names += [f"conv{s}.w", f"conv{s}.b", f"head{s}.w", f"head{s}.b"]
    return names


def param_shapes(cfg: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    in_ch = cfg.in_channels
    for s, (width, k) in enumerate(zip(cfg.widths, cfg.kernels)):
        shapes[f"conv{s}.w"] = (width, in_ch, k, k)
        shapes[f"conv{s}.b"] = (width,)
        shapes[f"head{s}.w"] = (1, width)
        shapes[f"head{s}.b"] = (1,)
        in_ch = width
    return shapes


@dataclass
class NetworkState:
    """Parameters of one network plus its optimizer step counter"""

    config: NetworkConfig
    params: Dict[str, np.ndarray]
    step: int = 0
    version: int = 0

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(self.params) != set(expected):
            raise ShapeError(f"Parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"Parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def update(self, params: Dict[str, np.ndarray]):
        """Install new parameter values; invalidates earlier forward caches"""
        for name, value in params.items():
            if value.shape != self.params[name].shape:
                raise ShapeError(f"Parameter {name} cannot change shape")
            if not np.isfinite(value).all():
                raise NumericalError(f"Parameter {name} became non-finite at step {self.step}")
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in self.params}
        self.version += 1

    def copy(self) -> "NetworkState":
        return NetworkState(self.config, {k: v.copy() for k, v in self.params.items()},
                            self.step, self.version)


def init_state(cfg: NetworkConfig) -> NetworkState:
    """Uniform He initialization from cfg.seed; every bias starts at zero"""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
    return NetworkState(cfg, params)


# ==================== LAYERS ====================

def _conv_forward(xpad: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int,
                  out_hw: Tuple[int, int]) -> np.ndarray:
    height, width = out_hw
    k = w.shape[2]
    out = np.zeros((w.shape[0], xpad.shape[0], height, width))
    for ki in range(k):
        for kj in range(k):
            patch = xpad[:, :, ki * dilation:ki * dilation + height, kj * dilation:kj * dilation + width]
            out += np.tensordot(w[:, :, ki, kj], patch, axes=([1], [1]))
    return out.transpose(1, 0, 2, 3) + b[None, :, None, None]


def _conv_backward(xpad: np.ndarray, w: np.ndarray, dout: np.ndarray, dilation: int,
                   need_input: bool):
    height, width = dout.shape[2:]
    k = w.shape[2]
    dw = np.zeros_like(w)
    dxpad = np.zeros_like(xpad) if need_input else None
    for ki in range(k):
        for kj in range(k):
            rows = slice(ki * dilation, ki * dilation + height)
            cols = slice(kj * dilation, kj * dilation + width)
            patch = xpad[:, :, rows, cols]
            dw[:, :, ki, kj] = np.tensordot(dout, patch, axes=([0, 2, 3], [0, 2, 3]))
            if need_input:
                dxpad[:, :, rows, cols] += np.tensordot(w[:, :, ki, kj], dout, axes=([0], [1])).transpose(1, 0, 2, 3)
    return dw, dout.sum(axis=(0, 2, 3)), dxpad


def _pool(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool_backward(dout: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0


def _upsample(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def _upsample_backward(dout: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return dout
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


# ==================== FORWARD / BACKWARD ====================

@dataclass
class ForwardCache:
    """Activations kept by forward for the matching backward call"""

    version: int
    padded_inputs: List[np.ndarray] = field(default_factory=list)
    activations: List[np.ndarray] = field(default_factory=list)


def _as_batch(images: np.ndarray, cfg: NetworkConfig) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"Expected N x {cfg.in_channels} x H x W input, got shape {np.shape(images)}")
    factor = cfg.downsample_factor
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(
            f"Input size {x.shape[2]}x{x.shape[3]} must be a multiple of {factor} "
            f"for architecture {cfg.arch_id}"
        )
    return x


def forward(state: NetworkState, images: np.ndarray) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    """
    Run the network on a batch

    Args:
        state: Network parameters
        images: N x C x H x W, C x H x W or H x W array

    Returns:
        (logits, probabilities, cache); logits and probabilities are N x 1 x H x W
    """
    cfg = state.config
    x = _as_batch(images, cfg)
    cache = ForwardCache(state.version)
    logits = np.zeros((x.shape[0], 1, x.shape[2], x.shape[3]))

    h = x
    for s in range(cfg.depth):
        if s > 0:
            h = _pool(h)
        pad = cfg.dilations[s] * (cfg.kernels[s] - 1) // 2
        xpad = np.pad(h, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        z = _conv_forward(xpad, state.params[f"conv{s}.w"], state.params[f"conv{s}.b"],
                          cfg.dilations[s], h.shape[2:])
        h = np.tanh(z)
        side = np.tensordot(state.params[f"head{s}.w"], h, axes=([1], [1])).transpose(1, 0, 2, 3)
        side = side + state.params[f"head{s}.b"][0]
        logits += _upsample(side, 2 ** s)
        cache.padded_inputs.append(xpad)
        cache.activations.append(h)

    if not np.isfinite(logits).all():
        raise NumericalError(f"Non-finite logits from architecture {cfg.arch_id}")
    return logits, expit(logits), cache


def backward(state: NetworkState, cache: ForwardCache, dlogits: np.ndarray,
             frozen: Iterable[str] = ()) -> Dict[str, np.ndarray]:
    """
    Parameter gradients given the loss gradient w.r.t. the logits

    Args:
        state: Network the cache was produced with
        cache: ForwardCache from forward() on the current parameters
        dlogits: N x 1 x H x W upstream gradient
        frozen: Parameter names whose gradient is forced to zero

    Returns:
        Dict of gradients, same names and shapes as state.params
    """
    if cache.version != state.version:
        raise UsageError("Forward cache is stale: parameters changed after forward()")
    cfg = state.config
    grads = {}
    dh_from_below = None

    for s in reversed(range(cfg.depth)):
        h = cache.activations[s]
        dside = _upsample_backward(dlogits, 2 ** s)
        grads[f"head{s}.w"] = np.tensordot(dside[:, 0], h, axes=([0, 1, 2], [0, 2, 3]))[None, :]
        grads[f"head{s}.b"] = np.array([dside.sum()])

        dh = state.params[f"head{s}.w"][0][None, :, None, None] * dside
        if dh_from_below is not None:
            dh = dh + _pool_backward(dh_from_below)
        dz = dh * (1.0 - h ** 2)

        dw, db, dxpad = _conv_backward(cache.padded_inputs[s], state.params[f"conv{s}.w"], dz,
                                       cfg.dilations[s], need_input=s > 0)
        grads[f"conv{s}.w"] = dw
        grads[f"conv{s}.b"] = db
        if s > 0:
            pad = cfg.dilations[s] * (cfg.kernels[s] - 1) // 2
            height, width = dxpad.shape[2] - 2 * pad, dxpad.shape[3] - 2 * pad
            dh_from_below = dxpad[:, :, pad:pad + height, pad:pad + width]

    for name in frozen:
        grads[name] = np.zeros_like(state.params[name])
    return grads


def predict(state: NetworkState, image: np.ndarray) -> ProbMap:
    """Probability map for a single H x W (or C x H x W) image"""
    _, prob, _ = forward(state, image)
    return ProbMap(prob[0, 0])


def feature_pair(state_a: NetworkState, state_b: NetworkState,
                 image: np.ndarray) -> Tuple[FeatureMap, FeatureMap]:
    """Pre-sigmoid logit maps of both networks for the same image"""
    logits_a, _, _ = forward(state_a, image)
    logits_b, _, _ = forward(state_b, image)
    if logits_a.shape != logits_b.shape:
        raise ShapeError(f"Feature shapes differ: {logits_a.shape} vs {logits_b.shape}")
    return FeatureMap(logits_a[0]), FeatureMap(logits_b[0])
