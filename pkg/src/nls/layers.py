"""Composable layers, the gradient reversal layer, and the fixed architectures.

A `LayerStack` is an ordered list of named layers with a static shape check at
construction time and stable dotted parameter names ("conv1.w", "fc1.b").
Builders return the small MNIST backbone split into a feature extractor and a
task head, plus the 3-layer MLP used as a nuisance-factor classifier head.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import child_rng
from .tensor import ShapeError, Tensor


def _uniform_fan_in(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    # bound 1/sqrt(fan_in): keeps init logits near-uniform so untrained CE
    # starts at ln K, which downstream checks rely on
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Conv2d:
    """Valid cross-correlation with bias, square kernel."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        w = _uniform_fan_in((out_channels, in_channels, kernel, kernel),
                             in_channels * kernel * kernel, rng)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_channels), requires_grad=True)

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.conv2d(x, self.w, self.stride), self.b)

    def out_shape(self, s):
        n, c, h, w = s
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"conv kernel {self.kernel} larger than input {h}x{w}")
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        return (n, self.out_channels, ho, wo)


class ReLU:
    def params(self):
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def out_shape(self, s):
        return s


class MaxPool2:
    def params(self):
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return T.maxpool2(x)

    def out_shape(self, s):
        n, c, h, w = s
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        return (n, c, h // 2, w // 2)


class Flatten:
    def params(self):
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return T.flatten(x)

    def out_shape(self, s):
        n = s[0]
        d = 1
        for k in s[1:]:
            d *= k
        return (n, d)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Tensor(_uniform_fan_in((in_dim, out_dim), in_dim, rng),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.w), self.b)

    def out_shape(self, s):
        n, d = s
        if d != self.in_dim:
            raise ShapeError(f"linear expects input dim {self.in_dim}, got {d}")
        return (n, self.out_dim)


class LayerStack:
    """Ordered named layers; shapes are checked once at construction.

    Parameter names are "<layer>.<param>" and stay stable for the life of the
    stack, which is what checkpoint save/load keys on.
    """

    def __init__(self, named_layers, in_shape):
        names = [name for name, _ in named_layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in stack: {names}")
        self.named_layers = list(named_layers)
        self.in_shape = tuple(in_shape)
        shape = self.in_shape
        for name, layer in self.named_layers:
            shape = layer.out_shape(shape)  # raises ShapeError on a bad chain
        self.out_shape = shape

    def __call__(self, x: Tensor) -> Tensor:
        for _, layer in self.named_layers:
            x = layer(x)
        return x

    def params(self):
        """Ordered dict of dotted name -> parameter Tensor."""
        out = {}
        for lname, layer in self.named_layers:
            for pname, p in layer.params():
                out[f"{lname}.{pname}"] = p
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())


@dataclass(frozen=True)
class GrlConfig:
    """Reversal coefficient for the gradient reversal layer."""

    alpha: float = 0.5

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")


def grl_forward(x: Tensor, cfg: GrlConfig) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -alpha."""
    return T.grl(x, cfg.alpha)


def grl_backward_effect(upstream_grad: np.ndarray, cfg: GrlConfig) -> np.ndarray:
    """The backward rule in isolation: -alpha * upstream, elementwise."""
    return -cfg.alpha * np.asarray(upstream_grad, dtype=T.DTYPE)


ARCHITECTURES = ("mnist-small",)


def build_backbone(arch: str, seed: int = 0):
    """Return (features, task_head) LayerStacks for a registered architecture.

    "mnist-small": conv 32@5x5, relu, pool, conv 64@5x5, relu, pool, flatten,
    linear to 1024, relu (this 1024-d vector is the feature); task head is a
    single linear 1024 -> 10. Spatial walk 28 -> 24 -> 12 -> 8 -> 4.
    """
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; known: {list(ARCHITECTURES)}")

    def rng(layer):
        return child_rng(seed, "init", arch, layer)

    features = LayerStack(
        [
            ("conv1", Conv2d(1, 32, 5, rng("conv1"))),
            ("relu1", ReLU()),
            ("pool1", MaxPool2()),
            ("conv2", Conv2d(32, 64, 5, rng("conv2"))),
            ("relu2", ReLU()),
            ("pool2", MaxPool2()),
            ("flat", Flatten()),
            ("fc1", Linear(64 * 4 * 4, 1024, rng("fc1"))),
            ("relu3", ReLU()),
        ],
        in_shape=(None, 1, 28, 28),
    )
    task_head = LayerStack([("fc2", Linear(1024, 10, rng("fc2")))],
                           in_shape=(None, 1024))
    return features, task_head


def build_nuisance_head(feature_dim: int, num_classes: int, seed: int = 0,
                        tag: str = "head") -> LayerStack:
    """3-layer MLP feature_dim -> 1024 -> 1024 -> num_classes with relu between.

    `tag` keeps init streams of different heads (one per nuisance factor)
    independent of each other and of the backbone.
    """
    if feature_dim < 1:
        raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")

    def rng(layer):
        return child_rng(seed, "init", "nuisance", tag, layer)

    return LayerStack(
        [
            ("fc1", Linear(feature_dim, 1024, rng("fc1"))),
            ("relu1", ReLU()),
            ("fc2", Linear(1024, 1024, rng("fc2"))),
            ("relu2", ReLU()),
            ("fc3", Linear(1024, num_classes, rng("fc3"))),
        ],
        in_shape=(None, feature_dim),
    )
