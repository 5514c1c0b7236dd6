"""Feed-forward building blocks: Conv2D, BatchNorm, Dropout, Dense, and the
conv -> ReLU -> BN -> dropout block used by both branches."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import SeededRng
from .tensor import Tensor

TRAIN = "train"
INFER = "infer"


def glorot_uniform(rng: SeededRng, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform_array(shape, -limit, limit, dtype=dtype)


class Layer:
    """Base: named parameter/buffer traversal and train/infer mode."""

    def __init__(self):
        self.mode = TRAIN

    def set_mode(self, mode: str) -> None:
        if mode not in (TRAIN, INFER):
            raise T.ContractError(f"unknown mode {mode!r}")
        self.mode = mode
        for child in self._children():
            child.set_mode(mode)

    def _children(self) -> list["Layer"]:
        return [v for v in vars(self).values() if isinstance(v, Layer)]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                out.append((prefix + name, v))
            elif isinstance(v, Layer):
                out.extend(v.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for name, v in vars(self).items():
            if isinstance(v, np.ndarray):
                out.append((prefix + name, v))
            elif isinstance(v, Layer):
                out.extend(v.named_buffers(prefix + name + "."))
        return out


class Conv2D(Layer):
    """Valid-padding, stride-1 convolution. Only 1x1 and 3x3 kernels are used."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, rng: SeededRng, dtype=np.float32):
        super().__init__()
        if ksize not in (1, 3):
            raise T.ContractError(f"unsupported kernel size {ksize}")
        fan_in = in_ch * ksize * ksize
        fan_out = out_ch * ksize * ksize
        self.kernel = Tensor(
            glorot_uniform(rng, (out_ch, in_ch, ksize, ksize), fan_in, fan_out, dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias)


class BatchNorm(Layer):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == TRAIN:
            out, mean, var = T.batchnorm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean[:] = m * self.running_mean + (1.0 - m) * mean
            self.running_var[:] = m * self.running_var + (1.0 - m) * var
            return out
        return T.batchnorm_infer(x, self.gamma, self.beta,
                                 self.running_mean, self.running_var, self.eps)


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    def __init__(self, rate: float, rng: SeededRng):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise T.ContractError(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == INFER or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        flat = np.array([self.rng.random() < keep for _ in range(x.data.size)])
        mask = flat.reshape(x.shape)
        return T.dropout_with_mask(x, mask, self.rate)


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: SeededRng, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ConvBlock(Layer):
    """conv -> ReLU -> batch-norm -> dropout, in that order.

    The order is configurable (bn_before_relu) but the default follows the
    architecture this implements.
    """

    def __init__(self, in_ch: int, out_ch: int, ksize: int, rng: SeededRng,
                 dropout_rate: float = 0.4, bn_before_relu: bool = False, dtype=np.float32):
        super().__init__()
        self.conv = Conv2D(in_ch, out_ch, ksize, rng, dtype)
        self.bn = BatchNorm(out_ch, dtype=dtype)
        self.dropout = Dropout(dropout_rate, rng) if dropout_rate > 0 else None
        self.bn_before_relu = bn_before_relu

    def _children(self):
        kids = [self.conv, self.bn]
        if self.dropout is not None:
            kids.append(self.dropout)
        return kids

    def named_parameters(self, prefix: str = ""):
        out = self.conv.named_parameters(prefix + "conv.")
        out += self.bn.named_parameters(prefix + "bn.")
        return out

    def named_buffers(self, prefix: str = ""):
        return self.bn.named_buffers(prefix + "bn.")

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv.forward(x)
        if self.bn_before_relu:
            y = T.relu(self.bn.forward(y))
        else:
            y = self.bn.forward(T.relu(y))
        if self.dropout is not None:
            y = self.dropout.forward(y)
        return y


class ClassifierHead(Layer):
    """Two ReLU dense layers plus a linear output layer."""

    def __init__(self, in_dim: int, hidden: int, num_classes: int, rng: SeededRng, dtype=np.float32):
        super().__init__()
        self.fc1 = Dense(in_dim, hidden, rng, dtype)
        self.fc2 = Dense(hidden, hidden, rng, dtype)
        self.out = Dense(hidden, num_classes, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.fc1.forward(x))
        h = T.relu(self.fc2.forward(h))
        return self.out.forward(h)
