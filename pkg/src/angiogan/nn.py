"""Layer containers and the encoder / decoder / residual / attention blocks."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import DTYPE, RunningStats, Tensor

LEAKY_SLOPE = 0.2
INIT_STD = 0.02


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal parameter container: attributes that are Parameters, Modules or
    lists of Modules are discovered in definition order."""

    training: bool = True
    frozen: bool = False

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        head, _, rest = name.partition(".")
        if isinstance(getattr(self, head, None), list):
            idx, _, rest = rest.partition(".")
            getattr(self, head)[int(idx)].load_buffer(rest, value)
        else:
            getattr(self, head).load_buffer(rest, value)

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_frozen(self, flag: bool) -> None:
        """Frozen: parameters stop requiring grads (gradient still flows through
        activations) and batch-norm running stats stop updating."""
        for m in self.modules():
            m.frozen = flag
        for p in self.parameters():
            p.requires_grad = not flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(DTYPE))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 dilation: int = 1, padding: int = 0, bias: bool = False, std: float = INIT_STD):
        self.weight = _normal(rng, (cout, cin, k, k), std)
        self.bias = Parameter(np.zeros(cout, dtype=DTYPE)) if bias else None
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class SeparableConv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dilation: int = 1):
        self.depthwise = _normal(rng, (cin, 1, k, k))
        self.pointwise = _normal(rng, (cout, cin, 1, 1))
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return T.separable_conv2d(x, self.depthwise, self.pointwise, stride=1, dilation=self.dilation)


class TransposedConv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 2):
        self.weight = _normal(rng, (cin, cout, k, k))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.transposed_conv2d(x, self.weight, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=DTYPE))
        self.stats = RunningStats(channels, momentum)
        self.eps = eps

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.stats.mean
        yield prefix + "running_var", self.stats.var

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "running_mean":
            self.stats.mean = value.astype(DTYPE)
        elif name == "running_var":
            self.stats.var = value.astype(DTYPE)
        else:
            raise KeyError(name)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.stats, training=self.training,
                            eps=self.eps, update_stats=not self.frozen)


class ConvBnAct(Module):
    """reflection pad -> k x k conv (stride s) -> batch-norm -> leaky-relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 3, stride: int = 1,
                 slope: float = LEAKY_SLOPE):
        self.pad = (k - 1) // 2
        self.conv = Conv2d(cin, cout, k, rng, stride=stride)
        self.bn = BatchNorm2d(cout)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return T.leaky_relu(self.bn(self.conv(T.reflection_pad(x, self.pad))), self.slope)


class SepConvUnit(Module):
    """reflection pad (= dilation) -> 3x3 separable conv -> batch-norm -> leaky-relu; shape-preserving."""

    def __init__(self, channels: int, rng: np.random.Generator, dilation: int = 1,
                 slope: float = LEAKY_SLOPE):
        self.dilation = dilation
        self.conv = SeparableConv2d(channels, channels, 3, rng, dilation=dilation)
        self.bn = BatchNorm2d(channels)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return T.leaky_relu(self.bn(self.conv(T.reflection_pad(x, self.dilation))), self.slope)


class EncoderBlock(Module):
    """3x3 stride-2 conv + BN + leaky-relu: halves H and W."""

    def __init__(self, cin: int, rng: np.random.Generator, cout: Optional[int] = None,
                 slope: float = LEAKY_SLOPE):
        self.cin = cin
        self.cout = 2 * cin if cout is None else cout
        self.body = ConvBnAct(cin, self.cout, rng, k=3, stride=2, slope=slope)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"encoder needs even spatial size, got {h}x{w}")
        return self.body(x)


class DecoderBlock(Module):
    """3x3 stride-2 transposed conv (exact doubling) + BN + leaky-relu."""

    def __init__(self, cin: int, rng: np.random.Generator, cout: Optional[int] = None,
                 slope: float = LEAKY_SLOPE):
        if cout is None:
            if cin % 2:
                raise ValueError(f"decoder halves channels; odd count {cin}")
            cout = cin // 2
        self.cin, self.cout = cin, cout
        self.deconv = TransposedConv2d(cin, cout, 3, rng, stride=2)
        self.bn = BatchNorm2d(cout)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"decoder expects {self.cin} channels, got {x.shape[1]}")
        return T.leaky_relu(self.bn(self.deconv(x)), self.slope)


class GenResidualBlock(Module):
    """x + branch_d1(stem(x)) + branch_d2(stem(x))."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.stem = SepConvUnit(channels, rng, dilation=1)
        self.branch_d1 = SepConvUnit(channels, rng, dilation=1)
        self.branch_d2 = SepConvUnit(channels, rng, dilation=2)

    def forward(self, x: Tensor) -> Tensor:
        s = self.stem(x)
        return x + self.branch_d1(s) + self.branch_d2(s)


class DiscResidualBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.unit = SepConvUnit(channels, rng, dilation=1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.unit(x)


class AttentionBlock(Module):
    """Residual unit, two conv-BN-act layers, residual unit; both skips come from the input.

    u1 = x + unit1(x); out = x + unit2(conv2(conv1(u1)))
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.unit1 = SepConvUnit(channels, rng)
        self.conv1 = ConvBnAct(channels, channels, rng)
        self.conv2 = ConvBnAct(channels, channels, rng)
        self.unit2 = SepConvUnit(channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        u1 = x + self.unit1(x)
        return x + self.unit2(self.conv2(self.conv1(u1)))


def zero_parameters(module: Module) -> None:
    """Set every learned parameter (including BN gamma) to zero."""
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
