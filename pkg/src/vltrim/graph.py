"""Sequential layer graphs with named parameters.

A :class:`ModelGraph` is the unit the trimmer scores and rewrites: an ordered
list of named layers where conv/linear layers own ``<name>.weight`` and
optionally ``<name>.bias`` tensors.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class Conv2d:
    weight: Tensor  # C_out x C_in x kh x kw
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    kind: str = field(default="conv", init=False)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        c, h, w = in_shape
        if c != self.in_channels:
            raise DimensionError(f"conv expects {self.in_channels} channels, got {c}")
        kh, kw = self.weight.shape[2:]
        return (
            self.out_channels,
            (h + 2 * self.padding - kh) // self.stride + 1,
            (w + 2 * self.padding - kw) // self.stride + 1,
        )


@dataclass
class Linear:
    weight: Tensor  # out x in
    bias: Optional[Tensor] = None
    kind: str = field(default="linear", init=False)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.weight))
        return y + self.bias if self.bias is not None else y

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if in_shape != (self.in_channels,):
            raise DimensionError(f"linear expects ({self.in_channels},), got {in_shape}")
        return (self.out_channels,)


@dataclass
class ReLU:
    kind: str = field(default="relu", init=False)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def out_shape(self, in_shape):
        return in_shape


@dataclass
class GlobalAvgPool:
    kind: str = field(default="gap", init=False)

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        return T.mean(T.reshape(x, (n, c, -1)), axis=2)

    def out_shape(self, in_shape):
        return (in_shape[0],)


@dataclass
class Flatten:
    kind: str = field(default="flatten", init=False)

    def forward(self, x: Tensor) -> Tensor:
        return T.reshape(x, (x.shape[0], -1))

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


PARAM_LAYERS = ("conv", "linear")
CHANNEL_PRESERVING = ("relu", "gap", "flatten")


class ModelGraph:
    """Ordered sequence of named layers applied to ``N×C×H×W`` batches."""

    def __init__(self, layers: list[tuple[str, object]], input_shape: tuple[int, ...]):
        names = [n for n, _ in layers]
        if len(set(names)) != len(names):
            raise ContractError("layer names must be unique")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.baseline_flops: Optional[int] = None
        self.shapes()  # validates the chain

    # -- structure --------------------------------------------------------
    def layer(self, name: str):
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.layers):
            if n == name:
                return i
        raise KeyError(name)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample input shape of every layer, plus the final output shape."""
        out = [self.input_shape]
        for _, layer in self.layers:
            out.append(layer.out_shape(out[-1]))
        return out

    def param_layers(self) -> list[str]:
        return [n for n, layer in self.layers if layer.kind in PARAM_LAYERS]

    def prunable_layers(self) -> list[str]:
        """Conv/linear layers except the final one (the classifier head)."""
        return [n for n in self.param_layers()[:-1] if self.successor(n) is not None]

    def successor(self, name: str) -> Optional[str]:
        """Next conv/linear layer, if only channel-preserving layers lie between."""
        for n, layer in self.layers[self.index(name) + 1:]:
            if layer.kind in PARAM_LAYERS:
                return n
            if layer.kind not in CHANNEL_PRESERVING:
                return None
        return None

    def channel_span(self, name: str) -> int:
        """Successor input features fed by one output channel of ``name``."""
        i = self.index(name)
        shapes = self.shapes()
        span = 1
        for n, layer in self.layers[i + 1:]:
            if layer.kind in PARAM_LAYERS:
                break
            if layer.kind == "flatten":
                in_shape = shapes[self.index(n)]
                span = int(np.prod(in_shape[1:]))
        return span

    # -- parameters -------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for n, layer in self.layers:
            if layer.kind in PARAM_LAYERS:
                params[f"{n}.weight"] = layer.weight
                if layer.bias is not None:
                    params[f"{n}.bias"] = layer.bias
        return params

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            if state[k].shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {state[k].shape} != model {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def copy(self) -> "ModelGraph":
        clone = copy.deepcopy(self)
        for p in clone.parameters().values():
            p.grad = None
        return clone

    def forward(self, x: Tensor) -> Tensor:
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def describe(self) -> dict[str, list[int]]:
        return {k: list(v.shape) for k, v in self.parameters().items()}


def _init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def conv_layer(rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 1, bias: bool = True) -> Conv2d:
    w = _init(rng, (c_out, c_in, k, k), c_in * k * k)
    b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
    return Conv2d(w, b, stride, padding)


def linear_layer(rng, n_in: int, n_out: int, bias: bool = True) -> Linear:
    w = _init(rng, (n_out, n_in), n_in)
    b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None
    return Linear(w, b)


def toy_cnn(
    rng: np.random.Generator,
    widths: tuple[int, ...] = (32, 32),
    n_classes: int = 8,
    input_shape: tuple[int, int, int] = (3, 16, 16),
    bias: bool = True,
    pool: str = "gap",
) -> ModelGraph:
    """Conv-relu stack followed by a pooling step and a linear classifier."""
    layers: list[tuple[str, object]] = []
    c = input_shape[0]
    for i, w in enumerate(widths, start=1):
        layers.append((f"conv{i}", conv_layer(rng, c, w, bias=bias)))
        layers.append((f"relu{i}", ReLU()))
        c = w
    if pool == "gap":
        layers.append(("pool", GlobalAvgPool()))
        feat = c
    elif pool == "flatten":
        layers.append(("flatten", Flatten()))
        feat = c * input_shape[1] * input_shape[2]
    else:
        raise ContractError(f"unknown pool {pool!r}")
    layers.append(("fc", linear_layer(rng, feat, n_classes, bias=bias)))
    return ModelGraph(layers, input_shape)


def graph_from_state(state: dict[str, np.ndarray], input_shape: tuple[int, ...], pool: str = "gap") -> ModelGraph:
    """Rebuild a :func:`toy_cnn`-style graph, widths read from tensor shapes."""
    convs = sorted(
        (k for k in state if k.startswith("conv") and k.endswith(".weight")),
        key=lambda k: int(k[4:].split(".")[0]),
    )
    layers: list[tuple[str, object]] = []
    for i, key in enumerate(convs, start=1):
        w = state[key]
        b = state.get(f"conv{i}.bias")
        pad = (w.shape[2] - 1) // 2
        layers.append(
            (f"conv{i}", Conv2d(Tensor(w, requires_grad=True), None if b is None else Tensor(b, requires_grad=True), 1, pad))
        )
        layers.append((f"relu{i}", ReLU()))
    layers.append(("pool", GlobalAvgPool()) if pool == "gap" else ("flatten", Flatten()))
    fb = state.get("fc.bias")
    layers.append(
        ("fc", Linear(Tensor(state["fc.weight"], requires_grad=True), None if fb is None else Tensor(fb, requires_grad=True)))
    )
    return ModelGraph(layers, input_shape)
