"""Module system and the layers the architecture is assembled from.

A ``Module`` tracks parameters (Tensors assigned as attributes), buffers
(registered arrays such as BN running stats), and child modules, all in
deterministic insertion order. ``train()``/``eval()`` toggle BN behavior
per subtree; ``set_trainable()`` flips ``requires_grad`` so the tape skips
frozen subgraphs entirely.
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import ops
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_trainable(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """All parameters and buffers by name (buffers suffixed as named)."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state_arrays(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data[...] = state[name]
        for name, b in self.named_buffers():
            b[...] = state[name]


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self._items = list(mods)
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, init: str = "he"):
        super().__init__()
        fan_in = cin * k * k
        fan_out = cout * k * k
        if init == "he":
            w = he_uniform(rng, (cout, cin, k, k), fan_in)
        else:
            w = xavier_uniform(rng, (cout, cin, k, k), fan_in, fan_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int):
        super().__init__()
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c))
        self.register_buffer("running_var", np.ones(c))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, train=self.training)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, init: str = "he"):
        super().__init__()
        if init == "he":
            w = he_uniform(rng, (din, dout), din)
        else:
            w = xavier_uniform(rng, (din, dout), din, dout)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


class ConvBnRelu(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride, padding, init="he")
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn.forward(self.conv.forward(x)))


class BasicBlock(Module):
    """Two 3x3 conv+BN layers with an additive skip, ReLU after the sum."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride, 1, init="he")
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, 1, 1, init="he")
        self.bn2 = BatchNorm2d(cout)
        object.__setattr__(self, "project", stride != 1 or cin != cout)
        if self.project:
            self.conv_skip = Conv2d(cin, cout, 1, rng, stride, 0, init="xavier")
            self.bn_skip = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        skip = self.bn_skip.forward(self.conv_skip.forward(x)) if self.project else x
        return ops.relu(ops.add_maps(h, skip))
