"""Adam optimizer with bias correction.

One :class:`Adam` instance owns the moment state for a named set of
parameters. The update itself lives in :func:`adam_step` so tests can drive
single parameters against a hand reference.
"""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = BETA1, beta2: float = BETA2,
              eps: float = ADAM_EPS) -> None:
    """Apply one Adam update in place. ``t`` is the 1-based step count."""
    if grad.shape != param.shape:
        raise ShapeError(f"adam_step: grad shape {grad.shape} != param shape {param.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over named parameters; iteration order follows registration order."""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], lr: float = 1e-4):
        self.lr = lr
        self.t = 0
        self._params: List[Tuple[str, Tensor]] = list(named_params)
        names = [n for n, _ in self._params]
        if len(set(names)) != len(names):
            raise ShapeError("Adam: duplicate parameter names")
        self._m: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self._params}
        self._v: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self._params}

    def zero_grad(self) -> None:
        for _, p in self._params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        for name, p in self._params:
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self._m[name], self._v[name], self.t, self.lr)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {"t": np.asarray(float(self.t))}
        for name, _ in self._params:
            out[f"m.{name}"] = self._m[name]
            out[f"v.{name}"] = self._v[name]
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for name, _ in self._params:
            self._m[name][...] = state[f"m.{name}"]
            self._v[name][...] = state[f"v.{name}"]
