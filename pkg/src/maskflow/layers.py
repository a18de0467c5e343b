"""Small building blocks shared by the two networks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ShapeMismatchError(ValueError):
    """Raised when loading parameters whose shapes differ from the model's."""


class Module:
    """Named parameter/buffer container with a flat, ordered state dict."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        p = Tensor(value, requires_grad=True, name=name)
        self.params[name] = p
        return p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": v.data for k, v in self.params.items()}
        state.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {k: v.shape for k, v in self.state_dict().items()}
        got = {k: tuple(np.shape(v)) for k, v in state.items()}
        if expected != got:
            diff = []
            for k in sorted(set(expected) | set(got)):
                if expected.get(k) != got.get(k):
                    diff.append(f"{k}: model {expected.get(k)} vs state {got.get(k)}")
            raise ShapeMismatchError("state does not match model:\n  " + "\n  ".join(diff))
        for k, v in state.items():
            kind, name = k.split("/", 1)
            if kind == "param":
                self.params[name].data = np.array(v, dtype=self.params[name].data.dtype)
            else:
                self.buffers[name][...] = v


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    if b is None:
        return y
    lead = (1,) * (y.ndim - 1)
    return T.add(y, T.expand(T.reshape(b, lead + b.shape), y.shape))


def silu(x: Tensor) -> Tensor:
    return T.mul(x, T.sigmoid(x))


def gelu(x: Tensor) -> Tensor:
    # sigmoid approximation of GELU
    return T.mul(x, T.sigmoid(T.scale(x, 1.702)))


def mse(a: Tensor, b) -> Tensor:
    d = T.sub(a, b)
    return T.mean(T.mul(d, d))


def broadcast_rows(v: Tensor, rows: int) -> Tensor:
    """``(batch, width)`` -> ``(batch, rows, width)`` by explicit repetition."""
    bsz, width = v.shape
    return T.expand(T.reshape(v, (bsz, 1, width)), (bsz, rows, width))
