"""Small parameterized building blocks shared by the model modules.

Each block exposes ``named_parameters()`` yielding (name, Tensor) pairs;
parents prefix names, so the full model has a flat, stable namespace for
checkpointing and optimizer grouping.
"""

from __future__ import annotations

import numpy as np

from radgen import tensor as T
from radgen.tensor import Tensor

INIT_STD = 0.02  # random init scale for all learned projections


def normal_param(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        self.w = normal_param(rng, (d_in, d_out))
        self.b = zeros_param(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        return out + self.b if self.b is not None else out

    def named_parameters(self):
        yield "w", self.w
        if self.b is not None:
            yield "b", self.b


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = zeros_param(d)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta


class FeedForward:
    """Position-wise two-layer MLP with ReLU, inner width ratio*d."""

    def __init__(self, d: int, rng, ratio: int = 4):
        self.up = Linear(d, ratio * d, rng)
        self.down = Linear(ratio * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.relu(self.up(x)))

    def named_parameters(self):
        for n, p in self.up.named_parameters():
            yield f"up.{n}", p
        for n, p in self.down.named_parameters():
            yield f"down.{n}", p


def prefixed(prefix: str, block):
    for name, p in block.named_parameters():
        yield f"{prefix}.{name}", p


def sinusoid_table(n_positions: int, d: int) -> np.ndarray:
    """Interleaved sin/cos position encodings: row p is
    [sin(p/10000^(0/d)), cos(p/10000^(0/d)), sin(p/10000^(2/d)), ...]."""
    table = np.zeros((n_positions, d))
    pos = np.arange(n_positions)[:, None]
    idx = np.arange(0, d, 2)[None, :]
    angles = pos / np.power(10000.0, idx / d)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d // 2])
    return table
