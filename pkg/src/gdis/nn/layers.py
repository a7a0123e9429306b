"""Graph attention layer, dense layers and the Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Parameter, Tensor, _as_tensor, add, elu, gather_rows, leaky_relu,
                       matmul, mul, segment_softmax, segment_sum)


def glorot(rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass(frozen=True)
class AttentionGraph:
    """Edge lists over ``N(i) | {i}``: ``rows[e]`` attends to ``cols[e]``."""

    num_nodes: int
    rows: np.ndarray
    cols: np.ndarray

    @classmethod
    def from_pairs(cls, num_nodes: int, rows, cols) -> "AttentionGraph":
        if num_nodes < 1:
            raise ValueError("attention needs at least one node")
        self_idx = np.arange(num_nodes)
        r = np.concatenate([np.asarray(rows, dtype=np.int64), self_idx])
        c = np.concatenate([np.asarray(cols, dtype=np.int64), self_idx])
        order = np.lexsort((c, r))
        return cls(num_nodes, r[order], c[order])

    @classmethod
    def from_network(cls, net) -> "AttentionGraph":
        rows, cols = net.directed_pairs()
        return cls.from_pairs(net.node_count, rows, cols)


class AttentionLayer:
    """Single-head graph attention followed by ELU.

    alpha_ij = softmax_j LeakyReLU(A^T [W h_i || W h_j]) over N(i) and i itself;
    h'_i = ELU(sum_j alpha_ij W h_j).
    """

    def __init__(self, in_dim: int, out_dim: int, rng, negative_slope: float = 0.2,
                 name: str = "gat"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.negative_slope = negative_slope
        self.weight = Parameter(glorot(rng, in_dim, out_dim), name=f"{name}.weight")
        self.attn_vector = Parameter(glorot(rng, 2 * out_dim, 1, shape=(2 * out_dim, 1)),
                                     name=f"{name}.attn")

    @property
    def params(self) -> list:
        return [self.weight, self.attn_vector]

    def attention(self, H, graph: AttentionGraph):
        """Return (alpha per edge as an (E, 1) tensor, W H)."""
        if self.attn_vector.shape != (2 * self.out_dim, 1):
            raise ValueError("attention vector must have length 2 * out_dim")
        z = matmul(_as_tensor(H), self.weight)
        o = self.out_dim
        # A^T [z_i || z_j] = A[:o] . z_i + A[o:] . z_j
        s_self = matmul(z, gather_rows(self.attn_vector, np.arange(o)))
        s_nbr = matmul(z, gather_rows(self.attn_vector, np.arange(o, 2 * o)))
        scores = leaky_relu(add(gather_rows(s_self, graph.rows), gather_rows(s_nbr, graph.cols)),
                            self.negative_slope)
        return segment_softmax(scores, graph.rows, graph.num_nodes), z

    def __call__(self, H, graph: AttentionGraph) -> Tensor:
        alpha, z = self.attention(H, graph)
        msgs = mul(gather_rows(z, graph.cols), alpha)
        return elu(segment_sum(msgs, graph.rows, graph.num_nodes))


class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng, name: str = "dense"):
        self.weight = Parameter(glorot(rng, in_dim, out_dim), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), name=f"{name}.bias")

    @property
    def params(self) -> list:
        return [self.weight, self.bias]

    def __call__(self, x) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


@dataclass
class Adam:
    """Bias-corrected Adam over a list of named parameters."""

    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first: list = field(default=None)
    second: list = field(default=None)

    def __post_init__(self):
        if self.first is None:
            self.first = [np.zeros_like(p.value) for p in self.params]
        if self.second is None:
            self.second = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.first, self.second):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
