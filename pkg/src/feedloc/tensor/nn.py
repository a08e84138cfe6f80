"""Parameter containers and transformer building blocks on top of :mod:`autograd`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NEG_INF = -1e9


class Module:
    """Collects ``Tensor`` parameters and sub-modules from attributes, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ag.ShapeMismatch(f"{name}: checkpoint {state[name].shape} vs model {p.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(xavier_uniform(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return ag.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x_q: Tensor, x_kv: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """``x_q`` (B, Lq, D), ``x_kv`` (B, Lk, D); ``key_mask`` (B, Lk) true for real tokens."""
        b, lq, d = x_q.shape
        q, k, v = self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(self.v(x_kv))
        add_mask = None
        if key_mask is not None:
            add_mask = np.where(key_mask, 0.0, NEG_INF)[:, None, None, :]
        out = ag.scaled_dot_attention(q, k, v, add_mask)
        return self.o(out.transpose(0, 2, 1, 3).reshape(b, lq, d))


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, 2 * d_model, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln2(x))


class DecoderLayer(Module):
    """Pre-norm self-attention, cross-attention to ``memory``, feed-forward."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng)
        self.ln3 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, 2 * d_model, rng)

    def __call__(self, x: Tensor, memory: Tensor, x_mask: np.ndarray | None = None,
                 memory_mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, x_mask)
        x = x + self.cross_attn(self.ln2(x), memory, memory_mask)
        return x + self.ffn(self.ln3(x))


class MLPHead(Module):
    """Two-layer MLP mapping each token to a probability."""

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def logits(self, x: Tensor) -> Tensor:
        y = self.fc2(ag.relu(self.fc1(x)))
        return y.reshape(y.shape[:-1])

    def __call__(self, x: Tensor) -> Tensor:
        return ag.sigmoid(self.logits(x))


def sinusoidal_positions(n: int, d: int, unit: bool = False) -> np.ndarray:
    """Standard sin/cos table; ``unit`` rescales rows to norm 1 so position does not drown
    unit-norm content features."""
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    if unit:
        pe /= np.linalg.norm(pe, axis=1, keepdims=True)
    return pe
