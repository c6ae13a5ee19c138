"""Parameter containers and the basic layers the model is built from."""

from __future__ import annotations

import copy

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Module:
    """Anything holding trainable tensors.

    Parameters are discovered by walking instance attributes: grad-tracked
    tensors, nested modules, and lists of modules. Attribute insertion order
    fixes the parameter order, so checkpoints and optimizer state line up
    across runs.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def detached(self) -> "Module":
        """Shallow clone whose parameters are cut out of the graph.

        Data is shared with the original, so the clone computes exactly the
        same function; gradients simply stop at its parameters.
        """
        clone = copy.copy(self)
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                setattr(clone, key, value.detach())
            elif isinstance(value, Module):
                setattr(clone, key, value.detached())
            elif isinstance(value, list) and any(isinstance(v, Module) for v in value):
                setattr(clone, key, [v.detached() if isinstance(v, Module) else v for v in value])
        return clone


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        self.weight = param(np.zeros((d_in, d_out)) if zero else xavier(rng, d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(T.reshape(x, (1, -1)), self.weight)[0]
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = param(np.ones(d))
        self.shift = param(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.mean(T.square(centered), axis=-1, keepdims=True)
        return centered / T.sqrt(var + self._eps) * self.gain + self.shift


def attention_bias(key_mask: np.ndarray | None, causal_len: int | None = None, dtype=None) -> np.ndarray | None:
    """Additive attention bias of shape (B, 1, Tq, Tk) or (1, 1, Tq, Tk)."""
    dtype = dtype or T.get_default_dtype()
    bias = None
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, bool), 0.0, -1e9).astype(dtype)[:, None, None, :]
    if causal_len is not None:
        tri = np.triu(np.full((causal_len, causal_len), -1e9, dtype=dtype), k=1)[None, None]
        bias = tri if bias is None else bias + tri
    return bias


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, heads: int):
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_model, d_model)
        self.v = Linear(rng, d_model, d_model)
        self.out = Linear(rng, d_model, d_model)
        self._heads = heads

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return T.transpose(T.reshape(x, (b, t, self._heads, d // self._heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, bias: np.ndarray | None = None) -> Tensor:
        b, tq, d = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d // self._heads))
        if bias is not None:
            scores = scores + T.Tensor(bias, dtype=scores.dtype)
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int):
        self.up = Linear(rng, d_model, d_ff)
        self.down = Linear(rng, d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


def sinusoid(length: int, d: int, dtype=None) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype or T.get_default_dtype())
