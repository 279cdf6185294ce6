"""Parameter containers and the pre-norm transformer encoder shared by all views."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MASK_BIAS = -1e9


class Module:
    """Minimal parameter tree: attributes that are Tensors or Modules (or lists of Modules)."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def init_matrix(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weight = nx.parameter(init_matrix(rng, d_in, d_out))
        self.bias = nx.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = nx.parameter(np.ones(d))
        self.bias = nx.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class MultiHeadSelfAttention(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_heads: int):
        if d % n_heads:
            raise ValueError(f"width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.query = Linear(rng, d, d)
        self.key = Linear(rng, d, d)
        self.value = Linear(rng, d, d)
        self.output = Linear(rng, d, d)
        self._last_attention: np.ndarray | None = None

    @property
    def last_attention(self) -> np.ndarray | None:
        """Attention weights (B, H, n_queries, n_keys) of the latest call."""
        return self._last_attention

    def __call__(self, h: Tensor, queries: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """Attend from ``queries`` (B, nq, d) over the rows of ``h`` (B, n, d).

        ``key_mask`` is a boolean (B, n) array, True where a key may be attended.
        """
        b, n, d = h.shape
        nq = queries.shape[1]
        heads = self.n_heads
        dh = d // heads
        q = self.query(queries).reshape(b, nq, heads, dh).transpose(0, 2, 1, 3)
        k = self.key(h).reshape(b, n, heads, dh).transpose(0, 2, 3, 1)
        v = self.value(h).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        scores = nx.matmul(q, k) * (1.0 / math.sqrt(dh))
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, MASK_BIAS)[:, None, None, :]
            scores = scores + Tensor(bias)
        weights = nx.softmax(scores, axis=-1)
        self._last_attention = weights.data
        ctx = nx.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, nq, d)
        return self.output(ctx)


class TransformerLayer(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x)); bidirectional."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, ff_mult: int = 4, norm_input: bool = True,
                 zero_residual: bool = False):
        # without the input norm, token magnitudes reach attention unchanged
        self.norm_attention = LayerNorm(d) if norm_input else None
        self.attention = MultiHeadSelfAttention(rng, d, n_heads)
        self.norm_ff = LayerNorm(d)
        self.ff_in = Linear(rng, d, ff_mult * d)
        self.ff_out = Linear(rng, ff_mult * d, d)
        if zero_residual:
            # each block starts as the identity
            self.attention.output.weight.data[...] = 0.0
            self.ff_out.weight.data[...] = 0.0

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, readout_only: bool = False) -> Tensor:
        h = x if self.norm_attention is None else self.norm_attention(x)
        if readout_only:
            # Only row 0 is consumed downstream; keys/values still span every row.
            x_q = x[:, :1, :]
            h_q = h[:, :1, :]
        else:
            x_q, h_q = x, h
        x_q = x_q + self.attention(h, h_q, key_mask)
        return x_q + self.ff_out(nx.gelu(self.ff_in(self.norm_ff(x_q))))


class TransformerEncoder(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_layers: int, n_heads: int, ff_mult: int = 4,
                 norm_first_input: bool = True, zero_residual: bool = False):
        if n_layers < 0:
            raise ValueError("layer count must be nonnegative")
        if d % n_heads:
            raise ValueError(f"width {d} is not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.layers = [
            TransformerLayer(rng, d, n_heads, ff_mult, norm_input=norm_first_input or i > 0, zero_residual=zero_residual)
            for i in range(n_layers)
        ]

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, readout_only: bool = False) -> Tensor:
        """Apply every layer to x (B, n, d).

        With ``readout_only`` the last layer is evaluated for row 0 alone and the
        result has shape (B, 1, d); it equals row 0 of the full output.
        """
        for i, layer in enumerate(self.layers):
            last = i == len(self.layers) - 1
            x = layer(x, key_mask, readout_only=readout_only and last)
        if readout_only and not self.layers:
            x = x[:, :1, :]
        return x
