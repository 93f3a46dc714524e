"""Parameterized layers on top of the autodiff engine.

Module gives recursive parameter discovery by dotted name (the checkpoint
namespace), Linear and LayerNorm wrap the matching primitives with learnable
weights, and TransformerBlock is a standard pre-norm encoder block.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import UsageError


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples with |z| > 2 resampled before scaling."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return (x * std).astype(np.float32)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Base layer: children and weights found by attribute walk.

    named_parameters() assigns each weight a unique dotted name derived
    from the attribute path ("blocks.3.ffn_up.weight"); checkpointing and
    the optimizer key off these names, so attribute order is part of the
    persisted contract.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
                    elif isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """y = x @ W + b over the last axis; leading axes are flattened through."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        std: float = 0.02,
    ):
        self.weight = parameter(trunc_normal(rng, (in_features, out_features), std=std))
        self.bias = parameter(np.zeros(out_features, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        in_features, out_features = self.weight.data.shape
        if x.data.shape[-1] != in_features:
            raise UsageError(
                f"linear expects last axis {in_features}, got {x.data.shape}"
            )
        lead = x.data.shape[:-1]
        flat = ad.reshape(x, (-1, in_features)) if len(lead) != 1 else x
        y = ad.matmul(flat, self.weight)
        if self.bias is not None:
            y = ad.add(y, ad.broadcast(self.bias, y.data.shape))
        if len(lead) != 1:
            y = ad.reshape(y, lead + (out_features,))
        return y


class LayerNorm(Module):
    """Last-axis normalization with a learnable gain and bias."""

    def __init__(self, features: int):
        self.gain = parameter(np.ones(features, dtype=np.float32))
        self.bias = parameter(np.zeros(features, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.layer_norm(x)
        y = ad.mul(y, ad.broadcast(self.gain, y.data.shape))
        return ad.add(y, ad.broadcast(self.bias, y.data.shape))


class TransformerBlock(Module):
    """Pre-norm encoder block: x + Attn(LN(x)), then + FFN(LN(.))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise UsageError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn_up = Linear(dim, 4 * dim, rng)
        self.ffn_down = Linear(4 * dim, dim, rng)

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Multi-head self-attention on (q, dim) tokens.

        Returns (output, weights); weights has shape (heads, q, q) with
        rows summing to 1, kept accessible for inspection.
        """
        q_len, dim = x.data.shape
        h = self.heads
        d = dim // h
        qkv = self.qkv(x)  # (q, 3*dim)
        qkv = ad.reshape(qkv, (q_len, 3, h, d))
        qkv = ad.transpose(qkv, (1, 2, 0, 3))  # (3, h, q, d)
        parts = []
        for i in range(3):
            part = ad.slice_axis(qkv, 0, i, i + 1)
            parts.append(ad.reshape(part, (h, q_len, d)))
        query, key, value = parts
        scores = ad.matmul(query, ad.transpose(key, (0, 2, 1)))  # (h, q, q)
        scores = ad.scale(scores, 1.0 / math.sqrt(d))
        weights = ad.softmax_lastaxis(scores)
        mixed = ad.matmul(weights, value)  # (h, q, d)
        mixed = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (q_len, dim))
        return self.proj(mixed), weights

    def __call__(self, x: Tensor) -> Tensor:
        attn_out, _ = self.attention(self.norm1(x))
        x = ad.add(x, attn_out)
        y = self.ffn_down(ad.gelu(self.ffn_up(self.norm2(x))))
        return ad.add(x, y)
