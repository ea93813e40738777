"""Shared transformer building blocks: multi-head attention and feed-forward."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor


def linear_init(rng: np.random.Generator, n_in: int, n_out: int) -> Tensor:
    std = math.sqrt(2.0 / (n_in + n_out))
    return Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    n_heads: int

    @classmethod
    def build(cls, rng: np.random.Generator, d_model: int, n_heads: int) -> "AttentionParams":
        return cls(
            wq=linear_init(rng, d_model, d_model),
            wk=linear_init(rng, d_model, d_model),
            wv=linear_init(rng, d_model, d_model),
            wo=linear_init(rng, d_model, d_model),
            bq=zeros_param(d_model),
            bk=zeros_param(d_model),
            bv=zeros_param(d_model),
            bo=zeros_param(d_model),
            n_heads=n_heads,
        )

    def tensors(self, prefix: str):
        for name in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def build(cls, rng: np.random.Generator, d_model: int, d_ff: int) -> "FeedForwardParams":
        return cls(
            w1=linear_init(rng, d_model, d_ff),
            b1=zeros_param(d_ff),
            w2=linear_init(rng, d_ff, d_model),
            b2=zeros_param(d_model),
        )

    def tensors(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def _causal_mask(n: int) -> Tensor:
    # Large negative (not -inf) keeps softmax free of NaN while zeroing weights.
    m = np.triu(np.full((n, n), -1e9), k=1)
    return Tensor(m)


def attention(p: AttentionParams, query_x: Tensor, memory_x: Tensor, causal: bool = False) -> Tensor:
    """Multi-head scaled dot-product attention of queries over a memory.

    Self-attention passes the same tensor for both arguments; cross-attention
    passes an encoder memory. ``causal`` masks future positions.
    """
    q = nk.matmul(query_x, p.wq) + p.bq
    k = nk.matmul(memory_x, p.wk) + p.bk
    v = nk.matmul(memory_x, p.wv) + p.bv

    d_model = q.shape[1]
    dh = d_model // p.n_heads
    scale = 1.0 / math.sqrt(dh)
    mask = _causal_mask(q.shape[0]) if causal else None

    contexts = []
    for h in range(p.n_heads):
        qh = nk.col_slice(q, h * dh, (h + 1) * dh)
        kh = nk.col_slice(k, h * dh, (h + 1) * dh)
        vh = nk.col_slice(v, h * dh, (h + 1) * dh)
        scores = nk.matmul(qh, nk.transpose(kh)) * scale
        if mask is not None:
            scores = scores + mask
        weights = nk.softmax(scores, axis=-1)
        contexts.append(nk.matmul(weights, vh))
    ctx = nk.concat_cols(contexts) if len(contexts) > 1 else contexts[0]
    return nk.matmul(ctx, p.wo) + p.bo


def feed_forward(p: FeedForwardParams, x: Tensor) -> Tensor:
    h = (nk.matmul(x, p.w1) + p.b1).tanh()
    return nk.matmul(h, p.w2) + p.b2
