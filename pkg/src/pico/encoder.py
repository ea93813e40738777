"""Two independent toy transformer encoder stacks.

The system channel encoder is freezable: once frozen, its parameter bytes
must never change again and its pooled output (the system signature) is
immutable for a fixed prompt. The user channel encoder stays trainable.
Each channel gets its own positional encoding; the user channel's
sinusoids carry a fixed phase offset so the two channels' position codes
are distinct by construction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .config import ModelConfig
from .corpus import Channel
from .errors import ContractError, VocabError
from .layers import AttentionParams, FeedForwardParams, ones_param, zeros_param
from .numkernel import Tensor


@dataclass
class EncoderBlock:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn: FeedForwardParams

    @classmethod
    def build(cls, rng: np.random.Generator, cfg: ModelConfig) -> "EncoderBlock":
        return cls(
            ln1_gain=ones_param(cfg.d_model),
            ln1_bias=zeros_param(cfg.d_model),
            attn=AttentionParams.build(rng, cfg.d_model, cfg.n_heads),
            ln2_gain=ones_param(cfg.d_model),
            ln2_bias=zeros_param(cfg.d_model),
            ffn=FeedForwardParams.build(rng, cfg.d_model, cfg.d_ff),
        )

    def tensors(self, prefix: str):
        yield f"{prefix}.ln1_gain", self.ln1_gain
        yield f"{prefix}.ln1_bias", self.ln1_bias
        yield from self.attn.tensors(f"{prefix}.attn")
        yield f"{prefix}.ln2_gain", self.ln2_gain
        yield f"{prefix}.ln2_bias", self.ln2_bias
        yield from self.ffn.tensors(f"{prefix}.ffn")


@dataclass
class EncoderParams:
    """Embedding table plus transformer blocks for one channel."""

    embedding: Tensor
    blocks: list[EncoderBlock]
    pos_table: Tensor | None  # learned positional table, when configured
    config: ModelConfig
    frozen: bool = False

    @classmethod
    def build(cls, cfg: ModelConfig, rng: np.random.Generator) -> "EncoderParams":
        embedding = Tensor(
            rng.normal(0.0, cfg.emb_scale, size=(cfg.vocab_size, cfg.d_model)),
            requires_grad=True,
        )
        blocks = [EncoderBlock.build(rng, cfg) for _ in range(cfg.n_layers)]
        pos = None
        if cfg.positional == "learned":
            pos = Tensor(
                rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.d_model)),
                requires_grad=True,
            )
        return cls(embedding=embedding, blocks=blocks, pos_table=pos, config=cfg)

    def tensors(self, prefix: str = ""):
        pre = prefix + "." if prefix else ""
        yield f"{pre}embedding", self.embedding
        if self.pos_table is not None:
            yield f"{pre}pos_table", self.pos_table
        for i, blk in enumerate(self.blocks):
            yield from blk.tensors(f"{pre}block{i}")

    def bytes_sha256(self) -> str:
        """Hash of all parameter bytes, in stable name order."""
        h = hashlib.sha256()
        for name, t in sorted(self.tensors(), key=lambda kv: kv[0]):
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


@dataclass
class EncoderOutput:
    memory: Tensor  # (seq, d) per-token representations
    pooled: Tensor  # (d,)
    frozen_source: bool
    pooling: str


@dataclass
class SystemSignature:
    """Frozen pooled vector of the system encoder's output."""

    vector: Tensor


def positional_encoding(
    seq_len: int, d_model: int, channel: Channel, user_phase: float = math.pi / 4
) -> Tensor:
    """Sinusoidal position codes; the user channel is phase-shifted by pi/4.

    Pair 2i holds sin(pos / 10000^(2i/d) + phase) and pair 2i+1 the cosine
    of the same argument, so channels differ at every (pos, dim) where the
    shifted sine/cosine differ.
    """
    if d_model % 2 != 0:
        raise ContractError(f"d_model must be even, got {d_model}")
    phase = 0.0 if Channel(channel) is Channel.SYSTEM else user_phase
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model) + phase
    pe = np.empty((seq_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


def _run_blocks(params: EncoderParams, x: Tensor) -> Tensor:
    from .layers import attention, feed_forward

    for blk in params.blocks:
        h = nk.layer_norm(x, blk.ln1_gain, blk.ln1_bias)
        x = x + attention(blk.attn, h, h, causal=False)
        h = nk.layer_norm(x, blk.ln2_gain, blk.ln2_bias)
        x = x + feed_forward(blk.ffn, h)
    return x


def _pool(memory: Tensor, mode: str) -> Tensor:
    if mode == "mean":
        return nk.mean(memory, axis=0)
    return nk.select_row(memory, 0)


def encode(params: EncoderParams, tokens, channel: Channel) -> EncoderOutput:
    """Embed, add channel positional codes, run the blocks, pool."""
    cfg = params.config
    tokens = list(tokens)
    if not tokens:
        raise ContractError("encode: empty token sequence")
    if len(tokens) > cfg.max_len:
        raise ContractError(f"sequence length {len(tokens)} exceeds max_len {cfg.max_len}")
    for t in tokens:
        if not 0 <= t < cfg.vocab_size:
            raise VocabError(f"token id {t} out of range (V={cfg.vocab_size})")

    x = nk.embed(params.embedding, tokens)
    if params.pos_table is not None:
        idx = list(range(len(tokens)))
        x = x + nk.embed(params.pos_table, idx)
    else:
        x = x + positional_encoding(len(tokens), cfg.d_model, channel, cfg.user_phase)
    memory = _run_blocks(params, x)
    pooled = _pool(memory, cfg.pooling)
    return EncoderOutput(
        memory=memory, pooled=pooled, frozen_source=params.frozen, pooling=cfg.pooling
    )


def freeze(params: EncoderParams) -> EncoderParams:
    """Mark every tensor untrainable; idempotent."""
    for _, t in params.tensors():
        t.requires_grad = False
        t.grad = None
    params.frozen = True
    return params


def system_signature(output: EncoderOutput) -> SystemSignature:
    """The immutable pooled system vector; only valid from a frozen encoder."""
    if not output.frozen_source:
        raise ContractError(
            "system_signature requires output of a frozen system encoder"
        )
    return SystemSignature(vector=Tensor(output.pooled.data.copy()))
