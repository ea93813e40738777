"""Autoregressive decoder with dual cross-attention and an n-gram leakage filter.

Each layer runs masked self-attention, then attends separately over the
system memory and the user memory; the two contexts are mixed with the
effective gate as the weight, so a gate of 1 makes generation depend on
the system channel alone. Greedy decoding consults the leakage filter
before committing a token: a candidate is vetoed if it would complete an
n-gram that occurs in the system prompt payload.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import numkernel as nk
from .config import ModelConfig
from .corpus import END_ID, START_ID, SYSTEM_ID, ChannelizedExample
from .errors import ContractError, GenerationError
from .layers import AttentionParams, FeedForwardParams, attention, feed_forward, ones_param, zeros_param
from .numkernel import Tensor
from .security import GateSignals

if TYPE_CHECKING:
    from .model import PicoModel

DEFAULT_FILTER_N = 3


@dataclass
class DecoderLayer:
    ln_self_gain: Tensor
    ln_self_bias: Tensor
    self_attn: AttentionParams
    ln_cross_gain: Tensor
    ln_cross_bias: Tensor
    cross_system: AttentionParams
    cross_user: AttentionParams
    ln_ffn_gain: Tensor
    ln_ffn_bias: Tensor
    ffn: FeedForwardParams

    @classmethod
    def build(cls, rng: np.random.Generator, cfg: ModelConfig) -> "DecoderLayer":
        return cls(
            ln_self_gain=ones_param(cfg.d_model),
            ln_self_bias=zeros_param(cfg.d_model),
            self_attn=AttentionParams.build(rng, cfg.d_model, cfg.n_heads),
            ln_cross_gain=ones_param(cfg.d_model),
            ln_cross_bias=zeros_param(cfg.d_model),
            cross_system=AttentionParams.build(rng, cfg.d_model, cfg.n_heads),
            cross_user=AttentionParams.build(rng, cfg.d_model, cfg.n_heads),
            ln_ffn_gain=ones_param(cfg.d_model),
            ln_ffn_bias=zeros_param(cfg.d_model),
            ffn=FeedForwardParams.build(rng, cfg.d_model, cfg.d_ff),
        )

    def tensors(self, prefix: str):
        yield f"{prefix}.ln_self_gain", self.ln_self_gain
        yield f"{prefix}.ln_self_bias", self.ln_self_bias
        yield from self.self_attn.tensors(f"{prefix}.self_attn")
        yield f"{prefix}.ln_cross_gain", self.ln_cross_gain
        yield f"{prefix}.ln_cross_bias", self.ln_cross_bias
        yield from self.cross_system.tensors(f"{prefix}.cross_system")
        yield from self.cross_user.tensors(f"{prefix}.cross_user")
        yield f"{prefix}.ln_ffn_gain", self.ln_ffn_gain
        yield f"{prefix}.ln_ffn_bias", self.ln_ffn_bias
        yield from self.ffn.tensors(f"{prefix}.ffn")


@dataclass
class DecoderParams:
    embedding: Tensor
    layers: list[DecoderLayer]
    out_w: Tensor  # (d, V)
    out_b: Tensor  # (V,)
    config: ModelConfig

    @classmethod
    def build(cls, cfg: ModelConfig, rng: np.random.Generator) -> "DecoderParams":
        from .layers import linear_init

        return cls(
            embedding=Tensor(
                rng.normal(0.0, cfg.emb_scale, size=(cfg.vocab_size, cfg.d_model)),
                requires_grad=True,
            ),
            layers=[DecoderLayer.build(rng, cfg) for _ in range(cfg.n_layers)],
            out_w=linear_init(rng, cfg.d_model, cfg.vocab_size),
            out_b=zeros_param(cfg.vocab_size),
            config=cfg,
        )

    def tensors(self, prefix: str = "decoder"):
        yield f"{prefix}.embedding", self.embedding
        for i, layer in enumerate(self.layers):
            yield from layer.tensors(f"{prefix}.layer{i}")
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b


def decoder_forward(
    params: DecoderParams,
    tokens: Sequence[int],
    system_memory: Tensor,
    user_memory: Tensor,
    alpha_eff,
) -> Tensor:
    """Logits (T, V) over the whole input sequence.

    ``alpha_eff`` may be a float or a scalar tensor; it weights the system
    context against the user context in every layer.
    """
    tokens = list(tokens)
    if not tokens:
        raise ContractError("decoder_forward: empty token sequence")
    cfg = params.config
    from .corpus import Channel
    from .encoder import positional_encoding

    alpha = alpha_eff if isinstance(alpha_eff, Tensor) else Tensor(float(alpha_eff))
    x = nk.embed(params.embedding, tokens)
    x = x + positional_encoding(len(tokens), cfg.d_model, Channel.USER, cfg.user_phase)
    for layer in params.layers:
        h = nk.layer_norm(x, layer.ln_self_gain, layer.ln_self_bias)
        x = x + attention(layer.self_attn, h, h, causal=True)
        q = nk.layer_norm(x, layer.ln_cross_gain, layer.ln_cross_bias)
        sys_ctx = attention(layer.cross_system, q, system_memory)
        usr_ctx = attention(layer.cross_user, q, user_memory)
        x = x + (alpha * sys_ctx + (1.0 - alpha) * usr_ctx)
        h = nk.layer_norm(x, layer.ln_ffn_gain, layer.ln_ffn_bias)
        x = x + feed_forward(layer.ffn, h)
    return nk.matmul(x, params.out_w) + params.out_b


def decode_step(
    params: DecoderParams,
    prev_tokens: Sequence[int],
    system_memory: Tensor,
    user_memory: Tensor,
    alpha_eff,
) -> Tensor:
    """Next-token logits (V,) after the given prefix."""
    prev_tokens = list(prev_tokens)
    if not prev_tokens:
        raise ContractError("decode_step: prev_tokens must be non-empty")
    logits = decoder_forward(params, prev_tokens, system_memory, user_memory, alpha_eff)
    return nk.select_row(logits, len(prev_tokens) - 1)


def leakage_filter(
    candidate: int,
    generated: Sequence[int],
    system_tokens: Sequence[int],
    n: int = DEFAULT_FILTER_N,
) -> bool:
    """True if the candidate may be emitted.

    Vetoes the candidate exactly when appending it would complete a
    contiguous n-gram occurring in the system prompt payload (the channel
    tag at position 0 is exempt: it heads every channel).
    """
    if n < 2:
        raise ContractError(f"leakage_filter: n must be >= 2, got {n}")
    if len(generated) < n - 1:
        return True
    payload = tuple(system_tokens[1:] if system_tokens and system_tokens[0] == SYSTEM_ID else system_tokens)
    if len(payload) < n:
        return True
    gram = tuple(generated[-(n - 1):]) + (candidate,)
    return all(payload[i : i + n] != gram for i in range(len(payload) - n + 1))


@dataclass
class GenerationResult:
    tokens: list[int]
    signals: GateSignals
    filtered_count: int
    step_logits: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if END_ID in self.tokens[:-1]:
            raise ContractError("END id may only terminate a generation")


def generate(
    model: "PicoModel",
    example: ChannelizedExample,
    max_len: int = 16,
    n: int = DEFAULT_FILTER_N,
    alpha_override: float | None = None,
    expert_override: float | None = None,
    keep_logits: bool = False,
) -> GenerationResult:
    """Greedy decoding with the leakage filter applied at selection time.

    When the raw argmax is vetoed, the highest-logit allowed token is taken
    instead; every vetoed candidate increments ``filtered_count``.
    """
    if max_len < 1:
        raise ContractError(f"generate: max_len must be >= 1, got {max_len}")
    sys_out = model.encode_system(example.system_tokens)
    usr_out = model.encode_user(example.user_tokens)
    signals = model.gate_signals(
        usr_out.pooled,
        example.user_tokens,
        alpha_override=alpha_override,
        expert_override=expert_override,
    )
    alpha = signals.alpha_eff

    seq = [START_ID]
    out: list[int] = []
    filtered = 0
    step_logits: list[np.ndarray] | None = [] if keep_logits else None
    for _ in range(max_len):
        logits = decode_step(model.decoder, seq, sys_out.memory, usr_out.memory, alpha).data
        if step_logits is not None:
            step_logits.append(logits.copy())
        chosen = None
        for cand in np.argsort(-logits, kind="stable"):
            cand = int(cand)
            if leakage_filter(cand, out, example.system_tokens, n):
                chosen = cand
                break
            filtered += 1
        if chosen is None:
            raise GenerationError("leakage filter vetoed every candidate token")
        out.append(chosen)
        seq.append(chosen)
        if chosen == END_ID:
            break
    return GenerationResult(
        tokens=out, signals=signals, filtered_count=filtered, step_logits=step_logits
    )
