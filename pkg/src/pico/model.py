"""The assembled two-channel model: encoders, security signals, fusion, decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .corpus import Channel, ChannelizedExample, START_ID, Vocab
from .decoder import DecoderParams, decoder_forward
from .encoder import EncoderOutput, EncoderParams, encode
from .errors import ContractError
from .fusion import FusedState, GateHeadParams, base_gate, effective_gate, effective_gate_t, fuse
from .numkernel import Tensor
from .security import (
    ExpertParams,
    GateSignals,
    SecurityGraph,
    ckg_score,
    expert_score,
    match_entities,
)


@dataclass
class AnalysisRecord:
    """Per-example quantities used by evaluation and the bound checks."""

    e_s: np.ndarray
    e_u: np.ndarray
    signals: GateSignals
    fused: np.ndarray
    gap: float  # ||e_u - e_s||


@dataclass
class PicoModel:
    config: ModelConfig
    vocab: Vocab
    system_encoder: EncoderParams
    user_encoder: EncoderParams
    decoder: DecoderParams
    expert: ExpertParams
    gate_head: GateHeadParams
    graph: SecurityGraph
    kg_projection: Tensor
    _system_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(
        cls,
        config: ModelConfig,
        vocab: Vocab,
        graph: SecurityGraph,
        rng: np.random.Generator,
    ) -> "PicoModel":
        if len(vocab) != config.vocab_size:
            raise ContractError(
                f"vocab size {len(vocab)} != config.vocab_size {config.vocab_size}"
            )
        graph.ensure_embeddings(config.d_kg, rng)
        import math

        proj_std = math.sqrt(2.0 / (config.d_kg + config.d_model))
        return cls(
            config=config,
            vocab=vocab,
            system_encoder=EncoderParams.build(config, rng),
            user_encoder=EncoderParams.build(config, rng),
            decoder=DecoderParams.build(config, rng),
            expert=ExpertParams.build(config.d_model, config.expert_hidden, rng),
            gate_head=GateHeadParams.build(config.d_model, rng),
            graph=graph,
            # Diagnostic projection for the graph context vector; the context
            # never feeds fusion, so there is no gradient path to train it.
            kg_projection=Tensor(
                rng.normal(0.0, proj_std, size=(config.d_kg, config.d_model)),
            ),
        )

    # parameters --------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, t in self.system_encoder.tensors("system_encoder"):
            out[name] = t
        for name, t in self.user_encoder.tensors("user_encoder"):
            out[name] = t
        for name, t in self.decoder.tensors("decoder"):
            out[name] = t
        for name, t in self.expert.tensors("expert"):
            out[name] = t
        for name, t in self.gate_head.tensors("gate"):
            out[name] = t
        out["kg.projection"] = self.kg_projection
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_parameters().items() if t.requires_grad}

    def system_hash(self) -> str:
        return self.system_encoder.bytes_sha256()

    # channel encodings --------------------------------------------------

    def encode_system(self, tokens) -> EncoderOutput:
        """Encode the system channel; cached once the branch is frozen."""
        key = tuple(tokens)
        if self.system_encoder.frozen:
            hit = self._system_cache.get(key)
            if hit is not None:
                return hit
        out = encode(self.system_encoder, tokens, Channel.SYSTEM)
        if self.system_encoder.frozen:
            self._system_cache[key] = out
        return out

    def encode_user(self, tokens) -> EncoderOutput:
        return encode(self.user_encoder, tokens, Channel.USER)

    # gating --------------------------------------------------------------

    def gate_signals(
        self,
        user_pooled: Tensor,
        user_tokens,
        alpha_override: float | None = None,
        expert_override: float | None = None,
        differentiable: bool = False,
    ) -> GateSignals:
        """Gate signals for one example.

        ``alpha_override`` replaces all three signals (forcing the gate to an
        exact value); ``expert_override`` replaces only the expert score, for
        ablations. Overrides disable the differentiable path.
        """
        if alpha_override is not None:
            v = float(alpha_override)
            return effective_gate(v, v, v)
        matched = match_entities(user_tokens, self.graph)
        k = ckg_score(matched, self.graph)
        if differentiable:
            a0_t = base_gate(self.gate_head, user_pooled)
            e_t = expert_score(self.expert, user_pooled)
            if expert_override is not None:
                e_t = Tensor(float(expert_override))
            return effective_gate_t(a0_t, e_t, k)
        a0 = base_gate(self.gate_head, user_pooled).item()
        e = (
            float(expert_override)
            if expert_override is not None
            else expert_score(self.expert, user_pooled).item()
        )
        return effective_gate(a0, e, k)

    # full passes ----------------------------------------------------------

    def forward_train(self, example: ChannelizedExample) -> tuple[Tensor, GateSignals]:
        """Teacher-forced logits over the target plus differentiable signals."""
        sys_out = self.encode_system(example.system_tokens)
        usr_out = self.encode_user(example.user_tokens)
        signals = self.gate_signals(
            usr_out.pooled, example.user_tokens, differentiable=True
        )
        decoder_input = [START_ID] + list(example.target_tokens[:-1])
        logits = decoder_forward(
            self.decoder,
            decoder_input,
            sys_out.memory,
            usr_out.memory,
            signals.alpha_eff_t,
        )
        return logits, signals

    def analysis(
        self,
        example: ChannelizedExample,
        alpha_override: float | None = None,
        expert_override: float | None = None,
    ) -> AnalysisRecord:
        """Pooled vectors, signals, and fused state, without gradient tracking."""
        sys_out = self.encode_system(example.system_tokens)
        usr_out = self.encode_user(example.user_tokens)
        signals = self.gate_signals(
            usr_out.pooled,
            example.user_tokens,
            alpha_override=alpha_override,
            expert_override=expert_override,
        )
        fused: FusedState = fuse(sys_out.pooled, usr_out.pooled, signals)
        e_s = sys_out.pooled.data.copy()
        e_u = usr_out.pooled.data.copy()
        return AnalysisRecord(
            e_s=e_s,
            e_u=e_u,
            signals=signals,
            fused=fused.F.data.copy(),
            gap=float(np.linalg.norm(e_u - e_s)),
        )
