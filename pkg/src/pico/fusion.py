"""Gated fusion of the two channel representations.

The effective gate is the exact max of the base gate, the expert score and
the graph score. Fusion is the literal convex combination
``alpha_eff * e_s + (1 - alpha_eff) * e_u``, one multiply-add per element,
so the residual identities

    ||F - e_s|| = (1 - alpha_eff) * ||e_u - e_s||
    ||F - e_u|| =      alpha_eff  * ||e_u - e_s||

hold to float rounding and are asserted by the verification harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ContractError, ShapeError
from .numkernel import Tensor
from .security import GateSignals


@dataclass
class GateHeadParams:
    """Single linear unit producing the base gate from the pooled user vector."""

    w: Tensor
    b: Tensor

    @classmethod
    def build(cls, d_model: int, rng: np.random.Generator) -> "GateHeadParams":
        import math

        std = math.sqrt(2.0 / (d_model + 1))
        return cls(
            w=Tensor(rng.normal(0.0, std, size=(d_model, 1)), requires_grad=True),
            b=Tensor(np.zeros(1), requires_grad=True),
        )

    def tensors(self, prefix: str = "gate"):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def base_gate(head: GateHeadParams, user_pooled: Tensor) -> Tensor:
    """Base gate alpha0 in (0, 1); scalar tensor, differentiable."""
    d = head.w.shape[0]
    if user_pooled.shape != (d,):
        raise ShapeError(f"base_gate: pooled input {user_pooled.shape}, expected ({d},)")
    logit = nk.matmul(user_pooled.reshape((1, d)), head.w) + head.b
    return logit.reshape(()).sigmoid()


def _check_unit(name: str, v: float) -> float:
    v = float(v)
    if not 0.0 <= v <= 1.0:
        raise ContractError(f"{name}={v} outside [0, 1]")
    return v


def effective_gate(alpha0: float, expert: float, ckg: float) -> GateSignals:
    """Combine the three signals by exact max; records all four values."""
    a = _check_unit("alpha0", alpha0)
    e = _check_unit("expert", expert)
    k = _check_unit("ckg", ckg)
    return GateSignals(alpha0=a, expert=e, ckg=k, alpha_eff=max(a, e, k))


def effective_gate_t(alpha0_t: Tensor, expert_t: Tensor, ckg: float) -> GateSignals:
    """Tensor-path variant used during training.

    The max is taken pairwise with ties resolved toward the earlier signal,
    so the subgradient order is (alpha0, expert, ckg); the graph score is a
    constant and receives no gradient.
    """
    k = _check_unit("ckg", ckg)
    eff_t = nk.maximum(nk.maximum(alpha0_t, expert_t), Tensor(k))
    sig = GateSignals(
        alpha0=_check_unit("alpha0", alpha0_t.item()),
        expert=_check_unit("expert", expert_t.item()),
        ckg=k,
        alpha_eff=eff_t.item(),
    )
    sig.alpha0_t = alpha0_t
    sig.expert_t = expert_t
    sig.alpha_eff_t = eff_t
    return sig


@dataclass
class FusedState:
    F: Tensor
    signals: GateSignals


def fuse(e_s: Tensor, e_u: Tensor, signals: GateSignals) -> FusedState:
    """Convex combination of the pooled channel vectors under the gate.

    Differentiable through e_u and the gate tensor when present; e_s is
    expected to come from the frozen branch and contributes no gradient.
    """
    if e_s.shape != e_u.shape:
        raise ShapeError(f"fuse: shape mismatch {e_s.shape} vs {e_u.shape}")
    if signals.alpha_eff_t is not None:
        alpha = signals.alpha_eff_t
        f = alpha * e_s + (1.0 - alpha) * e_u
    else:
        a = signals.alpha_eff
        f = a * e_s + (1.0 - a) * e_u
    return FusedState(F=f, signals=signals)
