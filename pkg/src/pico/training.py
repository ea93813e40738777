"""Optimization with a frozen system branch.

Total loss is task cross-entropy plus a weighted anti-leakage term plus a
weighted gate-supervision term. The gate term is a hinge applied to the
base gate and the expert score directly: adversarial examples push each
signal up to at least 1-delta, benign examples push each down to at most
eta. The graph score is a constant of the data and receives no gradient.
Alias-obfuscated payloads are withheld from the expert's hinge so that
detecting them is genuinely the graph's job.

The system encoder must be frozen before the main phase; its parameter
bytes are hashed before training and re-checked after every epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .corpus import ChannelizedExample, SYSTEM_ID
from .errors import ContractError, FrozenHashError
from .model import PicoModel
from .numkernel import ComputeTape, Tensor, backward
from .security import GateSignals


class GateMode(str, Enum):
    SUPERVISED = "supervised_gate"
    REINFORCE = "reinforce_gate"


@dataclass
class TrainConfig:
    # 0.02 with momentum 0.9 is the highest setting that is stable across
    # seeds at desk scale; larger steps diverge, plain SGD learns the
    # system-prefix read too slowly.
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20
    warmup_epochs: int = 1
    lambda_aux: float = 1.0
    lambda_gate: float = 1.0
    eta: float = 0.3  # benign gate ceiling
    delta: float = 0.1  # adversarial gate slack
    mode: GateMode = GateMode.SUPERVISED
    seed: int = 0

    def __post_init__(self) -> None:
        self.mode = GateMode(self.mode)
        if not 0.0 < self.eta < 1.0:
            raise ContractError(f"eta must be in (0, 1), got {self.eta}")
        if not 0.0 < self.delta < 1.0:
            raise ContractError(f"delta must be in (0, 1), got {self.delta}")
        if self.eta >= 1.0 - self.delta:
            raise ContractError(
                f"margins overlap: eta {self.eta} >= 1 - delta {1.0 - self.delta}"
            )
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ContractError("batch_size must be >= 1 and epoch counts >= 0")


class SGD:
    """Plain stochastic gradient descent with optional momentum.

    Refuses frozen tensors at construction so the optimizer can never hold
    a reference to the immutable branch.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        for p in params:
            if not p.requires_grad:
                raise ContractError("optimizer given a frozen (requires_grad=False) tensor")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if self.momentum:
                v = self._velocity[i]
                v = self.momentum * v - self.lr * p.grad if v is not None else -self.lr * p.grad
                self._velocity[i] = v
                p.data += v
            else:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------


def main_loss(logits: Tensor, target_tokens: Sequence[int]) -> Tensor:
    """Mean token-level cross-entropy under teacher forcing."""
    targets = list(target_tokens)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ContractError(
            f"main_loss: {logits.shape[0] if logits.ndim == 2 else '?'} logit rows "
            f"vs {len(targets)} targets"
        )
    logp = nk.log_softmax(logits, axis=-1)
    picked = nk.pick_per_row(logp, targets)
    return -picked.mean()


def aux_leakage_loss(
    logits: Tensor, system_tokens: Sequence[int], target_tokens: Sequence[int]
) -> Tensor:
    """Mean predicted probability mass on leakable system payload tokens.

    Leakable means: appears in the system prompt payload (tag excluded) and
    not in the target. Zero when the prediction puts no mass there.
    """
    payload = [t for t in system_tokens if t != SYSTEM_ID]
    leak_ids = sorted(set(payload) - set(target_tokens))
    if not leak_ids:
        return Tensor(0.0)
    v = logits.shape[-1]
    mask = np.zeros((v, 1))
    mask[leak_ids] = 1.0
    probs = nk.softmax(logits, axis=-1)
    per_step = nk.matmul(probs, Tensor(mask))  # (T, 1) leaked mass per step
    return per_step.mean()


def _hinge(x, threshold: float, above: bool):
    """max(0, x - threshold) when above else max(0, threshold - x)."""
    if isinstance(x, Tensor):
        inner = x - threshold if above else threshold - x
        return inner.relu()
    val = x - threshold if above else threshold - x
    return Tensor(max(0.0, val))


def gate_loss(signals: GateSignals, adversarial: bool, eta: float, delta: float) -> Tensor:
    """Margin supervision applied to the trainable signals.

    Adversarial examples require alpha0 and the expert score to each reach
    1-delta; benign examples cap each at eta. The graph score is excluded:
    it is data, not a parameterized signal.
    """
    a0 = signals.alpha0_t if signals.alpha0_t is not None else signals.alpha0
    ex = signals.expert_t if signals.expert_t is not None else signals.expert
    if adversarial:
        return _hinge(a0, 1.0 - delta, above=False) + _hinge(ex, 1.0 - delta, above=False)
    return _hinge(a0, eta, above=True) + _hinge(ex, eta, above=True)


def rl_gate_loss(
    signals: GateSignals, adversarial: bool, rng: np.random.Generator
) -> tuple[Tensor, float]:
    """Score-function surrogate: sample a block/pass action from the gate.

    The action is a Bernoulli draw with probability alpha_eff; reward is +1
    when the action matches the class (block adversarial, pass benign) and
    -1 otherwise. Returns (-reward * log prob(action), reward).
    """
    alpha_t = signals.alpha_eff_t
    if alpha_t is None:
        alpha_t = Tensor(signals.alpha_eff)
    p = nk.clamp(alpha_t, 1e-7, 1.0 - 1e-7)
    blocked = bool(rng.random() < signals.alpha_eff)
    reward = 1.0 if blocked == adversarial else -1.0
    log_prob = p.log() if blocked else (1.0 - p).log()
    return -reward * log_prob, reward


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    main: float
    aux: float
    gate: float
    benign_alpha_mean: float | None
    adversarial_alpha_mean: float | None
    frozen_hash_ok: bool

    def to_json_obj(self) -> dict:
        return self.__dict__.copy()


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    frozen_hash: str = ""
    final_loss: float | None = None
    mode: str = GateMode.SUPERVISED.value
    seed: int = 0

    def to_json_obj(self) -> dict:
        return {
            "epochs": [e.to_json_obj() for e in self.epochs],
            "frozen_hash": self.frozen_hash,
            "final_loss": self.final_loss,
            "mode": self.mode,
            "seed": self.seed,
        }


# ----------------------------------------------------------------------
# Loops
# ----------------------------------------------------------------------


def _example_losses(
    model: PicoModel,
    ex: ChannelizedExample,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, float, float, float, GateSignals]:
    logits, signals = model.forward_train(ex)
    l_main = main_loss(logits, ex.target_tokens)
    l_aux = aux_leakage_loss(logits, ex.system_tokens, ex.target_tokens)
    if config.mode is GateMode.REINFORCE:
        l_gate, _ = rl_gate_loss(signals, ex.adversarial, rng)
    elif ex.adversarial and model.vocab.has_alias(ex.user_tokens):
        # Obfuscated payloads are withheld from the expert's supervision:
        # the graph alone must account for them.
        a0 = signals.alpha0_t if signals.alpha0_t is not None else signals.alpha0
        l_gate = _hinge(a0, 1.0 - config.delta, above=False)
    else:
        l_gate = gate_loss(signals, ex.adversarial, config.eta, config.delta)
    total = l_main + config.lambda_aux * l_aux + config.lambda_gate * l_gate
    return total, l_main.item(), l_aux.item(), l_gate.item(), signals


def _check_grads_finite(params: Sequence[Tensor]) -> None:
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise FloatingPointError("non-finite gradient encountered")


def _run_epoch(
    model: PicoModel,
    examples: Sequence[ChannelizedExample],
    config: TrainConfig,
    optimizer: SGD,
    rng: np.random.Generator,
) -> tuple[float, float, float, list[float], list[float]]:
    order = rng.permutation(len(examples))
    sums = np.zeros(3)
    benign_alpha: list[float] = []
    adv_alpha: list[float] = []
    for start in range(0, len(order), config.batch_size):
        batch = [examples[i] for i in order[start : start + config.batch_size]]
        optimizer.zero_grad()
        scale = 1.0 / len(batch)
        for ex in batch:
            with ComputeTape():
                total, m, a, g, signals = _example_losses(model, ex, config, rng)
                backward(total * scale)
            sums += (m, a, g)
            (adv_alpha if ex.adversarial else benign_alpha).append(signals.alpha_eff)
        _check_grads_finite(optimizer.params)
        optimizer.step()
    n = max(len(examples), 1)
    return sums[0] / n, sums[1] / n, sums[2] / n, benign_alpha, adv_alpha


def warmup(
    model: PicoModel,
    examples: Sequence[ChannelizedExample],
    config: TrainConfig,
) -> None:
    """Joint benign-only pretraining of all branches, before the freeze.

    Gives the system encoder its weights; afterwards the caller freezes it
    and runs the main phase.
    """
    if model.system_encoder.frozen:
        raise ContractError("warmup must run before the system encoder is frozen")
    benign = [ex for ex in examples if not ex.adversarial]
    if config.warmup_epochs == 0 or not benign:
        return
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 10]))
    optimizer = SGD(
        list(model.trainable_parameters().values()),
        lr=config.learning_rate,
        momentum=config.momentum,
    )
    for _ in range(config.warmup_epochs):
        order = rng.permutation(len(benign))
        for start in range(0, len(order), config.batch_size):
            batch = [benign[i] for i in order[start : start + config.batch_size]]
            optimizer.zero_grad()
            scale = 1.0 / len(batch)
            for ex in batch:
                with ComputeTape():
                    logits, _ = model.forward_train(ex)
                    backward(main_loss(logits, ex.target_tokens) * scale)
            _check_grads_finite(optimizer.params)
            optimizer.step()


def train(
    model: PicoModel,
    examples: Sequence[ChannelizedExample],
    config: TrainConfig,
) -> TrainReport:
    """Main training phase over a frozen system branch.

    Deterministic under (config, seed). Raises FrozenHashError the moment
    the system encoder's bytes change.
    """
    if not model.system_encoder.frozen:
        raise ContractError("train requires a frozen system encoder (run warmup + freeze)")
    frozen_hash = model.system_hash()
    trainable = model.trainable_parameters()
    optimizer = SGD(
        list(trainable.values()), lr=config.learning_rate, momentum=config.momentum
    )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))

    report = TrainReport(frozen_hash=frozen_hash, mode=config.mode.value, seed=config.seed)
    for epoch in range(config.epochs):
        m, a, g, benign_alpha, adv_alpha = _run_epoch(
            model, examples, config, optimizer, rng
        )
        ok = model.system_hash() == frozen_hash
        report.epochs.append(
            EpochStats(
                epoch=epoch,
                main=m,
                aux=a,
                gate=g,
                benign_alpha_mean=float(np.mean(benign_alpha)) if benign_alpha else None,
                adversarial_alpha_mean=float(np.mean(adv_alpha)) if adv_alpha else None,
                frozen_hash_ok=ok,
            )
        )
        if not ok:
            raise FrozenHashError(
                f"system encoder bytes changed during epoch {epoch}; training aborted"
            )
        report.final_loss = m + config.lambda_aux * a + config.lambda_gate * g
    return report
