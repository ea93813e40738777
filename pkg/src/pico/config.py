"""Model hyperparameters and the seeded RNG substream registry."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

# Named substreams hang off one master seed so every run is reproducible
# from a single integer. Adding a stream is backward compatible; renumbering
# existing ones is not.
_STREAMS = {
    "corpus": 0,
    "init": 1,
    "training": 2,
    "verify": 3,
    "graph": 4,
    "attack": 5,
}


def substream(seed: int, name: str) -> np.random.Generator:
    """Return the named child generator of a master seed."""
    if name not in _STREAMS:
        raise ContractError(f"unknown RNG substream {name!r}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name]]))


@dataclass
class ModelConfig:
    """Dimensions and structural options of the two-channel model."""

    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_len: int = 64
    d_kg: int = 16
    expert_hidden: int = 16
    pooling: str = "mean"  # "mean" or "cls" (channel tag acts as CLS)
    positional: str = "sinusoidal"  # or "learned"
    user_phase: float = math.pi / 4  # phase offset isolating the user channel
    emb_scale: float = 0.25

    def __post_init__(self) -> None:
        if self.d_model % 2 != 0:
            raise ContractError(f"d_model must be even, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.pooling not in ("mean", "cls"):
            raise ContractError(f"unknown pooling mode {self.pooling!r}")
        if self.positional not in ("sinusoidal", "learned"):
            raise ContractError(f"unknown positional mode {self.positional!r}")
