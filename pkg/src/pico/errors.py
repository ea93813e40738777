"""Exception types shared across the package."""


class ContractError(ValueError):
    """A call violated a documented precondition or invariant."""


class ShapeError(ContractError):
    """Tensor shapes incompatible with the requested operation."""


class VocabError(ContractError):
    """Unknown symbol or out-of-range token id."""


class CorpusError(ContractError):
    """Corpus specification cannot be satisfied (counts, lengths, capacity)."""


class GenerationError(RuntimeError):
    """Autoregressive decoding could not produce a token."""


class FrozenHashError(RuntimeError):
    """Frozen parameter bytes changed during training: security invariant broken."""


class CheckpointError(RuntimeError):
    """Checkpoint file malformed, wrong version, or failed integrity checks."""
