"""Shared test utilities: tiny model builders and gradient-check sweeps."""

from __future__ import annotations

import numpy as np

from pico import numkernel as nk
from pico.config import ModelConfig, substream
from pico.corpus import CorpusSpec, Vocab, generate_corpus, split
from pico.model import PicoModel
from pico.numkernel import ComputeTape, Tensor, backward
from pico.security import default_security_graph

TINY_VOCAB = 40


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=TINY_VOCAB,
        d_model=16,
        n_layers=1,
        n_heads=2,
        d_ff=24,
        max_len=48,
        d_kg=8,
        expert_hidden=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed: int = 3, **overrides) -> PicoModel:
    cfg = tiny_config(**overrides)
    vocab = Vocab.build(cfg.vocab_size)
    graph = default_security_graph(vocab, substream(seed, "graph"), cfg.d_kg)
    return PicoModel.build(cfg, vocab, graph, substream(seed, "init"))


def tiny_corpus(seed: int = 3, n_benign: int = 30, n_direct: int = 15, n_puppetry: int = 15):
    spec = CorpusSpec(
        vocab_size=TINY_VOCAB,
        n_benign=n_benign,
        n_direct=n_direct,
        n_puppetry=n_puppetry,
        user_len=(3, 6),
        seed=seed,
    )
    return generate_corpus(spec)


def tiny_splits(seed: int = 3, **kwargs):
    return split(tiny_corpus(seed, **kwargs), (0.7, 0.1, 0.2), seed=seed)


# ----------------------------------------------------------------------
# Gradient sweep shared by unit tests and the acceptance suite
# ----------------------------------------------------------------------


def primitive_cases(rng: np.random.Generator):
    """(name, scalar_fn, point) triples covering every differentiable primitive.

    Each fn maps one tensor to a scalar so the central-difference oracle
    applies; fixed co-inputs are baked into the closures.
    """
    a34 = Tensor(rng.normal(size=(3, 4)))
    b43 = Tensor(rng.normal(size=(4, 3)))
    gain = Tensor(rng.normal(size=(4,)))
    bias = Tensor(rng.normal(size=(4,)))
    w = Tensor(rng.normal(size=(3, 4)))
    ids = [1, 0, 2]

    def weighted(x):
        # Sum against fixed weights so reductions see non-uniform gradients.
        return (x * Tensor(np.ones(x.shape))).sum() if x.ndim == 0 else (x * w_like(x)).sum()

    def w_like(x):
        r = np.random.default_rng(0)
        return Tensor(r.normal(size=x.shape))

    return [
        ("add", lambda x: (nk.add(x, w) * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("add_broadcast", lambda x: (nk.add(a34, x) * w).sum(), Tensor(rng.normal(size=(4,)))),
        ("sub", lambda x: (nk.sub(x, w) * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("mul", lambda x: (nk.mul(x, w) * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("neg", lambda x: (nk.neg(x) * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("matmul_left", lambda x: (nk.matmul(x, b43) * w_like(nk.matmul(a34, b43))).sum(),
         Tensor(rng.normal(size=(3, 4)))),
        ("matmul_right", lambda x: (nk.matmul(a34, x) * w_like(nk.matmul(a34, b43))).sum(),
         Tensor(rng.normal(size=(4, 3)))),
        ("transpose", lambda x: (nk.transpose(x) * w_like(nk.transpose(a34))).sum(),
         Tensor(rng.normal(size=(3, 4)))),
        ("reshape", lambda x: (x.reshape((4, 3)) * w_like(b43)).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("col_slice", lambda x: (nk.col_slice(x, 1, 3) * w_like(nk.col_slice(a34, 1, 3))).sum(),
         Tensor(rng.normal(size=(3, 4)))),
        ("concat_cols", lambda x: (nk.concat_cols([x, a34]) * w_like(nk.concat_cols([a34, a34]))).sum(),
         Tensor(rng.normal(size=(3, 4)))),
        ("select_row", lambda x: (nk.select_row(x, 1) * w_like(nk.select_row(a34, 1))).sum(),
         Tensor(rng.normal(size=(3, 4)))),
        ("embed", lambda x: (nk.embed(x, ids) * w_like(nk.embed(a34, ids))).sum(),
         Tensor(rng.normal(size=(3, 4)))),
        ("pick_per_row", lambda x: (nk.pick_per_row(x, ids) * Tensor([0.7, -1.1, 0.4])).sum(),
         Tensor(rng.normal(size=(3, 4)))),
        ("softmax", lambda x: (nk.softmax(x, axis=-1) * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("log_softmax", lambda x: (nk.log_softmax(x, axis=-1) * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("layer_norm_x", lambda x: (nk.layer_norm(x, gain, bias) * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("layer_norm_gain", lambda x: (nk.layer_norm(a34, x, bias) * w).sum(), Tensor(rng.normal(size=(4,)))),
        ("layer_norm_bias", lambda x: (nk.layer_norm(a34, gain, x) * w).sum(), Tensor(rng.normal(size=(4,)))),
        ("tanh", lambda x: (x.tanh() * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("sigmoid", lambda x: (x.sigmoid() * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("relu", lambda x: (x.relu() * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("exp", lambda x: (x.exp() * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("log", lambda x: (x.log() * w).sum(), Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5)),
        ("sin", lambda x: (x.sin() * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("mean_all", lambda x: x.mean(), Tensor(rng.normal(size=(3, 4)))),
        ("mean_axis", lambda x: (x.mean(axis=0) * gain).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("sum_axis", lambda x: (x.sum(axis=1) * Tensor([0.3, -0.5, 1.2])).sum(),
         Tensor(rng.normal(size=(3, 4)))),
        ("maximum", lambda x: (nk.maximum(x, w) * w).sum(), Tensor(rng.normal(size=(3, 4)))),
        ("clamp", lambda x: (nk.clamp(x, -0.8, 0.8) * w).sum(), Tensor(rng.normal(size=(3, 4)))),
    ]


def sweep_primitive_gradients(points_per_op: int, seed: int = 11) -> dict[str, float]:
    """Worst finite-difference error per primitive over random input points."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for name, fn, proto in primitive_cases(rng):
        errs = []
        for _ in range(points_per_op):
            if name == "log":
                point = Tensor(np.abs(rng.normal(size=proto.shape)) + 0.5)
            else:
                point = Tensor(rng.normal(size=proto.shape))
            errs.append(nk.finite_diff_check(fn, point))
        worst[name] = max(errs)
    return worst


def end_to_end_gradient_check(n_coords: int = 100, seed: int = 5, h: float = 1e-5) -> float:
    """Central-difference check of the full training loss wrt sampled parameters."""
    from pico.training import TrainConfig, main_loss, aux_leakage_loss, gate_loss

    model = tiny_model(seed)
    corpus = tiny_corpus(seed, n_benign=4, n_direct=2, n_puppetry=2)
    cfg = TrainConfig(seed=seed)

    def loss_value() -> float:
        total = 0.0
        for ex in corpus:
            logits, signals = model.forward_train(ex)
            l = main_loss(logits, ex.target_tokens)
            l = l + cfg.lambda_aux * aux_leakage_loss(logits, ex.system_tokens, ex.target_tokens)
            l = l + cfg.lambda_gate * gate_loss(signals, ex.adversarial, cfg.eta, cfg.delta)
            total += l.item()
        return total / len(corpus)

    params = list(model.trainable_parameters().values())
    for p in params:
        p.grad = None
    with ComputeTape():
        acc = None
        for ex in corpus:
            logits, signals = model.forward_train(ex)
            l = main_loss(logits, ex.target_tokens)
            l = l + cfg.lambda_aux * aux_leakage_loss(logits, ex.system_tokens, ex.target_tokens)
            l = l + cfg.lambda_gate * gate_loss(signals, ex.adversarial, cfg.eta, cfg.delta)
            acc = l if acc is None else acc + l
        backward(acc * (1.0 / len(corpus)))

    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    worst = 0.0
    for _ in range(n_coords):
        pi = int(rng.integers(0, len(params)))
        ci = int(rng.integers(0, sizes[pi]))
        p = params[pi]
        analytic = p.grad.reshape(-1)[ci] if p.grad is not None else 0.0
        flat = p.data.reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + h
        f_plus = loss_value()
        flat[ci] = orig - h
        f_minus = loss_value()
        flat[ci] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst
