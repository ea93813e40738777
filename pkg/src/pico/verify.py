"""Numerical certification of the gating bounds.

Estimates the two assumption constants (the representation gap over a
corpus and an empirical Lipschitz lower bound for the decoding map), then
checks three statements:

  1. invariance: every adversarial example whose gate clears 1 - eps/G has
     its fused vector within eps of the system encoding, and the exact
     residual identity holds;
  2. detection: the gate clears 1 - delta on adversarial draws at least a
     (1 - gamma) fraction of the time, up to one-sided binomial slack, and
     each firing draw satisfies the implied distance bound;
  3. utility: every benign example whose gate stays at or below eta has its
     fused vector within eta * G of the user encoding, with the dual
     identity.

Checks with an empty premise set are vacuous passes and are flagged, never
silently green. A fault-injection knob perturbs the fused vector so tests
can confirm the checkers actually detect violations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import ChannelizedExample
from .errors import ContractError
from .model import PicoModel

IDENTITY_TOL = 1e-9
# One-sided 99% normal quantile for the detection-rate slack.
Z_99 = 2.576


@dataclass
class BoundEstimates:
    gap: float  # G: max ||E_U - E_S|| over the sample
    lipschitz: float  # L-hat: max sampled difference quotient (lower bound)
    n_examples: int
    n_pairs: int
    seed: int

    def to_json_obj(self) -> dict:
        return {
            "gap": self.gap,
            "lipschitz_lower_bound": self.lipschitz,
            "n_examples": self.n_examples,
            "n_pairs": self.n_pairs,
            "seed": self.seed,
        }


@dataclass
class TheoremReport:
    theorem: str
    params: dict
    trials: int
    violations: int
    worst_slack: float
    passed: bool
    vacuous: bool = False
    extra: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "theorem": self.theorem,
            "params": self.params,
            "trials": self.trials,
            "violations": self.violations,
            "worst_slack": self.worst_slack,
            "passed": self.passed,
            "vacuous": self.vacuous,
            **({"extra": self.extra} if self.extra else {}),
        }


# ----------------------------------------------------------------------
# Assumption constants
# ----------------------------------------------------------------------


def representation_gap(model: PicoModel, examples: Sequence[ChannelizedExample]) -> float:
    """G: maximum pooled-representation distance over the examples."""
    if not examples:
        raise ContractError("representation_gap: empty example set")
    return max(model.analysis(ex).gap for ex in examples)


def lipschitz_estimate(
    f: Callable[[np.ndarray], np.ndarray],
    base_points: Sequence[np.ndarray],
    n_pairs: int,
    radius: float,
    seed: int,
) -> float:
    """Max difference quotient of f over sampled point pairs.

    Pairs are drawn from an axis-aligned box of half-width ``radius``
    around the observed base points. Degenerate pairs are skipped. The
    result is an empirical lower bound on the true Lipschitz constant; it
    is reported, never asserted against.
    """
    if n_pairs < 1:
        raise ContractError(f"lipschitz_estimate: n_pairs must be >= 1, got {n_pairs}")
    if not base_points:
        raise ContractError("lipschitz_estimate: no base points")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 20]))
    points = [np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in base_points]
    best = 0.0
    for _ in range(n_pairs):
        center = points[int(rng.integers(0, len(points)))]
        z1 = center + rng.uniform(-radius, radius, size=center.shape)
        z2 = center + rng.uniform(-radius, radius, size=center.shape)
        denom = float(np.linalg.norm(z1 - z2))
        if denom == 0.0:
            continue
        num = float(np.linalg.norm(np.asarray(f(z1)) - np.asarray(f(z2))))
        best = max(best, num / denom)
    return best


def gate_path_map(
    model: PicoModel, example: ChannelizedExample
) -> tuple[Callable[[np.ndarray], np.ndarray], np.ndarray]:
    """Decoding map along the fusion segment, parameterized by arc length.

    The input coordinate s in [0, gap] corresponds to the gate value
    s / gap, so distances in the input space equal distances between the
    fused vectors; the returned base point is the example's observed
    position on the segment. Output is the flattened teacher-forced logits.
    """
    from .decoder import decoder_forward
    from .corpus import START_ID

    rec = model.analysis(example)
    gap = rec.gap
    sys_out = model.encode_system(example.system_tokens)
    usr_out = model.encode_user(example.user_tokens)
    decoder_input = [START_ID] + list(example.target_tokens[:-1])

    def f(s: np.ndarray) -> np.ndarray:
        t = 0.5 if gap == 0 else min(max(float(s[0]) / gap, 0.0), 1.0)
        logits = decoder_forward(
            model.decoder, decoder_input, sys_out.memory, usr_out.memory, t
        )
        return logits.data.reshape(-1)

    base = np.array([rec.signals.alpha_eff * gap])
    return f, base


# ----------------------------------------------------------------------
# Fault injection helper
# ----------------------------------------------------------------------


def _perturbed(fused: np.ndarray, magnitude: float) -> np.ndarray:
    if magnitude == 0.0:
        return fused
    direction = np.zeros_like(fused)
    direction[0] = 1.0
    return fused + magnitude * direction


# ----------------------------------------------------------------------
# Bound checks
# ----------------------------------------------------------------------


def check_theorem1(
    model: PicoModel,
    examples: Sequence[ChannelizedExample],
    epsilon: float,
    gap: float,
    perturb: float = 0.0,
) -> TheoremReport:
    """Deterministic invariance bound on premise-satisfying adversarial examples."""
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    threshold = 0.0 if gap == 0 else 1.0 - epsilon / gap
    trials = 0
    violations = 0
    worst = -np.inf
    for ex in examples:
        rec = model.analysis(ex)
        if rec.signals.alpha_eff < threshold:
            continue
        trials += 1
        fused = _perturbed(rec.fused, perturb)
        dist = float(np.linalg.norm(fused - rec.e_s))
        identity = (1.0 - rec.signals.alpha_eff) * rec.gap
        worst = max(worst, dist - epsilon)
        if dist > epsilon + IDENTITY_TOL or abs(dist - identity) > IDENTITY_TOL:
            violations += 1
    return TheoremReport(
        theorem="1-adversarial-invariance",
        params={"epsilon": epsilon, "gap": gap, "perturb": perturb},
        trials=trials,
        violations=violations,
        worst_slack=worst if trials else 0.0,
        passed=violations == 0,
        vacuous=trials == 0,
    )


@dataclass
class DetectionTrial:
    """One adversarial draw for the probabilistic check."""

    alpha_eff: float
    fused: np.ndarray | None = None
    e_s: np.ndarray | None = None


def synthetic_detector(
    fire_rate: float, delta: float, gap: float, dim: int = 8
) -> Callable[[np.random.Generator], DetectionTrial]:
    """Simulated gate with a known detection rate, for checker validation.

    Firing draws place the gate in [1-delta, 1]; misses land strictly below
    1-delta. Each trial fabricates an exact convex combination so the
    distance conclusion is exercised too.
    """

    def draw(rng: np.random.Generator) -> DetectionTrial:
        e_s = rng.normal(0.0, 1.0, size=dim)
        direction = rng.normal(0.0, 1.0, size=dim)
        direction /= np.linalg.norm(direction)
        e_u = e_s + direction * rng.uniform(0.2, 1.0) * gap
        if rng.random() < fire_rate:
            alpha = 1.0 - delta * rng.random()
        else:
            alpha = rng.uniform(0.0, max(1.0 - delta - 0.05, 0.0))
        fused = alpha * e_s + (1.0 - alpha) * e_u
        return DetectionTrial(alpha_eff=alpha, fused=fused, e_s=e_s)

    return draw


def model_detector(
    model: PicoModel, adversarial_examples: Sequence[ChannelizedExample]
) -> Callable[[np.random.Generator], DetectionTrial]:
    """Adversarial draws from a trained model's actual gate."""
    if not adversarial_examples:
        raise ContractError("model_detector: no adversarial examples")

    def draw(rng: np.random.Generator) -> DetectionTrial:
        ex = adversarial_examples[int(rng.integers(0, len(adversarial_examples)))]
        rec = model.analysis(ex)
        return DetectionTrial(alpha_eff=rec.signals.alpha_eff, fused=rec.fused, e_s=rec.e_s)

    return draw


def check_theorem2(
    detector: Callable[[np.random.Generator], DetectionTrial],
    delta: float,
    gamma: float,
    trials: int,
    seed: int,
    gap: float,
) -> TheoremReport:
    """Probabilistic detection check over Monte Carlo draws.

    Passes when the empirical firing rate p-hat is at least
    (1 - gamma) - z * sqrt(p-hat (1 - p-hat) / trials) with z = 2.576
    (99% one-sided slack), and every firing draw with vectors attached
    satisfies ||fused - e_s|| <= delta * gap + tolerance.
    """
    if trials < 100:
        raise ContractError(f"check_theorem2: need at least 100 trials, got {trials}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    fired = 0
    conclusion_violations = 0
    for _ in range(trials):
        trial = detector(rng)
        if trial.alpha_eff >= 1.0 - delta:
            fired += 1
            if trial.fused is not None and trial.e_s is not None:
                dist = float(np.linalg.norm(trial.fused - trial.e_s))
                if dist > delta * gap + IDENTITY_TOL:
                    conclusion_violations += 1
    p_hat = fired / trials
    slack = Z_99 * np.sqrt(p_hat * (1.0 - p_hat) / trials)
    rate_ok = p_hat >= (1.0 - gamma) - slack
    return TheoremReport(
        theorem="2-probabilistic-detection",
        params={"delta": delta, "gamma": gamma, "gap": gap},
        trials=trials,
        violations=conclusion_violations,
        worst_slack=(1.0 - gamma) - slack - p_hat,
        passed=rate_ok and conclusion_violations == 0,
        vacuous=False,
        extra={"p_hat": p_hat, "rate_ok": bool(rate_ok)},
    )


def check_theorem3(
    model: PicoModel,
    examples: Sequence[ChannelizedExample],
    eta: float,
    gap: float,
    perturb: float = 0.0,
) -> TheoremReport:
    """Utility bound on premise-satisfying benign examples."""
    if not 0.0 < eta < 1.0:
        raise ContractError(f"eta must be in (0, 1), got {eta}")
    bound = eta * gap
    trials = 0
    violations = 0
    worst = -np.inf
    for ex in examples:
        rec = model.analysis(ex)
        if rec.signals.alpha_eff > eta:
            continue
        trials += 1
        fused = _perturbed(rec.fused, perturb)
        dist = float(np.linalg.norm(fused - rec.e_u))
        identity = rec.signals.alpha_eff * rec.gap
        worst = max(worst, dist - bound)
        if dist > bound + IDENTITY_TOL or abs(dist - identity) > IDENTITY_TOL:
            violations += 1
    return TheoremReport(
        theorem="3-benign-utility",
        params={"eta": eta, "gap": gap, "perturb": perturb},
        trials=trials,
        violations=violations,
        worst_slack=worst if trials else 0.0,
        passed=violations == 0,
        vacuous=trials == 0,
    )
